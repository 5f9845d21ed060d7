// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Every oracle here is written independently of the library code it checks.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "thermoviab/error.hpp"
#include "thermoviab/features.hpp"
#include "thermoviab/learning.hpp"
#include "thermoviab/metrics.hpp"
#include "thermoviab/phantom.hpp"
#include "thermoviab/pipeline.hpp"
#include "thermoviab/registration.hpp"
#include "thermoviab/rng.hpp"
#include "thermoviab/segmentation.hpp"

namespace fs = std::filesystem;
using namespace thermoviab;

namespace {

using Clock = std::chrono::steady_clock;

int g_failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs a criterion, turning an unexpected exception into a failure line.
void criterion(const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(false, name, std::string("threw: ") + e.what());
  }
}

int worker_count() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------------------
// GLCM

std::array<double, 6> glcm_oracle(const GrayImage& img, int d, int angle, int levels) {
  // Direction in (row, col); 90 degrees points up the image and the
  // diagonals step d pixels along both axes.
  const int dcol = angle == 90 ? 0 : (angle == 135 ? -d : d);
  const int drow = angle == 0 ? 0 : -d;
  std::vector<long> counts(static_cast<std::size_t>(levels * levels), 0);
  long total = 0;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const int r2 = r + drow, c2 = c + dcol;
      if (r2 < 0 || r2 >= img.height || c2 < 0 || c2 >= img.width) continue;
      const int a = img.at(r, c), b = img.at(r2, c2);
      ++counts[static_cast<std::size_t>(a * levels + b)];
      ++counts[static_cast<std::size_t>(b * levels + a)];
      total += 2;
    }
  }
  double contrast = 0, dissimilarity = 0, homogeneity = 0, asm_sum = 0, mean_i = 0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = static_cast<double>(counts[static_cast<std::size_t>(i * levels + j)]) / static_cast<double>(total);
      contrast += p * (i - j) * (i - j);
      dissimilarity += p * std::abs(i - j);
      homogeneity += p / (1.0 + (i - j) * (i - j));
      asm_sum += p * p;
      mean_i += p * i;
    }
  }
  // Symmetric matrix: the row and column marginals coincide.
  double var = 0, cov = 0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = static_cast<double>(counts[static_cast<std::size_t>(i * levels + j)]) / static_cast<double>(total);
      var += p * (i - mean_i) * (i - mean_i);
      cov += p * (i - mean_i) * (j - mean_i);
    }
  }
  const double correlation = var < 1e-15 ? 1.0 : cov / var;
  return {contrast, dissimilarity, homogeneity, std::sqrt(asm_sum), correlation, asm_sum};
}

void glcm_criterion() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  int comparisons = 0;
  for (int n = 0; n < 100; ++n) {
    GrayImage img{8, 8, std::vector<int>(64)};
    for (auto& v : img.levels) v = static_cast<int>(rng.below(kGrayLevels));
    for (int d : kGlcmDistances) {
      for (int a : kGlcmAngles) {
        const GlcmProperties got = glcm(img, d, a, kGrayLevels, 1);
        const auto want = glcm_oracle(img, d, a, kGrayLevels);
        for (std::size_t k = 0; k < 6; ++k) {
          worst = std::max(worst, std::abs(got[k] - want[k]) / std::max(1.0, std::abs(want[k])));
          ++comparisons;
        }
      }
    }
  }
  const double elapsed = seconds_since(t0);
  report(worst <= 1e-12 && elapsed < 10.0, "glcm_oracle",
         fmt("%d property comparisons, max rel error %.3g (tol 1e-12), %.2f s (limit 10 s)", comparisons, worst,
             elapsed));
}

// ---------------------------------------------------------------------------
// ECC

ThermalFrame render(const PhantomField& field, const PhantomSpec& s, double dx, double dy, double sigma, Rng* rng) {
  ThermalFrame f(s.width, s.height, 0.0);
  field.render(0.0, dx, dy, f.temps);
  if (sigma > 0) {
    for (auto& v : f.temps) v = static_cast<float>(v + sigma * rng->normal());
  }
  return f;
}

void ecc_criterion() {
  const auto t0 = Clock::now();
  PhantomSpec s;
  s.seed = 21;
  const PhantomField field(s);
  Rng rng(55);
  const ThermalFrame ref = render(field, s, 0, 0, 0, nullptr);
  double worst_clean = 0.0, worst_noisy = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double dx = rng.uniform(-4, 4), dy = rng.uniform(-4, 4);
    const WarpModel w = ecc_align(ref, render(field, s, dx, dy, 0, nullptr), WarpKind::Translation);
    worst_clean = std::max(worst_clean, std::hypot(w.tx() - dx, w.ty() - dy));
    const ThermalFrame noisy_ref = render(field, s, 0, 0, 0.04, &rng);
    const WarpModel wn = ecc_align(noisy_ref, render(field, s, dx, dy, 0.04, &rng), WarpKind::Translation);
    worst_noisy = std::max(worst_noisy, std::hypot(wn.tx() - dx, wn.ty() - dy));
  }
  const WarpModel self = ecc_align(ref, ref, WarpKind::Euclidean);
  const double elapsed = seconds_since(t0);
  const bool ok = worst_clean < 0.1 && worst_noisy < 0.5 && std::abs(self.rho - 1.0) <= 1e-9 && elapsed < 60.0;
  report(ok, "ecc_recovery",
         fmt("50 translations in [-4,4]^2: max error %.4f px noise-free (<0.1), %.4f px at sigma 0.04 (<0.5); "
             "self rho - 1 = %.2e (|.|<=1e-9); %.1f s (limit 60 s)",
             worst_clean, worst_noisy, self.rho - 1.0, elapsed));
}

// ---------------------------------------------------------------------------
// Segmenter

double gradient_check(SegmenterNet& net, const Tensor& x, const std::vector<double>& target) {
  std::vector<Conv2d> grads, scratch;
  net.loss_and_gradients(x, target, grads);
  const double h = 1e-5;
  double worst = 0.0;
  auto probe = [&](double& param, double analytic) {
    const double keep = param;
    param = keep + h;
    const double up = net.loss_and_gradients(x, target, scratch);
    param = keep - h;
    const double down = net.loss_and_gradients(x, target, scratch);
    param = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic)));
  };
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    for (std::size_t k = 0; k < layer.weight.size(); ++k) probe(layer.weight[k], grads[l].weight[k]);
    for (std::size_t k = 0; k < layer.bias.size(); ++k) probe(layer.bias[k], grads[l].bias[k]);
  }
  return worst;
}

void segmenter_criterion() {
  const auto t0 = Clock::now();
  SegmenterNet tiny({2, 3, 4}, 13);
  Rng rng(31);
  // Biases start at zero, which puts every dead-input pixel exactly on a
  // ReLU kink where central differences are meaningless; randomize them.
  for (auto& layer : tiny.layers()) {
    for (auto& b : layer.bias) b = rng.uniform(-0.1, 0.1);
  }
  Tensor x(1, 16, 16);
  for (auto& v : x.v) v = rng.normal();
  std::vector<double> target(256);
  for (auto& v : target) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  const double grad_err = gradient_check(tiny, x, target);

  // Five small phantom frames with their truth masks.
  std::vector<TrainSample> data;
  PhantomSpec base;
  base.width = 64;
  base.height = 48;
  for (const auto& spec : study_specs(5, 0.5, 77, base)) {
    PhantomSpec s = spec;
    s.duration = 1;
    const PhantomCase pc = generate_case(s);
    data.push_back({pc.sequence.frames.front(), pc.truth.mask});
  }
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 5;
  cfg.learning_rate = 3e-3;
  cfg.seed = 1;
  const SegmenterNet net = train_segmenter(data, cfg);
  double min_dice = 1.0;
  for (const auto& sample : data) {
    RoiMask predicted;
    try {
      predicted = infer_mask(net, sample.frame);
    } catch (const Error&) {
      predicted = RoiMask(sample.mask.width, sample.mask.height, 0);
    }
    min_dice = std::min(min_dice, dice(predicted, sample.mask));
  }
  const double elapsed = seconds_since(t0);
  report(grad_err <= 1e-3 && min_dice >= 0.95 && elapsed < 120.0, "segmenter_training",
         fmt("gradient check max rel error %.2e (<=1e-3); overfit 5 frames in 200 epochs: min Dice %.4f (>=0.95); "
             "%.1f s (limit 120 s)",
             grad_err, min_dice, elapsed));
}

void classical_segmentation_criterion() {
  double min_dice = 1.0, sum = 0.0;
  const auto specs = study_specs(20, 0.5, 404);
  std::vector<double> scores(specs.size());
  parallel_for(specs.size(), worker_count(), [&](std::size_t i) {
    PhantomSpec s = specs[i];
    s.duration = 1;
    const PhantomCase pc = generate_case(s);
    scores[i] = dice(segment_cold_region(pc.sequence.frames.front()), pc.truth.mask);
  });
  for (double d : scores) {
    min_dice = std::min(min_dice, d);
    sum += d;
  }
  report(min_dice >= 0.9, "classical_segmentation",
         fmt("20 phantom cases: min Dice %.4f (>=0.9), mean %.4f", min_dice, sum / 20.0));
}

// ---------------------------------------------------------------------------
// Ensemble and metrics

void ensemble_criterion() {
  int mismatches = 0;
  for (unsigned mask = 0; mask < 32; ++mask) {
    std::array<int, 5> votes{};
    for (int i = 0; i < 5; ++i) votes[static_cast<std::size_t>(i)] = (mask >> i) & 1;
    const Label want = std::popcount(mask) >= 2 ? Label::Viable : Label::Nonviable;
    if (ensemble_label(votes, 2) != want) ++mismatches;
  }
  report(mismatches == 0, "ensemble_votes", fmt("32 vote vectors, %d mismatches against popcount >= 2", mismatches));
}

void metrics_criterion() {
  Rng rng(8);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 6 + rng.below(80);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = trial % 2 ? rng.uniform() : static_cast<double>(rng.below(5));
    }
    y[0] = 1;
    y[1] = 0;
    long twice = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      pos += y[i];
      neg += 1 - y[i];
      if (!y[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (!y[j]) twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
      }
    }
    const double want = static_cast<double>(twice) / (2.0 * static_cast<double>(pos * neg));
    if (auc(s, y) != want) ++mismatches;
  }
  std::vector<int> labels, preds;
  const std::array<std::array<int, 3>, 4> fixture{{{1, 1, 15}, {1, 0, 7}, {0, 0, 25}, {0, 1, 1}}};
  for (const auto& [label, pred, count] : fixture) {
    for (int i = 0; i < count; ++i) {
      labels.push_back(label);
      preds.push_back(pred);
    }
  }
  const ConfusionCounts c = confusion(labels, preds);
  const std::string sens = percent(c.sensitivity()), spec = percent(c.specificity());
  report(mismatches == 0 && sens == "68.18" && spec == "96.15", "metrics_oracles",
         fmt("AUC vs pair counting on 200 sets: %d mismatches (exact); fixture 15/7/25/1 -> %s%% / %s%%", mismatches,
             sens.c_str(), spec.c_str()));
}

// ---------------------------------------------------------------------------
// End-to-end phantom study (in memory)

struct Study {
  LabelledRecords data;
  std::vector<std::size_t> record_case;  // index into the spec list
  bool cardinality_ok = true;
  std::string cardinality_detail;
};

Study run_study(const std::vector<PhantomSpec>& specs) {
  std::vector<std::vector<FeatureRecord>> per_case(specs.size());
  std::vector<CaseRecord> records(specs.size());
  parallel_for(specs.size(), worker_count(), [&](std::size_t i) {
    const PhantomCase pc = generate_case(specs[i]);
    records[i] = pc.record;
    per_case[i] = process_case(pc.record, pc.sequence).features;
  });
  Study st;
  const std::array<std::size_t, 5> expected{42, 576, 576, 1152, 90};
  std::size_t extracted = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (auto& r : per_case[i]) {
      ++extracted;
      for (std::size_t f = 0; f < 5; ++f) {
        if (r.blocks[f].values.size() != expected[f] || r.blocks[f].names.size() != expected[f]) {
          st.cardinality_ok = false;
        }
      }
      st.data.records.push_back(std::move(r));
      st.data.labels.push_back(records[i].label == Label::Viable ? 1 : 0);
      st.data.groups.push_back(records[i].participant_id);
      st.record_case.push_back(i);
    }
  }
  st.cardinality_detail = fmt("%zu extractions, every one 42/576/576/1152/90", extracted);
  if (!st.cardinality_ok) st.cardinality_detail = fmt("%zu extractions, some family sizes differ from 42/576/576/1152/90", extracted);
  return st;
}

double column(const FeatureRecord& r, const std::string& name) {
  const FeatureBlock& b = r.block(Family::Temporal);
  for (std::size_t i = 0; i < b.names.size(); ++i) {
    if (b.names[i] == name) return b.values[i];
  }
  fail(ErrorCode::MissingFamily, "no column " + name);
}

// Logistic regression by Newton's method (with a small ridge) on two
// handcrafted nodule-vs-surround contrasts.
double logistic_oracle_auc(const LabelledRecords& data, const std::vector<std::string>& train_ids,
                           const std::vector<std::string>& test_ids) {
  auto contrasts = [&](const FeatureRecord& r) {
    return Eigen::Vector3d(1.0, column(r, "temporal.win20.mean.auc") - column(r, "temporal.roi.mean.auc"),
                           column(r, "temporal.win20.mean.slope") - column(r, "temporal.roi.mean.slope"));
  };
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.records.size(); ++i) index[record_key(data.records[i])] = i;

  std::vector<Eigen::Vector3d> xs;
  std::vector<int> ys;
  for (const auto& id : train_ids) {
    xs.push_back(contrasts(data.records[index.at(id)]));
    ys.push_back(data.labels[index.at(id)]);
  }
  // Standardize the two contrasts on the training rows.
  Eigen::Vector3d mu = Eigen::Vector3d::Zero(), sd = Eigen::Vector3d::Ones();
  for (int k = 1; k < 3; ++k) {
    double m = 0, v = 0;
    for (const auto& x : xs) m += x(k);
    m /= static_cast<double>(xs.size());
    for (const auto& x : xs) v += (x(k) - m) * (x(k) - m);
    mu(k) = m;
    sd(k) = std::sqrt(v / static_cast<double>(xs.size() - 1)) + 1e-12;
  }
  auto scaled = [&](Eigen::Vector3d x) { return Eigen::Vector3d((x - mu).cwiseQuotient(sd)); };
  Eigen::Vector3d beta = Eigen::Vector3d::Zero();
  for (int it = 0; it < 50; ++it) {
    Eigen::Vector3d g = -1e-3 * beta;
    Eigen::Matrix3d H = 1e-3 * Eigen::Matrix3d::Identity();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Eigen::Vector3d x = scaled(xs[i]);
      x(0) = 1.0;
      const double p = 1.0 / (1.0 + std::exp(-beta.dot(x)));
      g += (ys[i] - p) * x;
      H += p * (1 - p) * x * x.transpose();
    }
    beta += H.ldlt().solve(g);
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& id : test_ids) {
    Eigen::Vector3d x = scaled(contrasts(data.records[index.at(id)]));
    x(0) = 1.0;
    scores.push_back(beta.dot(x));
    labels.push_back(data.labels[index.at(id)]);
  }
  return auc(scores, labels);
}

void pca_criterion(const Study& st, const SplitPlan& split) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < st.data.records.size(); ++i) index[record_key(st.data.records[i])] = i;
  std::vector<FeatureRecord> train;
  for (const auto& id : split.train) train.push_back(st.data.records[index.at(id)]);

  bool ok = true;
  std::ostringstream detail;
  for (Family f : kFamilies) {
    const Eigen::MatrixXd X = family_matrix(train, f);
    const PcaModel pca = fit_pca(X, 0.95, f);
    const double kept = pca.kept_variance();
    const double ortho = (pca.components * pca.components.transpose() - Eigen::MatrixXd::Identity(pca.k(), pca.k()))
                             .cwiseAbs()
                             .maxCoeff();
    // Oracle for the discarded variance: the trace of the correlation matrix
    // (one per retained column) minus the kept eigenvalues.
    const Eigen::MatrixXd Z = pca.standardize(X);
    const double residual = (Z - pca.reconstruct(pca.transform(X))).squaredNorm();
    double kept_sum = 0.0;
    for (int i = 0; i < pca.k(); ++i) kept_sum += pca.eigenvalues[static_cast<std::size_t>(i)];
    const double expected = static_cast<double>(X.rows() - 1) *
                            (static_cast<double>(pca.kept_columns.size()) - kept_sum);
    const double rel = std::abs(residual - expected) / std::max(1.0, Z.squaredNorm());
    const bool fam_ok = kept >= 0.95 && ortho <= 1e-8 && rel <= 1e-6;
    ok = ok && fam_ok;
    detail << to_string(f) << ": k=" << pca.k() << " kept " << fmt("%.4f", kept) << " ortho " << fmt("%.1e", ortho)
           << " recon " << fmt("%.1e", rel) << "; ";
  }
  report(ok, "pca", detail.str() + "(kept>=0.95, ortho<=1e-8, recon<=1e-6)");
}

void end_to_end_criteria() {
  const auto t0 = Clock::now();
  const Study st = run_study(study_specs(60, 0.5, 1));
  report(st.cardinality_ok, "feature_cardinality", st.cardinality_detail);

  TrainOptions options;
  const TrainStudyResult trained = train_on_records(st.data, "32:8:20", 1, options);
  const StudyReport held_out = evaluate_on_records(st.data, trained.bundle);
  const ReportRow& ens = held_out.rows.back();
  const double elapsed = seconds_since(t0);
  report(ens.auc >= 0.90 && ens.specificity >= 0.90 && elapsed < 600.0, "end_to_end_study",
         fmt("60 cases, seed 1, train 32 / validation 8 / held-out %zu: ensemble AUC %.3f (>=0.90), sensitivity "
             "%.3f, specificity %.3f (>=0.90); %.0f s (limit 600 s)",
             held_out.cases, ens.auc, ens.sensitivity, ens.specificity, elapsed));

  std::vector<std::string> fit_ids = trained.split.train;
  fit_ids.insert(fit_ids.end(), trained.split.validation.begin(), trained.split.validation.end());
  const double oracle = logistic_oracle_auc(st.data, fit_ids, trained.split.test);
  report(oracle >= 0.85, "learnability_oracle",
         fmt("logistic regression on two nodule-vs-ROI contrasts, held-out AUC %.3f (>=0.85)", oracle));

  pca_criterion(st, trained.split);
}

// ---------------------------------------------------------------------------
// Determinism: file-based study run twice from scratch

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    const bool tracked = name.rfind("features", 0) == 0 || e.path().parent_path().filename() == "model" ||
                         name.rfind("report", 0) == 0;
    if (!tracked) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return files;
}

std::map<std::string, std::string> file_pipeline(const fs::path& root) {
  fs::remove_all(root);
  PhantomSpec base;
  base.width = 160;
  base.height = 120;
  generate_study(root / "study", 10, 0.5, 5, base);
  const LabelledRecords data = collect_study(root / "study", worker_count());
  TrainOptions options;
  options.forest.trees = 10;
  const TrainStudyResult trained = train_on_records(data, "80:20", 5, options);
  save_bundle(trained.bundle, root / "model");
  std::ofstream(root / "report.json", std::ios::binary) << report_json(trained.validation_report);
  std::ofstream(root / "report.md", std::ios::binary) << report_markdown(trained.validation_report);
  return snapshot(root);
}

void determinism_criterion() {
  const fs::path tmp = fs::temp_directory_path() / ("thermoviab-acceptance-" + std::to_string(::getpid()));
  const auto first = file_pipeline(tmp / "a");
  const auto second = file_pipeline(tmp / "b");
  std::size_t differing = 0, features = 0, model = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) ++differing;
    if (name.find("features") != std::string::npos) ++features;
    if (name.rfind("model", 0) == 0) ++model;
  }
  if (second.size() != first.size()) ++differing;
  fs::remove_all(tmp);
  report(differing == 0 && features > 0 && model > 0, "determinism",
         fmt("two runs from scratch: %zu files compared (%zu feature CSVs, %zu bundle files, 2 reports), %zu differ",
             first.size(), features, model, differing));
}

}  // namespace

int main() {
  criterion("glcm_oracle", glcm_criterion);
  criterion("ecc_recovery", ecc_criterion);
  criterion("segmenter_training", segmenter_criterion);
  criterion("classical_segmentation", classical_segmentation_criterion);
  criterion("ensemble_votes", ensemble_criterion);
  criterion("metrics_oracles", metrics_criterion);
  criterion("end_to_end_study", end_to_end_criteria);
  criterion("determinism", determinism_criterion);
  std::printf("%s: %d failing criteria\n", g_failures ? "FAILED" : "ALL PASSED", g_failures);
  return g_failures ? 1 : 0;
}
