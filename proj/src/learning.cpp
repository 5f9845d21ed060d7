#include "thermoviab/learning.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>

#include <json.hpp>

#include "thermoviab/error.hpp"
#include "thermoviab/rng.hpp"

namespace thermoviab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PCA

double PcaModel::kept_variance() const {
  double total = 0.0;
  double kept = 0.0;
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    total += eigenvalues[i];
    if (static_cast<int>(i) < k()) kept += eigenvalues[i];
  }
  return total > 0.0 ? kept / total : 0.0;
}

Eigen::MatrixXd PcaModel::standardize(const Eigen::MatrixXd& X) const {
  if (static_cast<std::size_t>(X.cols()) != mean.size()) {
    fail(ErrorCode::DimensionMismatch, "PCA input has " + std::to_string(X.cols()) + " columns, model expects " +
                                           std::to_string(mean.size()));
  }
  Eigen::MatrixXd Z(X.rows(), static_cast<Eigen::Index>(kept_columns.size()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (std::size_t j = 0; j < kept_columns.size(); ++j) {
      const std::size_t c = kept_columns[j];
      Z(r, static_cast<Eigen::Index>(j)) = (X(r, static_cast<Eigen::Index>(c)) - mean[c]) / scale[c];
    }
  }
  return Z;
}

Eigen::MatrixXd PcaModel::transform(const Eigen::MatrixXd& X) const { return standardize(X) * components.transpose(); }

Eigen::MatrixXd PcaModel::reconstruct(const Eigen::MatrixXd& scores) const { return scores * components; }

PcaModel fit_pca(const Eigen::MatrixXd& X, double variance_target, Family family) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (n < 2) fail(ErrorCode::DegenerateData, "PCA needs at least two samples");
  if (!(variance_target > 0.0 && variance_target <= 1.0)) fail(ErrorCode::InvalidSpec, "variance target outside (0, 1]");

  PcaModel model;
  model.family = family;
  model.variance_target = variance_target;
  model.mean.assign(static_cast<std::size_t>(d), 0.0);
  model.scale.assign(static_cast<std::size_t>(d), 1.0);
  for (Eigen::Index c = 0; c < d; ++c) {
    const double m = X.col(c).mean();
    double var = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) var += (X(r, c) - m) * (X(r, c) - m);
    var /= static_cast<double>(n - 1);
    model.mean[static_cast<std::size_t>(c)] = m;
    // Variance at the level of rounding noise counts as constant.
    if (var > 1e-24 * std::max(1.0, m * m)) {
      model.scale[static_cast<std::size_t>(c)] = std::sqrt(var);
      model.kept_columns.push_back(static_cast<std::size_t>(c));
    }
  }
  if (model.kept_columns.empty()) fail(ErrorCode::DegenerateData, "every feature column is constant");

  const Eigen::MatrixXd Z = model.standardize(X);
  const Eigen::Index m = Z.cols();
  const double denom = static_cast<double>(n - 1);
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;  // columns = unit eigenvectors in the kept-column space
  if (m <= n) {
    const Eigen::MatrixXd C = (Z.transpose() * Z) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(C);
    values = solver.eigenvalues().reverse();
    vectors = solver.eigenvectors().rowwise().reverse();
  } else {
    // Gram trick: eigenvectors of Z Z^T map to those of Z^T Z.
    const Eigen::MatrixXd G = (Z * Z.transpose()) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(G);
    values = solver.eigenvalues().reverse();
    const Eigen::MatrixXd U = solver.eigenvectors().rowwise().reverse();
    vectors = Eigen::MatrixXd::Zero(m, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (values(i) > 0.0) vectors.col(i) = Z.transpose() * U.col(i) / std::sqrt(denom * values(i));
    }
  }

  double total = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = std::max(values(i), 0.0);
    model.eigenvalues.push_back(v);
    total += v;
  }
  for (double v : model.eigenvalues) model.explained_ratio.push_back(v / total);

  int k = 0;
  double cumulative = 0.0;
  while (k < static_cast<int>(model.eigenvalues.size())) {
    cumulative += model.explained_ratio[static_cast<std::size_t>(k)];
    ++k;
    if (cumulative >= variance_target - 1e-12) break;
  }
  model.components.resize(k, m);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd v = vectors.col(i);
    v.normalize();
    // Sign convention: the largest-magnitude entry is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    model.components.row(i) = v.transpose();
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forest

const TreeNode& DecisionTree::leaf_for(const double* x) const {
  const TreeNode* node = &nodes.front();
  while (node->feature >= 0) node = &nodes[static_cast<std::size_t>(x[node->feature] <= node->threshold ? node->left : node->right)];
  return *node;
}

int DecisionTree::depth() const {
  std::vector<int> depth(nodes.size(), 0);
  int deepest = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    deepest = std::max(deepest, depth[i]);
    if (nodes[i].feature >= 0) {
      depth[static_cast<std::size_t>(nodes[i].left)] = depth[i] + 1;
      depth[static_cast<std::size_t>(nodes[i].right)] = depth[i] + 1;
    }
  }
  return deepest;
}

double ForestModel::predict_proba(const double* x) const {
  if (trees.empty()) return 0.0;
  int votes = 0;
  for (const auto& tree : trees) votes += tree.leaf_for(x).p_viable > 0.5;
  return static_cast<double>(votes) / static_cast<double>(trees.size());
}

std::vector<double> ForestModel::predict_proba(const Eigen::MatrixXd& Z) const {
  std::vector<double> out;
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = Z;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) out.push_back(predict_proba(rows.row(r).data()));
  return out;
}

namespace {

double gini(double pos, double total) {
  if (total <= 0.0) return 0.0;
  const double p = pos / total;
  return 2.0 * p * (1.0 - p);
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double impurity = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& Z, const std::vector<int>& y, int max_depth, Rng& rng)
      : Z_(Z), y_(y), max_depth_(max_depth), rng_(rng) {
    mtry_ = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(Z.cols())))));
  }

  DecisionTree build(const std::vector<int>& samples) {
    tree_.nodes.clear();
    grow(samples, 0);
    return tree_;
  }

 private:
  int grow(const std::vector<int>& samples, int depth) {
    const int index = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back({});
    double pos = 0.0;
    for (int s : samples) pos += y_[static_cast<std::size_t>(s)];
    const double total = static_cast<double>(samples.size());
    tree_.nodes[static_cast<std::size_t>(index)].p_viable = total > 0.0 ? pos / total : 0.0;
    if (depth >= max_depth_ || pos == 0.0 || pos == total || samples.size() < 2) return index;

    const SplitChoice split = best_split(samples, gini(pos, total));
    if (split.feature < 0) return index;
    std::vector<int> left;
    std::vector<int> right;
    for (int s : samples) (Z_(s, split.feature) <= split.threshold ? left : right).push_back(s);
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    TreeNode& node = tree_.nodes[static_cast<std::size_t>(index)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return index;
  }

  SplitChoice best_split(const std::vector<int>& samples, double parent_impurity) {
    // Candidate features: mtry distinct columns, partial Fisher-Yates.
    std::vector<int> features(static_cast<std::size_t>(Z_.cols()));
    std::iota(features.begin(), features.end(), 0);
    const int take = std::min<int>(mtry_, static_cast<int>(features.size()));
    for (int i = 0; i < take; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng_.below(features.size() - static_cast<std::size_t>(i));
      std::swap(features[static_cast<std::size_t>(i)], features[j]);
    }
    SplitChoice best;
    best.impurity = parent_impurity - 1e-12;  // a split must strictly improve
    const double total = static_cast<double>(samples.size());
    double total_pos = 0.0;
    for (int s : samples) total_pos += y_[static_cast<std::size_t>(s)];

    std::vector<std::pair<double, int>> column(samples.size());
    for (int fi = 0; fi < take; ++fi) {
      const int f = features[static_cast<std::size_t>(fi)];
      for (std::size_t i = 0; i < samples.size(); ++i) {
        column[i] = {Z_(samples[i], f), y_[static_cast<std::size_t>(samples[i])]};
      }
      std::sort(column.begin(), column.end());
      double left_pos = 0.0;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        left_pos += column[i].second;
        if (column[i].first == column[i + 1].first) continue;
        const double nl = static_cast<double>(i + 1);
        const double nr = total - nl;
        const double impurity = (nl * gini(left_pos, nl) + nr * gini(total_pos - left_pos, nr)) / total;
        if (impurity < best.impurity) {
          best.feature = f;
          best.threshold = 0.5 * (column[i].first + column[i + 1].first);
          best.impurity = impurity;
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& Z_;
  const std::vector<int>& y_;
  int max_depth_;
  Rng& rng_;
  int mtry_ = 1;
  DecisionTree tree_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

ForestModel fit_forest(const Eigen::MatrixXd& Z, const std::vector<int>& y, const ForestConfig& cfg) {
  if (static_cast<std::size_t>(Z.rows()) != y.size()) fail(ErrorCode::DimensionMismatch, "label count differs from rows");
  if (y.size() < 4) fail(ErrorCode::TooFewSamples, "forest needs at least 4 samples");
  const auto positives = std::count(y.begin(), y.end(), 1);
  if (positives == 0 || positives == static_cast<long>(y.size())) fail(ErrorCode::SingleClass, "forest needs both classes");
  if (cfg.trees <= 0 || cfg.max_depth <= 0) fail(ErrorCode::InvalidSpec, "forest needs positive tree count and depth");

  ForestModel model;
  model.seed = cfg.seed;
  model.max_depth = cfg.max_depth;
  const auto n = static_cast<std::uint64_t>(y.size());
  for (int t = 0; t < cfg.trees; ++t) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(t)));
    std::vector<int> bootstrap(y.size());
    for (int& s : bootstrap) s = static_cast<int>(rng.below(n));
    TreeBuilder builder(Z, y, cfg.max_depth, rng);
    model.trees.push_back(builder.build(bootstrap));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Operating point

OperatingPoint calibrate_threshold(const std::vector<double>& p, const std::vector<int>& y, double specificity_target,
                                   double sensitivity_target) {
  if (p.size() != y.size()) fail(ErrorCode::DimensionMismatch, "score count differs from label count");
  const auto P = std::count(y.begin(), y.end(), 1);
  const auto N = static_cast<long>(y.size()) - P;
  if (P == 0 || N == 0) fail(ErrorCode::SingleClass, "calibration needs both classes");

  std::vector<double> sorted = p;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates{sorted.front()};
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));

  auto evaluate = [&](double tau) {
    long tp = 0;
    long tn = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const bool positive = p[i] >= tau;
      tp += positive && y[i] == 1;
      tn += !positive && y[i] == 0;
    }
    return OperatingPoint{tau, static_cast<double>(tp) / static_cast<double>(P),
                          static_cast<double>(tn) / static_cast<double>(N), false};
  };
  // Lexicographic preference; later candidates have larger tau, so ">=" on
  // a full tie keeps the larger threshold.
  auto better = [](const OperatingPoint& a, const OperatingPoint& b, bool sensitivity_first) {
    const std::array<double, 2> ka = sensitivity_first ? std::array{a.sensitivity, a.specificity}
                                                       : std::array{a.specificity, a.sensitivity};
    const std::array<double, 2> kb = sensitivity_first ? std::array{b.sensitivity, b.specificity}
                                                       : std::array{b.specificity, b.sensitivity};
    return ka >= kb;
  };

  std::optional<OperatingPoint> primary;
  std::optional<OperatingPoint> fallback;
  for (double tau : candidates) {
    const OperatingPoint op = evaluate(tau);
    if (op.specificity > specificity_target && op.sensitivity > sensitivity_target) {
      if (!primary || better(op, *primary, true)) primary = op;
    }
    if (op.sensitivity > 0.0) {
      if (!fallback || better(op, *fallback, false)) fallback = op;
    }
  }
  if (primary) return *primary;
  OperatingPoint op = *fallback;  // the smallest candidate always has sensitivity 1
  op.low_quality = true;
  return op;
}

Label ensemble_label(const std::array<int, 5>& votes, int vote_threshold) {
  int F = 0;
  for (int v : votes) F += v != 0;
  return F >= vote_threshold ? Label::Viable : Label::Nonviable;
}

ClassificationOutcome combine(const std::array<double, 5>& p, const std::array<double, 5>& tau, int vote_threshold) {
  ClassificationOutcome out;
  out.p = p;
  for (std::size_t i = 0; i < 5; ++i) {
    out.votes[i] = p[i] >= tau[i] ? 1 : 0;
    out.F += out.votes[i];
  }
  out.label = ensemble_label(out.votes, vote_threshold);
  return out;
}

// ---------------------------------------------------------------------------
// Bundle

void TrainOptions::validate() const {
  if (vote_threshold < 1 || vote_threshold > 5) fail(ErrorCode::InvalidSpec, "vote threshold must be in 1..5");
  if (!(specificity_target > 0.0 && specificity_target < 1.0) ||
      !(sensitivity_target > 0.0 && sensitivity_target < 1.0)) {
    fail(ErrorCode::InvalidSpec, "operating-point targets must lie in (0, 1)");
  }
  if (!(variance_target > 0.0 && variance_target <= 1.0)) fail(ErrorCode::InvalidSpec, "variance target outside (0, 1]");
}

Eigen::MatrixXd family_matrix(const std::vector<FeatureRecord>& records, Family family) {
  const std::size_t d = family_size(family);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& values = records[r].block(family).values;
    if (values.size() != d) {
      fail(ErrorCode::MissingFamily, records[r].case_id + "/" + records[r].nodule_id + " lacks " +
                                         std::string(to_string(family)) + " features");
    }
    for (std::size_t c = 0; c < d; ++c) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[c];
  }
  return X;
}

ModelBundle train_bundle(const std::vector<FeatureRecord>& train, const std::vector<int>& train_labels,
                         const std::vector<FeatureRecord>& validation, const std::vector<int>& validation_labels,
                         const TrainOptions& options) {
  options.validate();
  ModelBundle bundle;
  bundle.vote_threshold = options.vote_threshold;
  bundle.seed = options.forest.seed;
  bundle.variance_target = options.variance_target;
  bundle.specificity_target = options.specificity_target;
  bundle.sensitivity_target = options.sensitivity_target;
  for (std::size_t i = 0; i < kFamilies.size(); ++i) {
    const Family family = kFamilies[i];
    FamilyModel& member = bundle.members[i];
    member.family = family;
    try {
      member.pca = fit_pca(family_matrix(train, family), options.variance_target, family);
      ForestConfig fc = options.forest;
      fc.seed = mix_seed(options.forest.seed, 1000 + i);
      member.forest = fit_forest(member.pca.transform(family_matrix(train, family)), train_labels, fc);
      const auto p = member.forest.predict_proba(member.pca.transform(family_matrix(validation, family)));
      member.op = calibrate_threshold(p, validation_labels, options.specificity_target, options.sensitivity_target);
    } catch (const Error& e) {
      fail(e.code(), std::string(to_string(family)) + ": " + e.what());
    }
  }
  return bundle;
}

std::array<double, 5> family_probabilities(const ModelBundle& bundle, const FeatureRecord& record) {
  std::array<double, 5> p{};
  for (std::size_t i = 0; i < 5; ++i) {
    const FamilyModel& member = bundle.members[i];
    const Eigen::MatrixXd Z = member.pca.transform(family_matrix({record}, member.family));
    p[i] = member.forest.predict_proba(Z)[0];
  }
  return p;
}

ClassificationOutcome predict(const ModelBundle& bundle, const FeatureRecord& record) {
  std::array<double, 5> tau{};
  for (std::size_t i = 0; i < 5; ++i) tau[i] = bundle.members[i].op.tau;
  return combine(family_probabilities(bundle, record), tau, bundle.vote_threshold);
}

namespace {

constexpr char kPcaMagic[8] = {'T', 'V', 'P', 'C', 'A', '0', '0', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorCode::ModelFormat, "truncated PCA tensor file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::ModelFormat, "missing bundle file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
}

std::string pca_to_bytes(const PcaModel& pca) {
  json header = {{"family", to_string(pca.family)},
                 {"columns", pca.mean.size()},
                 {"kept_columns", pca.kept_columns},
                 {"components", pca.k()},
                 {"eigenvalues", pca.eigenvalues.size()},
                 {"variance_target", pca.variance_target}};
  const std::string text = header.dump();
  std::string out(kPcaMagic, sizeof(kPcaMagic));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (double v : pca.mean) put_f64(out, v);
  for (double v : pca.scale) put_f64(out, v);
  for (Eigen::Index r = 0; r < pca.components.rows(); ++r) {
    for (Eigen::Index c = 0; c < pca.components.cols(); ++c) put_f64(out, pca.components(r, c));
  }
  for (double v : pca.eigenvalues) put_f64(out, v);
  for (double v : pca.explained_ratio) put_f64(out, v);
  return out;
}

PcaModel pca_from_bytes(std::string bytes) {
  Reader in(std::move(bytes));
  if (in.take(8) != std::string(kPcaMagic, 8)) fail(ErrorCode::ModelFormat, "bad PCA tensor magic");
  const std::uint32_t len = in.u32();
  json header;
  try {
    header = json::parse(in.take(len));
  } catch (const json::exception& e) {
    fail(ErrorCode::ModelFormat, std::string("bad PCA header: ") + e.what());
  }
  PcaModel pca;
  pca.family = parse_family(header.at("family").get<std::string>());
  const auto d = header.at("columns").get<std::size_t>();
  pca.kept_columns = header.at("kept_columns").get<std::vector<std::size_t>>();
  const auto k = header.at("components").get<Eigen::Index>();
  const auto e = header.at("eigenvalues").get<std::size_t>();
  pca.variance_target = header.at("variance_target").get<double>();
  for (std::size_t c : pca.kept_columns) {
    if (c >= d) fail(ErrorCode::ModelFormat, "kept column out of range");
  }
  for (std::size_t i = 0; i < d; ++i) pca.mean.push_back(in.f64());
  for (std::size_t i = 0; i < d; ++i) pca.scale.push_back(in.f64());
  const auto m = static_cast<Eigen::Index>(pca.kept_columns.size());
  pca.components.resize(k, m);
  for (Eigen::Index r = 0; r < k; ++r) {
    for (Eigen::Index c = 0; c < m; ++c) pca.components(r, c) = in.f64();
  }
  for (std::size_t i = 0; i < e; ++i) pca.eigenvalues.push_back(in.f64());
  for (std::size_t i = 0; i < e; ++i) pca.explained_ratio.push_back(in.f64());
  if (!in.done()) fail(ErrorCode::ModelFormat, "trailing bytes in PCA tensor file");
  return pca;
}

json forest_to_json(const ForestModel& forest, Family family) {
  json trees = json::array();
  for (const auto& tree : forest.trees) {
    json nodes = json::array();
    for (const auto& n : tree.nodes) {
      nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right},
                       {"p_viable", n.p_viable}});
    }
    trees.push_back({{"nodes", nodes}});
  }
  return {{"family", to_string(family)}, {"seed", forest.seed}, {"max_depth", forest.max_depth}, {"trees", trees}};
}

ForestModel forest_from_json(const json& j) {
  ForestModel forest;
  forest.seed = j.at("seed").get<std::uint64_t>();
  forest.max_depth = j.at("max_depth").get<int>();
  for (const auto& t : j.at("trees")) {
    DecisionTree tree;
    for (const auto& n : t.at("nodes")) {
      tree.nodes.push_back({n.at("feature").get<int>(), n.at("threshold").get<double>(), n.at("left").get<int>(),
                            n.at("right").get<int>(), n.at("p_viable").get<double>()});
    }
    const auto count = static_cast<int>(tree.nodes.size());
    if (count == 0) fail(ErrorCode::ModelFormat, "empty tree");
    for (const auto& n : tree.nodes) {
      if (n.feature >= 0 && (n.left <= 0 || n.right <= 0 || n.left >= count || n.right >= count)) {
        fail(ErrorCode::ModelFormat, "tree node points outside the tree");
      }
    }
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json families = json::array();
  for (const auto& member : bundle.members) {
    const std::string name(to_string(member.family));
    std::vector<std::size_t> dropped;
    std::size_t next = 0;
    for (std::size_t c = 0; c < member.pca.mean.size(); ++c) {
      if (next < member.pca.kept_columns.size() && member.pca.kept_columns[next] == c) {
        ++next;
      } else {
        dropped.push_back(c);
      }
    }
    families.push_back({{"family", name},
                        {"tau", member.op.tau},
                        {"sensitivity", member.op.sensitivity},
                        {"specificity", member.op.specificity},
                        {"low_quality", member.op.low_quality},
                        {"components", member.pca.k()},
                        {"kept_variance", member.pca.kept_variance()},
                        {"dropped_columns", dropped},
                        {"pca_file", "pca_" + name + ".bin"},
                        {"forest_file", "forest_" + name + ".json"}});
    write_all(dir / ("pca_" + name + ".bin"), pca_to_bytes(member.pca));
    write_all(dir / ("forest_" + name + ".json"), forest_to_json(member.forest, member.family).dump(1) + "\n");
  }
  const json manifest = {{"format", "thermoviab-model-bundle"},
                         {"schema_version", ModelBundle::kSchemaVersion},
                         {"seed", bundle.seed},
                         {"vote_threshold", bundle.vote_threshold},
                         {"variance_target", bundle.variance_target},
                         {"specificity_target", bundle.specificity_target},
                         {"sensitivity_target", bundle.sensitivity_target},
                         {"split",
                          {{"train", bundle.train_ids}, {"validation", bundle.validation_ids}, {"test", bundle.test_ids}}},
                         {"families", families}};
  write_all(dir / "manifest.json", manifest.dump(2) + "\n");
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
  ModelBundle bundle;
  try {
    const json manifest = json::parse(read_all(dir / "manifest.json"));
    if (manifest.value("format", "") != "thermoviab-model-bundle") fail(ErrorCode::ModelFormat, "not a model bundle");
    if (manifest.at("schema_version").get<int>() != ModelBundle::kSchemaVersion) {
      fail(ErrorCode::ModelFormat, "unsupported bundle schema version");
    }
    bundle.seed = manifest.at("seed").get<std::uint64_t>();
    bundle.vote_threshold = manifest.at("vote_threshold").get<int>();
    bundle.variance_target = manifest.at("variance_target").get<double>();
    bundle.specificity_target = manifest.at("specificity_target").get<double>();
    bundle.sensitivity_target = manifest.at("sensitivity_target").get<double>();
    const auto& split = manifest.at("split");
    bundle.train_ids = split.at("train").get<std::vector<std::string>>();
    bundle.validation_ids = split.at("validation").get<std::vector<std::string>>();
    bundle.test_ids = split.at("test").get<std::vector<std::string>>();
    const auto& families = manifest.at("families");
    if (families.size() != 5) fail(ErrorCode::ModelFormat, "bundle must hold exactly five families");
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& f = families[i];
      FamilyModel& member = bundle.members[i];
      member.family = parse_family(f.at("family").get<std::string>());
      if (member.family != kFamilies[i]) fail(ErrorCode::ModelFormat, "bundle families out of order");
      member.op = {f.at("tau").get<double>(), f.at("sensitivity").get<double>(), f.at("specificity").get<double>(),
                   f.at("low_quality").get<bool>()};
      member.pca = pca_from_bytes(read_all(dir / f.at("pca_file").get<std::string>()));
      member.forest = forest_from_json(json::parse(read_all(dir / f.at("forest_file").get<std::string>())));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ModelFormat, std::string("malformed bundle: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ModelFormat) throw;
    fail(ErrorCode::ModelFormat, e.what());
  }
  if (bundle.vote_threshold < 1 || bundle.vote_threshold > 5) fail(ErrorCode::ModelFormat, "vote threshold outside 1..5");
  return bundle;
}

}  // namespace thermoviab
