// Command-line front end: one subcommand per pipeline stage, operating on
// case directories. Exit codes: 0 ok, 1 usage, 2 review required, 3 data
// error, 4 model error. Errors go to stderr as one JSON object.

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "thermoviab/error.hpp"
#include "thermoviab/gateway.hpp"
#include "thermoviab/phantom.hpp"
#include "thermoviab/pipeline.hpp"

namespace tv = thermoviab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitReview = 2;
constexpr int kExitData = 3;
constexpr int kExitModel = 4;

int report_error(std::string_view code, const std::string& message, int exit_code) {
  std::cerr << json{{"error", code}, {"message", message}, {"exit_code", exit_code}}.dump() << "\n";
  return exit_code;
}

int exit_code_for(tv::ErrorCode code) {
  switch (code) {
    case tv::ErrorCode::InvalidSpec: return kExitUsage;
    case tv::ErrorCode::ModelFormat:
    case tv::ErrorCode::MissingFamily: return kExitModel;
    default: return kExitData;
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("THERMOVIAB_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      tv::fail(tv::ErrorCode::InvalidSpec, std::string("THERMOVIAB_SEED is not an integer: ") + env);
    }
  }
  return 1;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) tv::fail(tv::ErrorCode::IoFailure, "cannot write " + path.string());
}

tv::WarpKind parse_warp(const std::string& text) {
  if (text == "translation") return tv::WarpKind::Translation;
  if (text == "euclidean") return tv::WarpKind::Euclidean;
  if (text == "affine") return tv::WarpKind::Affine;
  tv::fail(tv::ErrorCode::InvalidSpec, "unknown warp '" + text + "'");
}

// Case directories named by --case, or every case under --data.
std::vector<fs::path> targets(const std::vector<std::string>& cases, const std::string& data) {
  std::vector<fs::path> out(cases.begin(), cases.end());
  if (!data.empty()) {
    const auto listed = tv::list_cases(data);
    out.insert(out.end(), listed.begin(), listed.end());
  }
  if (out.empty()) tv::fail(tv::ErrorCode::InvalidSpec, "give --case or --data");
  return out;
}

void write_report(const tv::StudyReport& report, const fs::path& path) {
  if (path.extension() == ".json") {
    write_file(path, tv::report_json(report));
    write_file(fs::path(path).replace_extension(".md"), tv::report_markdown(report));
  } else {
    write_file(path, tv::report_markdown(report));
    write_file(fs::path(path).replace_extension(".json"), tv::report_json(report));
  }
}

tv::Gateway* g_gateway = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Thermal-video viability pipeline"};
  app.require_subcommand(1);
  int jobs = 1;
  app.add_option("--jobs", jobs, "Cases processed in parallel")->check(CLI::PositiveNumber);

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic study");
  std::string phantom_out;
  int phantom_cases = 60;
  double viable_frac = 0.5;
  std::optional<std::uint64_t> seed_flag;
  tv::PhantomSpec base;
  phantom->add_option("--out", phantom_out, "Output directory")->required();
  phantom->add_option("--cases", phantom_cases, "Number of cases")->check(CLI::PositiveNumber);
  phantom->add_option("--viable-frac", viable_frac, "Fraction of viable cases")->check(CLI::Range(0.0, 1.0));
  phantom->add_option("--seed", seed_flag, "Seed (falls back to THERMOVIAB_SEED)");
  phantom->add_option("--jitter", base.jitter, "Per-frame translation amplitude (px)");
  phantom->add_option("--noise", base.noise_sigma, "Sensor noise sigma (deg C)");
  phantom->add_option("--width", base.width, "Frame width (px); geometry scales with the frame");
  phantom->add_option("--height", base.height, "Frame height (px)");

  // align
  auto* align = app.add_subcommand("align", "Stabilize frames against frame 0");
  std::vector<std::string> case_dirs;
  std::string data_dir;
  std::string warp = "euclidean";
  std::string precool_warp = "affine";
  double review_rho = 0.9;
  align->add_option("--case", case_dirs, "Case directory (repeatable)");
  align->add_option("--data", data_dir, "Process every case under this directory");
  align->add_option("--warp", warp, "Frame warp: translation|euclidean|affine");
  align->add_option("--precool-warp", precool_warp, "Precool warp: translation|euclidean|affine");
  align->add_option("--review-rho", review_rho, "Correlation below which a case needs review");

  // segment
  auto* segment = app.add_subcommand("segment", "Segment the cooled region of frame 0");
  std::string segmenter = "otsu";
  std::string model_path;
  segment->add_option("--case", case_dirs, "Case directory (repeatable)");
  segment->add_option("--data", data_dir, "Process every case under this directory");
  segment->add_option("--segmenter", segmenter, "otsu|net|manual");
  segment->add_option("--model", model_path, "Segmenter checkpoint for --segmenter net");

  // segmenter training
  auto* seg_train = app.add_subcommand("train-segmenter", "Train the learned segmenter on roi.pgm / phantom masks");
  std::string out_path;
  tv::TrainConfig net_cfg;
  seg_train->add_option("--data", data_dir, "Study directory")->required();
  seg_train->add_option("--out", out_path, "Checkpoint path")->required();
  seg_train->add_option("--epochs", net_cfg.epochs, "Epochs");
  seg_train->add_option("--lr", net_cfg.learning_rate, "Adam learning rate");
  seg_train->add_option("--batch", net_cfg.batch_size, "Mini-batch size");
  seg_train->add_option("--seed", seed_flag, "Seed (falls back to THERMOVIAB_SEED)");

  // features
  auto* features = app.add_subcommand("features", "Extract the five feature families");
  std::string features_out;
  features->add_option("--case", case_dirs, "Case directory (repeatable)");
  features->add_option("--data", data_dir, "Process every case under this directory");
  features->add_option("--out", features_out, "Also write the combined CSV here");

  // train
  auto* train = app.add_subcommand("train", "Fit the five family classifiers and calibrate thresholds");
  std::string split = "80:20";
  bool group_aware = false;
  tv::TrainOptions train_opts;
  std::string report_path;
  train->add_option("--data", data_dir, "Study directory")->required();
  train->add_option("--split", split, "train:validation[:test] ratio");
  train->add_option("--seed", seed_flag, "Seed (falls back to THERMOVIAB_SEED)");
  train->add_option("--out", out_path, "Model bundle directory")->required();
  train->add_option("--report", report_path, "Validation report path (.md or .json)");
  train->add_flag("--group-aware", group_aware, "Keep each participant in one fold");
  train->add_option("--trees", train_opts.forest.trees, "Trees per forest");
  train->add_option("--max-depth", train_opts.forest.max_depth, "Tree depth limit");
  train->add_option("--variance", train_opts.variance_target, "PCA kept-variance target");
  train->add_option("--spec-target", train_opts.specificity_target, "Operating-point specificity target");
  train->add_option("--sens-target", train_opts.sensitivity_target, "Operating-point sensitivity target");
  train->add_option("--votes", train_opts.vote_threshold, "Votes needed for a viable label");

  // predict
  auto* predict = app.add_subcommand("predict", "Classify the nodules of one case");
  predict->add_option("--case", case_dirs, "Case directory")->required();
  predict->add_option("--model", model_path, "Model bundle directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a bundle on held-out cases");
  eval->add_option("--data", data_dir, "Study directory")->required();
  eval->add_option("--model", model_path, "Model bundle directory")->required();
  eval->add_option("--report", report_path, "Report path (.md or .json)");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP gateway for the review UI");
  int port = 8080;
  std::string host = "127.0.0.1";
  std::string static_dir;
  serve->add_option("--data", data_dir, "Study directory")->required();
  serve->add_option("--model", model_path, "Model bundle directory");
  serve->add_option("--port", port, "Port");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--static", static_dir, "Built review UI to serve under /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return report_error("Usage", e.what(), kExitUsage);
  }

  try {
    if (*phantom) {
      const auto ids = tv::generate_study(phantom_out, phantom_cases, viable_frac, resolve_seed(seed_flag), base);
      std::cout << json{{"cases", ids.size()}, {"out", phantom_out}}.dump() << "\n";
      return 0;
    }

    if (*align) {
      tv::AlignConfig cfg;
      cfg.frame_kind = parse_warp(warp);
      cfg.precool_kind = parse_warp(precool_warp);
      cfg.review_rho = review_rho;
      const auto dirs = targets(case_dirs, data_dir);
      std::vector<tv::Stabilization> results(dirs.size());
      tv::parallel_for(dirs.size(), jobs, [&](std::size_t i) { results[i] = tv::align_case(dirs[i], cfg); });
      bool review = false;
      for (std::size_t i = 0; i < dirs.size(); ++i) {
        std::cout << json{{"case", dirs[i].string()},
                          {"min_rho", results[i].min_rho()},
                          {"review_required", results[i].review_required}}
                         .dump()
                  << "\n";
        review = review || results[i].review_required;
      }
      if (review) return report_error("ReviewRequired", "frame correlation below the review threshold", kExitReview);
      return 0;
    }

    if (*segment) {
      const tv::SegmenterKind kind = tv::parse_segmenter(segmenter);
      std::optional<fs::path> checkpoint;
      if (!model_path.empty()) checkpoint = model_path;
      const auto dirs = targets(case_dirs, data_dir);
      std::vector<std::size_t> pixels(dirs.size());
      tv::parallel_for(dirs.size(), jobs,
                       [&](std::size_t i) { pixels[i] = tv::segment_case(dirs[i], kind, checkpoint).count(); });
      for (std::size_t i = 0; i < dirs.size(); ++i) {
        std::cout << json{{"case", dirs[i].string()}, {"roi_pixels", pixels[i]}}.dump() << "\n";
      }
      return 0;
    }

    if (*seg_train) {
      net_cfg.seed = resolve_seed(seed_flag);
      std::vector<tv::TrainSample> samples;
      for (const auto& dir : tv::list_cases(data_dir)) {
        tv::RoiMask mask;
        if (fs::exists(dir / std::string(tv::kRoiFile))) {
          mask = tv::read_pgm(dir / std::string(tv::kRoiFile));
        } else if (fs::exists(dir / "truth.json")) {
          mask = tv::read_truth(dir).mask;
        } else {
          continue;
        }
        samples.push_back({tv::decimate_to_1hz(tv::read_case(dir).sequence).frames.front(), mask});
      }
      std::vector<double> losses;
      const tv::SegmenterNet net = tv::train_segmenter(samples, net_cfg, &losses);
      tv::save_segmenter(net, net_cfg, out_path);
      std::cout << json{{"samples", samples.size()}, {"final_loss", losses.empty() ? 0.0 : losses.back()}}.dump()
                << "\n";
      return 0;
    }

    if (*features) {
      const auto dirs = targets(case_dirs, data_dir);
      std::vector<std::vector<tv::FeatureRecord>> per_case(dirs.size());
      tv::parallel_for(dirs.size(), jobs, [&](std::size_t i) { per_case[i] = tv::features_case(dirs[i]); });
      std::vector<tv::FeatureRecord> all;
      for (auto& recs : per_case) all.insert(all.end(), recs.begin(), recs.end());
      if (!features_out.empty()) write_file(features_out, tv::features_to_csv(all, std::nullopt));
      std::cout << json{{"records", all.size()}, {"columns", all.empty() ? 0 : 2436}}.dump() << "\n";
      return 0;
    }

    if (*train) {
      train_opts.validate();
      const std::uint64_t seed = resolve_seed(seed_flag);
      const tv::LabelledRecords data = tv::collect_study(data_dir, jobs);
      const tv::TrainStudyResult result = tv::train_on_records(data, split, seed, train_opts, group_aware);
      tv::save_bundle(result.bundle, out_path);
      write_file(fs::path(out_path) / "validation_report.json", tv::report_json(result.validation_report));
      write_file(fs::path(out_path) / "validation_report.md", tv::report_markdown(result.validation_report));
      if (!report_path.empty()) write_report(result.validation_report, report_path);
      std::cout << tv::report_markdown(result.validation_report);
      return 0;
    }

    if (*predict) {
      if (case_dirs.size() != 1) tv::fail(tv::ErrorCode::InvalidSpec, "predict takes exactly one --case");
      const fs::path dir = case_dirs.front();
      const tv::CaseStatus status = tv::case_status(dir);
      // roi.pgm cannot exist without warps, so its absence is the first thing to report.
      if (status.stage < tv::Stage::Segmented) tv::fail(tv::ErrorCode::StageOrder, "segmentation missing");
      const tv::ModelBundle bundle = tv::load_bundle(model_path);
      tv::predict_case(dir, bundle);
      std::ifstream in(dir / std::string(tv::kPredictionFile));
      std::cout << in.rdbuf();
      return 0;
    }

    if (*eval) {
      const tv::ModelBundle bundle = tv::load_bundle(model_path);
      const tv::LabelledRecords data = tv::collect_study(data_dir, jobs);
      const tv::StudyReport report = tv::evaluate_on_records(data, bundle);
      if (!report_path.empty()) write_report(report, report_path);
      std::cout << tv::report_markdown(report);
      return 0;
    }

    if (*serve) {
      tv::GatewayConfig cfg;
      cfg.data_root = data_dir;
      if (!model_path.empty()) cfg.model_dir = model_path;
      if (!static_dir.empty()) cfg.static_dir = static_dir;
      tv::Gateway gateway(cfg);
      g_gateway = &gateway;
      std::signal(SIGINT, [](int) {
        if (g_gateway) g_gateway->stop();
      });
      std::cerr << "serving " << data_dir << " on http://" << host << ":" << port << "\n";
      gateway.run(host, port);
      g_gateway = nullptr;
      return 0;
    }
  } catch (const tv::Error& e) {
    return report_error(tv::to_string(e.code()), e.what(), exit_code_for(e.code()));
  } catch (const std::exception& e) {
    return report_error("Internal", e.what(), kExitData);
  }
  return kExitUsage;
}
