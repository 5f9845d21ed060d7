#include <doctest.h>

#include <functional>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "support.hpp"
#include "thermoviab/error.hpp"
#include "thermoviab/phantom.hpp"
#include "thermoviab/pipeline.hpp"

using namespace thermoviab;
using tvtest::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string stage_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::StageOrder) return e.what();
    return std::string("wrong code: ") + std::string(to_string(e.code()));
  }
  return "no error";
}

PhantomCase write_small_case(const fs::path& dir, std::uint64_t seed, double jitter = 2.0, double noise = 0.04) {
  PhantomSpec s = tvtest::scaled(PhantomSpec{}, 0.5);
  s.seed = seed;
  s.jitter = jitter;
  s.noise_sigma = noise;
  PhantomCase pc = generate_case(s);
  write_phantom_case(pc, dir);
  return pc;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("stages refuse to run out of order") {
    TempDir tmp("pipe-order");
    write_small_case(tmp.path, 3);
    CHECK(case_status(tmp.path).stage == Stage::Raw);
    CHECK(stage_error([&] { features_case(tmp.path); }) == "alignment missing");
    CHECK(stage_error([&] { segment_case(tmp.path); }) == "alignment missing");
    align_case(tmp.path);
    CHECK(case_status(tmp.path).stage == Stage::Aligned);
    CHECK(stage_error([&] { features_case(tmp.path); }) == "segmentation missing");
    CHECK(stage_error([&] { predict_case(tmp.path, ModelBundle{}); }) == "segmentation missing");
  }

  TEST_CASE("full chain, idempotence and downstream invalidation") {
    TempDir tmp("pipe-chain");
    const PhantomCase pc = write_small_case(tmp.path, 4);
    const Stabilization stab = align_case(tmp.path);
    const std::string warps = slurp(tmp.path / "warps.jsonl");
    const auto aligned = nlohmann::json::parse(slurp(tmp.path / "aligned.json"));
    CHECK(aligned.at("frame_rho").size() == 121);
    CHECK(aligned.at("review_required") == stab.review_required);

    // Recovered translations follow the planted jitter (frame k shows the
    // world shifted by (dx, dy), so the warp translation is (dx, dy)).
    double sq = 0.0;
    for (std::size_t k = 0; k < stab.frames.size(); ++k) {
      const auto& j = pc.truth.jitter[k + 1];
      sq += std::pow(stab.frames[k].tx() - j.dx, 2) + std::pow(stab.frames[k].ty() - j.dy, 2);
    }
    CHECK(std::sqrt(sq / static_cast<double>(stab.frames.size())) < 0.2);
    CHECK_FALSE(stab.review_required);

    const RoiMask roi = segment_case(tmp.path);
    CHECK(roi.count() > 0);
    CHECK(roi_source(tmp.path) == SegmenterKind::Otsu);
    const auto records = features_case(tmp.path);
    REQUIRE(records.size() == 1);
    CHECK(case_status(tmp.path).stage == Stage::Featured);
    for (Family f : kFamilies) CHECK(fs::exists(tmp.path / ("features_" + std::string(to_string(f)) + ".csv")));
    const std::string csv = slurp(tmp.path / "features.csv");

    // Rerunning with unchanged inputs gives byte-identical artifacts.
    align_case(tmp.path);
    CHECK(slurp(tmp.path / "warps.jsonl") == warps);
    CHECK(case_status(tmp.path).stage == Stage::Aligned);  // re-alignment cleared roi and features
    CHECK_FALSE(fs::exists(tmp.path / "roi.pgm"));
    segment_case(tmp.path);
    features_case(tmp.path);
    CHECK(slurp(tmp.path / "features.csv") == csv);
    CHECK(load_features(tmp.path)[0].block(Family::Temporal).values == records[0].block(Family::Temporal).values);

    // Editing annotations drops features but keeps a classical ROI.
    auto anns = read_manifest(tmp.path).annotations;
    anns[0].point.x += 1.0;
    replace_annotations(tmp.path, anns);
    CHECK(case_status(tmp.path).stage == Stage::Segmented);
  }

  TEST_CASE("jitter-free case aligns to identity") {
    // Noise-free: the only thing that changes between frames is the cooled
    // disk, which the correlation support excludes.
    TempDir tmp("pipe-still");
    write_small_case(tmp.path, 5, 0.0, 0.0);
    const Stabilization stab = align_case(tmp.path);
    CHECK_FALSE(stab.review_required);
    for (const auto& w : stab.frames) {
      CHECK(std::abs(w.tx()) < 0.01);
      CHECK(std::abs(w.ty()) < 0.01);
    }
    CHECK(std::abs(stab.precool.tx()) < 0.01);
    CHECK(std::abs(stab.precool.ty()) < 0.01);
  }

  TEST_CASE("manual segmentation from a polygon file or from the annotations") {
    TempDir tmp("pipe-manual");
    write_small_case(tmp.path, 6, 0.0);
    align_case(tmp.path);
    CHECK(stage_error([&] { segment_case(tmp.path, SegmenterKind::Manual); }) ==
          "manual segmentation needs an ROI polygon");

    auto anns = read_manifest(tmp.path).annotations;
    anns[0].roi_polygon = {{40.0, 30.0}, {120.0, 30.0}, {120.0, 90.0}, {40.0, 90.0}};
    replace_annotations(tmp.path, anns);
    const RoiMask from_annotations = segment_case(tmp.path, SegmenterKind::Manual);
    const Stabilization stab = load_warps(tmp.path);
    std::vector<Point2> moved;
    for (const auto& p : anns[0].roi_polygon) moved.push_back(apply_inverse_warp_to_point(stab.precool, p));
    CHECK(from_annotations == rasterize_polygon(moved, 160, 120));
    CHECK(roi_source(tmp.path) == SegmenterKind::Manual);

    // A polygon edit invalidates a manual ROI.
    features_case(tmp.path);
    anns[0].roi_polygon[0].x = 42.0;
    replace_annotations(tmp.path, anns);
    CHECK(case_status(tmp.path).stage == Stage::Aligned);

    std::ofstream(tmp.path / "roi_polygon.json") << R"({"polygon": [[10, 10], [50, 10], [50, 40], [10, 40]]})";
    const RoiMask from_file = segment_case(tmp.path, SegmenterKind::Manual);
    CHECK(from_file.count() == 40 * 30);
  }

  TEST_CASE("prediction output layout") {
    ClassificationOutcome o;
    o.p = {0.1, 0.9, 0.8, 0.2, 0.7};
    o.votes = {0, 1, 1, 0, 1};
    o.F = 3;
    o.label = Label::Viable;
    const auto j = nlohmann::json::parse(outcome_json("c1", {"n1"}, {o}));
    CHECK(j.at("case_id") == "c1");
    CHECK(j.at("label") == "viable");
    CHECK(j.at("F") == 3);
    CHECK(j.at("votes").size() == 5);
    CHECK(j.at("nodules").size() == 1);
  }

  TEST_CASE("parallel_for covers every index and rethrows") {
    std::vector<int> hits(50, 0);
    parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                      if (i == 7) fail(ErrorCode::EmptyRegion, "boom");
                    }),
                    Error);
  }

  TEST_CASE("stage names") {
    CHECK(parse_stage("features") == Stage::Featured);
    CHECK(parse_stage("predicted") == Stage::Predicted);
    CHECK(to_string(Stage::Segmented) == "segmented");
    CHECK_THROWS_AS(parse_stage("bake"), Error);
  }
}
