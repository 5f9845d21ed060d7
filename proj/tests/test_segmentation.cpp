#include <doctest.h>

#include <functional>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "support.hpp"
#include "thermoviab/error.hpp"
#include "thermoviab/phantom.hpp"
#include "thermoviab/rng.hpp"
#include "thermoviab/segmentation.hpp"

using namespace thermoviab;

namespace {

RoiMask from_rows(const std::vector<std::string>& rows) {
  RoiMask m(static_cast<int>(rows.front().size()), static_cast<int>(rows.size()));
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) m.at(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] == '#';
  }
  return m;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

// Largest relative error between analytic and central-difference gradients.
double gradient_check(SegmenterNet& net, const Tensor& x, const std::vector<double>& target) {
  std::vector<Conv2d> grads;
  net.loss_and_gradients(x, target, grads);
  std::vector<Conv2d> scratch;
  double worst = 0.0;
  const double h = 1e-5;
  auto probe = [&](double& param, double analytic) {
    const double orig = param;
    param = orig + h;
    const double up = net.loss_and_gradients(x, target, scratch);
    param = orig - h;
    const double down = net.loss_and_gradients(x, target, scratch);
    param = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
    worst = std::max(worst, rel);
  };
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    for (std::size_t k = 0; k < net.layers()[l].weight.size(); ++k) probe(net.layers()[l].weight[k], grads[l].weight[k]);
    for (std::size_t k = 0; k < net.layers()[l].bias.size(); ++k) probe(net.layers()[l].bias[k], grads[l].bias[k]);
  }
  return worst;
}

}  // namespace

TEST_SUITE("segmentation") {
  TEST_CASE("Otsu separates two well-separated clusters like an exhaustive split search") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<float> values;
      const double lo = rng.uniform(20, 28);
      const double gap = rng.uniform(2, 6);
      const int n_lo = 50 + static_cast<int>(rng.below(200));
      const int n_hi = 50 + static_cast<int>(rng.below(200));
      for (int i = 0; i < n_lo; ++i) values.push_back(static_cast<float>(lo + rng.uniform(0, 1)));
      for (int i = 0; i < n_hi; ++i) values.push_back(static_cast<float>(lo + 1 + gap + rng.uniform(0, 1)));
      // Oracle: split of the sorted values maximizing between-class variance.
      std::vector<double> sorted(values.begin(), values.end());
      std::sort(sorted.begin(), sorted.end());
      double best = -1.0;
      std::size_t best_split = 0;
      for (std::size_t s = 1; s < sorted.size(); ++s) {
        double m0 = 0, m1 = 0;
        for (std::size_t i = 0; i < s; ++i) m0 += sorted[i];
        for (std::size_t i = s; i < sorted.size(); ++i) m1 += sorted[i];
        const double w0 = static_cast<double>(s), w1 = static_cast<double>(sorted.size() - s);
        m0 /= w0;
        m1 /= w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
          best = between;
          best_split = s;
        }
      }
      const double t = otsu_threshold(values);
      const auto below = std::count_if(values.begin(), values.end(), [t](float v) { return v < t; });
      CHECK(static_cast<std::size_t>(below) == best_split);
    }
  }

  TEST_CASE("largest component uses 8-connectivity") {
    RoiMask m = from_rows({"##...#",
                           "..#..#",
                           "...#..",
                           "......"});
    CHECK(keep_largest_component(m) == 4);
    CHECK(m == from_rows({"##....",
                          "..#...",
                          "...#..",
                          "......"}));
  }

  TEST_CASE("closing bridges one-pixel gaps and the border does not erode") {
    const RoiMask gap = from_rows({"#####",
                                   "##.##",
                                   "#####"});
    CHECK(close3x3(gap) == from_rows({"#####", "#####", "#####"}));
    const RoiMask lone = from_rows({".......",
                                    ".......",
                                    "...#...",
                                    ".......",
                                    "......."});
    CHECK(close3x3(lone) == lone);
  }

  TEST_CASE("hole filling leaves border-connected background alone") {
    const RoiMask ring = from_rows({".......",
                                    ".#####.",
                                    ".#...#.",
                                    ".#####.",
                                    "...#..."});
    CHECK(fill_holes(ring) == from_rows({".......",
                                         ".#####.",
                                         ".#####.",
                                         ".#####.",
                                         "...#..."}));
    const RoiMask open = from_rows({".###.",
                                    ".#.#.",
                                    ".#.#."});
    CHECK(fill_holes(open) == open);
  }

  TEST_CASE("Dice coefficient") {
    const RoiMask a = from_rows({"##..", "##.."});
    const RoiMask b = from_rows({".##.", ".##."});
    CHECK(dice(a, b) == doctest::Approx(0.5));
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(RoiMask(4, 2), RoiMask(4, 2)) == 1.0);
    CHECK(code_of([&] { dice(a, RoiMask(3, 2)); }) == ErrorCode::DimensionMismatch);
  }

  TEST_CASE("classical segmentation finds the cooled disk of phantoms") {
    const auto specs = study_specs(4, 0.5, 9, tvtest::scaled(PhantomSpec{}, 0.5));
    for (auto s : specs) {
      s.duration = 2;
      const PhantomCase pc = generate_case(s);
      CHECK(dice(segment_cold_region(pc.sequence.frames.front()), pc.truth.mask) >= 0.9);
    }
  }

  TEST_CASE("a tiny cold spot is not a cold region") {
    ThermalFrame f(60, 40, 0.0, 33.0f);
    Rng rng(1);
    for (auto& v : f.temps) v = static_cast<float>(33.0 + 0.05 * rng.normal());
    for (int r = 10; r < 13; ++r) {
      for (int c = 10; c < 13; ++c) f.at(r, c) = 30.0f;
    }
    CHECK(code_of([&] { segment_cold_region(f); }) == ErrorCode::NoColdRegion);
  }

  TEST_CASE("analytic gradients match central differences") {
    SegmenterNet net({2, 4, 8}, 3);
    Rng rng(5);
    // Off-kink evaluation point: zero biases would leave pixels with dead
    // inputs exactly at the ReLU corner.
    for (auto& layer : net.layers()) {
      for (auto& b : layer.bias) b = rng.uniform(-0.1, 0.1);
    }
    Tensor x(1, 16, 16);
    for (auto& v : x.v) v = rng.normal();
    std::vector<double> target(256);
    for (auto& v : target) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    target[7] = -1.0;  // ignored pixel
    CHECK(gradient_check(net, x, target) <= 1e-3);
  }

  TEST_CASE("parameter count follows the layer shapes") {
    const SegmenterNet net({2, 4, 8}, 1);
    std::size_t expected = 0;
    for (const auto& l : net.layers()) expected += static_cast<std::size_t>(l.out) * l.in * 9 + l.out;
    CHECK(net.parameter_count() == expected);
    CHECK(net.layers().size() == 7);
  }

  TEST_CASE("training is deterministic and checkpoints round trip") {
    tvtest::TempDir tmp("seg");
    PhantomSpec s = tvtest::scaled(PhantomSpec{}, 0.1);
    s.duration = 1;
    const PhantomCase pc = generate_case(s);
    const std::vector<TrainSample> data{{pc.sequence.frames.front(), pc.truth.mask}};
    TrainConfig cfg;
    cfg.epochs = 3;
    const SegmenterNet a = train_segmenter(data, cfg, nullptr, {2, 4, 8});
    const SegmenterNet b = train_segmenter(data, cfg, nullptr, {2, 4, 8});
    for (std::size_t l = 0; l < a.layers().size(); ++l) CHECK(a.layers()[l].weight == b.layers()[l].weight);

    save_segmenter(a, cfg, tmp.path / "net.bin");
    const SegmenterNet loaded = load_segmenter(tmp.path / "net.bin");
    CHECK(loaded.widths() == a.widths());
    const auto pa = a.predict(pc.sequence.frames.front());
    const auto pb = loaded.predict(pc.sequence.frames.front());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == doctest::Approx(pb[i]).epsilon(1e-4));

    save_segmenter(loaded, cfg, tmp.path / "again.bin");
    std::ifstream f1(tmp.path / "net.bin", std::ios::binary), f2(tmp.path / "again.bin", std::ios::binary);
    CHECK(std::string(std::istreambuf_iterator<char>(f1), {}) == std::string(std::istreambuf_iterator<char>(f2), {}));
  }

  TEST_CASE("bad training input") {
    TrainConfig cfg;
    CHECK(code_of([&] { train_segmenter({}, cfg); }) == ErrorCode::EmptyDataset);
    cfg.learning_rate = 0.0;
    CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidSpec);
    tvtest::TempDir tmp("seg-bad");
    std::ofstream(tmp.path / "junk.bin") << "not a checkpoint";
    CHECK(code_of([&] { load_segmenter(tmp.path / "junk.bin"); }) == ErrorCode::ModelFormat);
  }

  TEST_CASE("input preparation standardizes and pads to a multiple of 8") {
    ThermalFrame f(13, 9, 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) f.temps[i] = static_cast<float>(30 + 0.1 * static_cast<double>(i));
    const Tensor t = prepare_input(f);
    CHECK(t.w == 16);
    CHECK(t.h == 16);
    double sum = 0, sq = 0;
    for (int r = 0; r < 9; ++r) {
      for (int c = 0; c < 13; ++c) {
        sum += t.at(0, r, c);
        sq += t.at(0, r, c) * t.at(0, r, c);
      }
    }
    CHECK(sum / 117 == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(sq / 117 == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(t.at(0, 12, 14) == 0.0);
  }
}
