#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

/// Otsu threshold over a 256-bin histogram spanning [min, max] of `values`.
/// Values strictly below the returned threshold form the lower class.
double otsu_threshold(const std::vector<float>& values);

/// Keeps the largest 8-connected component of `mask` (ties: the one found
/// first in raster order). Returns the kept component's size.
std::size_t keep_largest_component(RoiMask& mask);

/// One 3x3 dilation followed by one 3x3 erosion; the frame border does not
/// erode the mask.
RoiMask close3x3(const RoiMask& mask);

/// Fills background regions not 4-connected to the frame border.
RoiMask fill_holes(const RoiMask& mask);

/// Largest component, closing, hole filling.
RoiMask postprocess_mask(const RoiMask& raw);

/// Classical cold-region segmenter. Throws NoColdRegion when the largest
/// component is smaller than 100 px.
RoiMask segment_cold_region(const ThermalFrame& frame0);

/// 2|A n B| / (|A| + |B|); 1 when both are empty. Throws DimensionMismatch.
double dice(const RoiMask& a, const RoiMask& b);

/// C x H x W tensor of doubles.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0)
      : c(channels), h(height), w(width), v(static_cast<std::size_t>(channels) * height * width, fill) {}
  double& at(int ch, int r, int col) { return v[(static_cast<std::size_t>(ch) * h + r) * w + col]; }
  double at(int ch, int r, int col) const { return v[(static_cast<std::size_t>(ch) * h + r) * w + col]; }
};

/// 3x3 convolution, zero padding 1, stride 1 or 2.
struct Conv2d {
  std::string name;
  int in = 0;
  int out = 0;
  int stride = 1;
  std::vector<double> weight;  // [out][in][3][3]
  std::vector<double> bias;    // [out]
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 1;
  int epochs = 50;
  std::uint64_t seed = 1;

  /// Throws InvalidSpec unless every field is positive (epochs may be 0).
  void validate() const;
};

/// Three stride-2 encoder stages and three upsample+conv decoder stages with
/// skip connections, followed by a 3x3 head producing one logit per pixel.
class SegmenterNet {
 public:
  SegmenterNet() = default;
  /// He-uniform initialization from `seed`.
  SegmenterNet(std::array<int, 3> widths, std::uint64_t seed);

  const std::array<int, 3>& widths() const { return widths_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<Conv2d>& layers() { return layers_; }
  const std::vector<Conv2d>& layers() const { return layers_; }
  std::size_t parameter_count() const;

  /// Per-pixel logits for a 1-channel input whose sides are multiples of 8.
  Tensor forward_logits(const Tensor& input) const;

  /// Mean per-pixel binary cross-entropy against `target` (0/1 per pixel);
  /// accumulates parameter gradients into `grads` (same layout as layers()).
  double loss_and_gradients(const Tensor& input, const std::vector<double>& target,
                            std::vector<Conv2d>& grads) const;

  /// Per-pixel probabilities for an arbitrary frame: standardized, padded to a
  /// multiple of 8, cropped back.
  std::vector<double> predict(const ThermalFrame& frame) const;

 private:
  std::array<int, 3> widths_{8, 16, 32};
  std::uint64_t seed_ = 0;
  std::vector<Conv2d> layers_;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// One Adam update with gradients `grads` multiplied by `scale`.
void adam_step(SegmenterNet& net, std::vector<Conv2d>& grads, double scale, AdamState& state,
               const TrainConfig& cfg);

struct TrainSample {
  ThermalFrame frame;
  RoiMask mask;
};

/// Adam on mean per-pixel BCE. `loss_log`, when given, receives the mean
/// training loss of every epoch. Throws EmptyDataset, DimensionMismatch,
/// NonFiniteLoss.
SegmenterNet train_segmenter(const std::vector<TrainSample>& dataset, const TrainConfig& cfg,
                             std::vector<double>* loss_log = nullptr,
                             std::array<int, 3> widths = {8, 16, 32});

/// Probability >= 0.5, then the classical post-processing. May be empty.
RoiMask infer_mask(const SegmenterNet& net, const ThermalFrame& frame);

/// Standardizes a frame (zero mean, unit std) and zero-pads it to multiples of 8.
Tensor prepare_input(const ThermalFrame& frame);

/// Checkpoint: "TVNET001", u32 header length, JSON header, float32 tensors.
void save_segmenter(const SegmenterNet& net, const TrainConfig& cfg, const std::filesystem::path& path);
SegmenterNet load_segmenter(const std::filesystem::path& path);

}  // namespace thermoviab
