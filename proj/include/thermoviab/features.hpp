#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thermoviab/registration.hpp"
#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

enum class Family { Temporal, RoiTextural, NoduleTextural, RelativeTextural, FirstOrder };

inline constexpr std::array<Family, 5> kFamilies{Family::Temporal, Family::RoiTextural, Family::NoduleTextural,
                                                 Family::RelativeTextural, Family::FirstOrder};

std::string_view to_string(Family family);
Family parse_family(std::string_view text);
/// 42 / 576 / 576 / 1152 / 90.
std::size_t family_size(Family family);

struct FeatureBlock {
  Family family = Family::Temporal;
  std::vector<std::string> names;
  std::vector<double> values;
};

// ---------------------------------------------------------------------------
// Temporal family

enum class Region { Roi, Win20, Win40 };
enum class Signal { Mean, Std };

struct RegionSeries {
  Region region = Region::Roi;
  Signal signal = Signal::Mean;
  std::vector<double> samples;  // one per second, t = 0..120
};

std::string_view to_string(Region region);
std::string_view to_string(Signal signal);

inline constexpr int kSeriesSeconds = 121;

/// Square window of `side` pixels centered on `center` (columns
/// floor(x) - side/2 .. + side - 1, likewise rows), clipped to the frame.
RoiMask square_window(Point2 center, int side, int width, int height);

/// Index of the frame sampled at integer second t (|timestamp - t| < 0.5).
/// Throws DimensionMismatch when no frame covers t.
std::size_t frame_index_at(const std::vector<AlignedFrame>& frames, double t);

/// roi/win20/win40 x mean/std, in that order. Each window is intersected with
/// the ROI and with every frame's valid pixels. Throws EmptyRegion.
std::vector<RegionSeries> extract_region_series(const std::vector<AlignedFrame>& frames, const RoiMask& roi,
                                                Point2 nodule);

/// Seven statistics of one series: AUC, slope, skewness, kurtosis, spectral
/// centroid, spectral slope, dominant frequency.
std::array<double, 7> series_features(const std::vector<double>& samples);

FeatureBlock temporal_features(const std::vector<RegionSeries>& series);

// ---------------------------------------------------------------------------
// Texture families

inline constexpr int kGrayLevels = 64;
inline constexpr std::array<int, 3> kGlcmDistances{1, 3, 5};
inline constexpr std::array<int, 4> kGlcmAngles{0, 45, 90, 135};
/// Video times of the texture images; the precool image comes first.
inline constexpr std::array<double, 7> kTextureTimes{15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 105.0};

/// Quantized gray image; -1 marks pixels outside the analyzed region.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<int> levels;

  int at(int row, int col) const { return levels[static_cast<std::size_t>(row) * width + col]; }
};

/// contrast, dissimilarity, homogeneity, energy, correlation, ASM.
using GlcmProperties = std::array<double, 6>;
inline constexpr std::array<std::string_view, 6> kGlcmPropertyNames{"contrast",    "dissimilarity", "homogeneity",
                                                                     "energy",      "correlation",   "ASM"};

/// Pixel offset (dx, dy) for a distance and angle in degrees; 90 points up.
std::array<int, 2> glcm_offset(int distance, int angle);

/// Symmetric normalized co-occurrence matrix over pairs whose members are both
/// inside the region. Throws TooFewPairs when fewer than `min_pairs` pairs.
std::vector<double> glcm_matrix(const GrayImage& image, int distance, int angle, int levels = kGrayLevels,
                                std::size_t min_pairs = 16);
GlcmProperties glcm_properties(const std::vector<double>& matrix, int levels = kGrayLevels);
GlcmProperties glcm(const GrayImage& image, int distance, int angle, int levels = kGrayLevels,
                    std::size_t min_pairs = 16);

struct FeatureConfig {
  std::size_t min_pairs = 16;
};

/// Per-case quantization scale: min/max of the valid ROI pixels over the
/// texture images.
struct QuantScale {
  double lo = 0.0;
  double hi = 0.0;
  int quantize(double value) const;
};

/// The precool image and video frames at t = 15..105 step 15.
std::vector<const AlignedFrame*> texture_images(const AlignedSequence& seq);
QuantScale texture_scale(const AlignedSequence& seq, const RoiMask& roi);

/// 8 images x 3 distances x 4 angles x 6 properties; `family` is RoiTextural
/// or NoduleTextural.
FeatureBlock textural_block(Family family, const AlignedSequence& seq, const RoiMask& region,
                            const QuantScale& scale, const FeatureConfig& cfg = {});

/// 576 differences roi - nodule, then 576 ratios nodule / roi (0 when
/// |roi| < 1e-9).
FeatureBlock relative_textural(const FeatureBlock& roi_block, const FeatureBlock& nodule_block);

// ---------------------------------------------------------------------------
// First-order family

/// min, mean, max, std, mode (0.1 C bins, ties to the lower bin).
std::array<double, 5> first_order_stats(const std::vector<double>& values);

FeatureBlock first_order(const std::vector<AlignedFrame>& frames, const RoiMask& roi, const RoiMask& nodule_region);

// ---------------------------------------------------------------------------
// Whole case

/// One annotated nodule transported into frame-0 coordinates.
struct NoduleSite {
  std::string nodule_id;
  Point2 point;
  RoiMask region;  // polygon when annotated, else the 20x20 window
};

/// Maps a precool-frame annotation into frame-0 coordinates through the
/// inverse of the precool warp.
NoduleSite register_nodule(const NoduleAnnotation& annotation, const WarpModel& precool_warp, int width,
                           int height);

struct FeatureRecord {
  std::string case_id;
  std::string nodule_id;
  std::array<FeatureBlock, 5> blocks;  // in kFamilies order

  const FeatureBlock& block(Family family) const { return blocks[static_cast<std::size_t>(family)]; }
};

FeatureRecord extract_features(const std::string& case_id, const AlignedSequence& seq, const RoiMask& roi,
                               const NoduleSite& site, const FeatureConfig& cfg = {});

/// Ordered names of every family (stable across runs; see docs/feature_names.md).
std::vector<std::string> feature_names(Family family);

/// CSV export. `family` selects one family; nullopt writes the wide table.
/// Values use the shortest round-trip decimal representation.
std::string features_to_csv(const std::vector<FeatureRecord>& records, std::optional<Family> family);
std::vector<FeatureRecord> features_from_csv(std::string_view text);

}  // namespace thermoviab
