#include "thermoviab/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <sstream>

#include "thermoviab/error.hpp"

namespace thermoviab {

std::string_view to_string(Family family) {
  switch (family) {
    case Family::Temporal: return "temporal";
    case Family::RoiTextural: return "roi_textural";
    case Family::NoduleTextural: return "nodule_textural";
    case Family::RelativeTextural: return "relative_textural";
    case Family::FirstOrder: return "first_order";
  }
  return "temporal";
}

Family parse_family(std::string_view text) {
  for (Family f : kFamilies) {
    if (to_string(f) == text) return f;
  }
  fail(ErrorCode::MissingFamily, "unknown feature family '" + std::string(text) + "'");
}

std::size_t family_size(Family family) {
  switch (family) {
    case Family::Temporal: return 42;
    case Family::RoiTextural: return 576;
    case Family::NoduleTextural: return 576;
    case Family::RelativeTextural: return 1152;
    case Family::FirstOrder: return 90;
  }
  return 0;
}

std::string_view to_string(Region region) {
  switch (region) {
    case Region::Roi: return "roi";
    case Region::Win20: return "win20";
    case Region::Win40: return "win40";
  }
  return "roi";
}

std::string_view to_string(Signal signal) { return signal == Signal::Mean ? "mean" : "std"; }

namespace {

constexpr std::array<std::string_view, 7> kSeriesFeatureNames{
    "auc", "slope", "skewness", "kurtosis", "spectral_centroid", "spectral_slope", "dominant_frequency"};
constexpr std::array<std::string_view, 5> kFirstOrderStatNames{"min", "mean", "max", "std", "mode"};
constexpr std::array<double, 3> kFirstOrderTimes{0.0, 60.0, 120.0};
constexpr int kDftLength = 128;

std::string time_tag(double t) { return "t" + std::to_string(static_cast<int>(std::lround(t))); }

std::vector<std::string> texture_image_tags() {
  std::vector<std::string> tags{"image_precool"};
  for (double t : kTextureTimes) tags.push_back("image_" + time_tag(t));
  return tags;
}

std::vector<std::string> textural_suffixes() {
  std::vector<std::string> out;
  for (const auto& image : texture_image_tags()) {
    for (int d : kGlcmDistances) {
      for (int a : kGlcmAngles) {
        for (auto prop : kGlcmPropertyNames) {
          out.push_back(image + ".d" + std::to_string(d) + ".a" + std::to_string(a) + "." + std::string(prop));
        }
      }
    }
  }
  return out;
}

// Pixels of `region` that are valid in `frame`.
std::vector<double> region_values(const AlignedFrame& frame, const RoiMask& region) {
  std::vector<double> values;
  for (std::size_t i = 0; i < region.bits.size(); ++i) {
    if (region.bits[i] && frame.valid.bits[i]) values.push_back(frame.frame.temps[i]);
  }
  return values;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population standard deviation, two-pass.
double std_of(const std::vector<double>& v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

RoiMask intersect(const RoiMask& a, const RoiMask& b) {
  RoiMask out(a.width, a.height);
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = a.bits[i] && b.bits[i];
  return out;
}

// Least-squares slope of y against x.
double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Temporal

RoiMask square_window(Point2 center, int side, int width, int height) {
  RoiMask out(width, height);
  const int c0 = static_cast<int>(std::floor(center.x)) - side / 2;
  const int r0 = static_cast<int>(std::floor(center.y)) - side / 2;
  for (int r = std::max(r0, 0); r < std::min(r0 + side, height); ++r) {
    for (int c = std::max(c0, 0); c < std::min(c0 + side, width); ++c) out.at(r, c) = 1;
  }
  return out;
}

std::size_t frame_index_at(const std::vector<AlignedFrame>& frames, double t) {
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (std::abs(frames[k].frame.timestamp - t) < 0.5) return k;
  }
  fail(ErrorCode::DimensionMismatch, "sequence has no frame at t=" + std::to_string(t) + " s");
}

std::vector<RegionSeries> extract_region_series(const std::vector<AlignedFrame>& frames, const RoiMask& roi,
                                                Point2 nodule) {
  if (frames.empty()) fail(ErrorCode::EmptyRegion, "no frames");
  const int w = roi.width;
  const int h = roi.height;
  const std::array<RoiMask, 3> regions{roi, intersect(roi, square_window(nodule, 20, w, h)),
                                       intersect(roi, square_window(nodule, 40, w, h))};
  std::vector<RegionSeries> out;
  for (Region region : {Region::Roi, Region::Win20, Region::Win40}) {
    out.push_back({region, Signal::Mean, {}});
    out.push_back({region, Signal::Std, {}});
  }
  for (int t = 0; t < kSeriesSeconds; ++t) {
    const AlignedFrame& frame = frames[frame_index_at(frames, t)];
    for (std::size_t r = 0; r < regions.size(); ++r) {
      const std::vector<double> values = region_values(frame, regions[r]);
      if (values.empty()) {
        fail(ErrorCode::EmptyRegion, std::string(to_string(out[2 * r].region)) + " has no valid pixels at t=" +
                                         std::to_string(t));
      }
      const double m = mean_of(values);
      out[2 * r].samples.push_back(m);
      out[2 * r + 1].samples.push_back(std_of(values, m));
    }
  }
  return out;
}

std::array<double, 7> series_features(const std::vector<double>& y) {
  const std::size_t n = y.size();
  if (n < 2) fail(ErrorCode::EmptyRegion, "series needs at least two samples");
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i);

  std::array<double, 7> f{};
  for (std::size_t i = 1; i < n; ++i) f[0] += 0.5 * (y[i] + y[i - 1]);
  f[1] = ls_slope(t, y);

  const double m = mean_of(y);
  double m2 = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;
  double scale = 0.0;
  for (double v : y) {
    const double d = v - m;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
    scale = std::max(scale, std::abs(v));
  }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  // Rounding residue of a constant series is not variance.
  const bool flat = std::sqrt(m2) <= 1e-12 * std::max(scale, 1.0);
  f[2] = flat ? 0.0 : m3 / std::pow(m2, 1.5);
  f[3] = flat ? 0.0 : m4 / (m2 * m2) - 3.0;

  // Zero-padded DFT of the mean-removed series; bins 1..64, f = k/128 Hz.
  std::vector<double> freq;
  std::vector<double> power;
  const std::size_t used = std::min<std::size_t>(n, kDftLength);
  for (int k = 1; k <= kDftLength / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < used; ++i) {
      const double angle = -2.0 * std::numbers::pi * k * static_cast<double>(i) / kDftLength;
      acc += (y[i] - m) * std::complex<double>(std::cos(angle), std::sin(angle));
    }
    freq.push_back(static_cast<double>(k) / kDftLength);
    power.push_back(flat ? 0.0 : std::norm(acc));
  }
  double total = 0.0;
  double weighted = 0.0;
  std::size_t best = 0;
  for (std::size_t k = 0; k < power.size(); ++k) {
    total += power[k];
    weighted += freq[k] * power[k];
    if (power[k] > power[best]) best = k;
  }
  if (total > 0.0) {
    f[4] = weighted / total;
    std::vector<double> logp(power.size());
    // The floor keeps exact spectral zeros finite without moving real bins.
    const double floor = total * 1e-15;
    for (std::size_t k = 0; k < power.size(); ++k) logp[k] = std::log(power[k] + floor);
    f[5] = ls_slope(freq, logp);
    f[6] = freq[best];
  }
  return f;
}

FeatureBlock temporal_features(const std::vector<RegionSeries>& series) {
  if (series.size() != 6) fail(ErrorCode::EmptyRegion, "temporal features need six region series");
  FeatureBlock block{Family::Temporal, feature_names(Family::Temporal), {}};
  for (const auto& s : series) {
    const auto f = series_features(s.samples);
    block.values.insert(block.values.end(), f.begin(), f.end());
  }
  return block;
}

// ---------------------------------------------------------------------------
// GLCM

std::array<int, 2> glcm_offset(int distance, int angle) {
  switch (angle) {
    case 0: return {distance, 0};
    case 45: return {distance, -distance};
    case 90: return {0, -distance};
    case 135: return {-distance, -distance};
    default: break;
  }
  fail(ErrorCode::InvalidSpec, "GLCM angle must be 0, 45, 90 or 135");
}

std::vector<double> glcm_matrix(const GrayImage& image, int distance, int angle, int levels,
                                std::size_t min_pairs) {
  const auto [dx, dy] = glcm_offset(distance, angle);
  std::vector<double> counts(static_cast<std::size_t>(levels) * levels, 0.0);
  std::size_t pairs = 0;
  for (int r = 0; r < image.height; ++r) {
    const int r2 = r + dy;
    if (r2 < 0 || r2 >= image.height) continue;
    for (int c = 0; c < image.width; ++c) {
      const int c2 = c + dx;
      if (c2 < 0 || c2 >= image.width) continue;
      const int a = image.at(r, c);
      const int b = image.at(r2, c2);
      if (a < 0 || b < 0) continue;
      counts[static_cast<std::size_t>(a) * levels + b] += 1.0;
      counts[static_cast<std::size_t>(b) * levels + a] += 1.0;
      ++pairs;
    }
  }
  if (pairs < min_pairs) {
    fail(ErrorCode::TooFewPairs, "GLCM d=" + std::to_string(distance) + " a=" + std::to_string(angle) + " has " +
                                     std::to_string(pairs) + " pairs (< " + std::to_string(min_pairs) + ")");
  }
  const double total = 2.0 * static_cast<double>(pairs);
  for (double& v : counts) v /= total;
  return counts;
}

GlcmProperties glcm_properties(const std::vector<double>& P, int levels) {
  double contrast = 0.0;
  double dissimilarity = 0.0;
  double homogeneity = 0.0;
  double asm_ = 0.0;
  double mu = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = P[static_cast<std::size_t>(i) * levels + j];
      if (p == 0.0) continue;
      const double d = i - j;
      contrast += p * d * d;
      dissimilarity += p * std::abs(d);
      homogeneity += p / (1.0 + d * d);
      asm_ += p * p;
      mu += p * i;
    }
  }
  // The matrix is symmetric, so both marginals share mean and variance.
  double var = 0.0;
  double cov = 0.0;
  for (int i = 0; i < levels; ++i) {
    for (int j = 0; j < levels; ++j) {
      const double p = P[static_cast<std::size_t>(i) * levels + j];
      if (p == 0.0) continue;
      var += p * (i - mu) * (i - mu);
      cov += p * (i - mu) * (j - mu);
    }
  }
  const double correlation = var > 1e-15 ? cov / var : 1.0;
  return {contrast, dissimilarity, homogeneity, std::sqrt(asm_), correlation, asm_};
}

GlcmProperties glcm(const GrayImage& image, int distance, int angle, int levels, std::size_t min_pairs) {
  return glcm_properties(glcm_matrix(image, distance, angle, levels, min_pairs), levels);
}

int QuantScale::quantize(double value) const {
  if (!(hi > lo)) return 0;
  const int q = static_cast<int>(std::floor((value - lo) / (hi - lo) * kGrayLevels));
  return std::clamp(q, 0, kGrayLevels - 1);
}

std::vector<const AlignedFrame*> texture_images(const AlignedSequence& seq) {
  std::vector<const AlignedFrame*> images{&seq.precool};
  for (double t : kTextureTimes) images.push_back(&seq.frames[frame_index_at(seq.frames, t)]);
  return images;
}

QuantScale texture_scale(const AlignedSequence& seq, const RoiMask& roi) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const AlignedFrame* image : texture_images(seq)) {
    for (double v : region_values(*image, roi)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(lo <= hi)) fail(ErrorCode::EmptyRegion, "ROI has no valid pixels in the texture images");
  return {lo, hi};
}

FeatureBlock textural_block(Family family, const AlignedSequence& seq, const RoiMask& region,
                            const QuantScale& scale, const FeatureConfig& cfg) {
  if (family != Family::RoiTextural && family != Family::NoduleTextural) {
    fail(ErrorCode::InvalidSpec, "textural_block needs a textural family");
  }
  FeatureBlock block{family, feature_names(family), {}};
  block.values.reserve(576);
  const auto images = texture_images(seq);
  const auto tags = texture_image_tags();
  for (std::size_t k = 0; k < images.size(); ++k) {
    const AlignedFrame& image = *images[k];
    GrayImage gray{region.width, region.height, std::vector<int>(region.bits.size(), -1)};
    for (std::size_t i = 0; i < region.bits.size(); ++i) {
      if (region.bits[i] && image.valid.bits[i]) gray.levels[i] = scale.quantize(image.frame.temps[i]);
    }
    for (int d : kGlcmDistances) {
      for (int a : kGlcmAngles) {
        try {
          const auto props = glcm(gray, d, a, kGrayLevels, cfg.min_pairs);
          block.values.insert(block.values.end(), props.begin(), props.end());
        } catch (const Error& e) {
          fail(e.code(), std::string(to_string(family)) + "." + tags[k] + ": " + e.what());
        }
      }
    }
  }
  return block;
}

FeatureBlock relative_textural(const FeatureBlock& roi_block, const FeatureBlock& nodule_block) {
  if (roi_block.values.size() != 576 || nodule_block.values.size() != 576) {
    fail(ErrorCode::DimensionMismatch, "relative textural features need two 576-value blocks");
  }
  FeatureBlock block{Family::RelativeTextural, feature_names(Family::RelativeTextural), {}};
  block.values.resize(1152);
  for (std::size_t k = 0; k < 576; ++k) {
    const double roi = roi_block.values[k];
    const double nodule = nodule_block.values[k];
    block.values[k] = roi - nodule;
    block.values[576 + k] = std::abs(roi) >= 1e-9 ? nodule / roi : 0.0;
  }
  return block;
}

// ---------------------------------------------------------------------------
// First order

std::array<double, 5> first_order_stats(const std::vector<double>& values) {
  if (values.empty()) fail(ErrorCode::EmptyRegion, "first-order statistics of an empty region");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double m = mean_of(values);
  std::map<long, std::size_t> bins;
  for (double v : values) ++bins[static_cast<long>(std::floor(v * 10.0))];
  long mode_bin = bins.begin()->first;
  std::size_t mode_count = 0;
  for (const auto& [bin, count] : bins) {
    if (count > mode_count) {  // ascending order keeps the lower bin on ties
      mode_bin = bin;
      mode_count = count;
    }
  }
  return {*lo, m, *hi, std_of(values, m), (static_cast<double>(mode_bin) + 0.5) / 10.0};
}

FeatureBlock first_order(const std::vector<AlignedFrame>& frames, const RoiMask& roi, const RoiMask& nodule_region) {
  // stats[time][0 = roi, 1 = nodule, 2 = nodule - roi]
  std::array<std::array<std::array<double, 5>, 3>, 3> stats{};
  for (std::size_t ti = 0; ti < kFirstOrderTimes.size(); ++ti) {
    const AlignedFrame& frame = frames[frame_index_at(frames, kFirstOrderTimes[ti])];
    const auto roi_values = region_values(frame, roi);
    const auto nodule_values = region_values(frame, nodule_region);
    if (roi_values.empty() || nodule_values.empty()) {
      fail(ErrorCode::EmptyRegion, "first-order region empty at " + time_tag(kFirstOrderTimes[ti]));
    }
    stats[ti][0] = first_order_stats(roi_values);
    stats[ti][1] = first_order_stats(nodule_values);
    for (int s = 0; s < 5; ++s) stats[ti][2][s] = stats[ti][1][s] - stats[ti][0][s];
  }
  FeatureBlock block{Family::FirstOrder, feature_names(Family::FirstOrder), {}};
  for (std::size_t ti = 0; ti < 3; ++ti) {
    for (int sig = 0; sig < 3; ++sig) block.values.insert(block.values.end(), stats[ti][sig].begin(), stats[ti][sig].end());
  }
  constexpr std::array<std::array<int, 2>, 3> kPairs{{{1, 0}, {2, 1}, {2, 0}}};
  for (const auto& [later, earlier] : kPairs) {
    for (int sig = 0; sig < 3; ++sig) {
      for (int s = 0; s < 5; ++s) block.values.push_back(stats[later][sig][s] - stats[earlier][sig][s]);
    }
  }
  return block;
}

// ---------------------------------------------------------------------------
// Names

std::vector<std::string> feature_names(Family family) {
  const std::string prefix = std::string(to_string(family)) + ".";
  std::vector<std::string> names;
  switch (family) {
    case Family::Temporal:
      for (Region region : {Region::Roi, Region::Win20, Region::Win40}) {
        for (Signal signal : {Signal::Mean, Signal::Std}) {
          for (auto f : kSeriesFeatureNames) {
            names.push_back(prefix + std::string(to_string(region)) + "." + std::string(to_string(signal)) + "." +
                            std::string(f));
          }
        }
      }
      break;
    case Family::RoiTextural:
    case Family::NoduleTextural:
      for (const auto& s : textural_suffixes()) names.push_back(prefix + s);
      break;
    case Family::RelativeTextural:
      for (std::string_view kind : {"diff", "ratio"}) {
        for (const auto& s : textural_suffixes()) names.push_back(prefix + std::string(kind) + "." + s);
      }
      break;
    case Family::FirstOrder: {
      const std::array<std::string, 3> signals{"roi", "nodule", "nodule_minus_roi"};
      for (double t : kFirstOrderTimes) {
        for (const auto& sig : signals) {
          for (auto stat : kFirstOrderStatNames) names.push_back(prefix + sig + "." + time_tag(t) + "." + std::string(stat));
        }
      }
      for (std::string_view pair : {"t60_minus_t0", "t120_minus_t60", "t120_minus_t0"}) {
        for (const auto& sig : signals) {
          for (auto stat : kFirstOrderStatNames) {
            names.push_back(prefix + sig + "." + std::string(pair) + "." + std::string(stat));
          }
        }
      }
      break;
    }
  }
  return names;
}

// ---------------------------------------------------------------------------
// Whole case

NoduleSite register_nodule(const NoduleAnnotation& annotation, const WarpModel& precool_warp, int width,
                           int height) {
  NoduleSite site;
  site.nodule_id = annotation.nodule_id;
  site.point = apply_inverse_warp_to_point(precool_warp, annotation.point);
  if (annotation.roi_polygon.empty()) {
    site.region = square_window(site.point, 20, width, height);
  } else {
    std::vector<Point2> polygon;
    for (const Point2& p : annotation.roi_polygon) polygon.push_back(apply_inverse_warp_to_point(precool_warp, p));
    site.region = rasterize_polygon(polygon, width, height);
  }
  return site;
}

FeatureRecord extract_features(const std::string& case_id, const AlignedSequence& seq, const RoiMask& roi,
                               const NoduleSite& site, const FeatureConfig& cfg) {
  if (seq.frames.empty()) fail(ErrorCode::StageOrder, "case is not aligned");
  if (roi.count() == 0) fail(ErrorCode::EmptyRegion, "ROI mask is empty");
  FeatureRecord record;
  record.case_id = case_id;
  record.nodule_id = site.nodule_id;
  auto tagged = [&](Family family, auto&& fn) -> FeatureBlock {
    try {
      return fn();
    } catch (const Error& e) {
      fail(e.code(), std::string(to_string(family)) + ": " + e.what());
    }
  };
  record.blocks[0] = tagged(Family::Temporal, [&] {
    return temporal_features(extract_region_series(seq.frames, roi, site.point));
  });
  const QuantScale scale = texture_scale(seq, roi);
  record.blocks[1] = tagged(Family::RoiTextural, [&] {
    return textural_block(Family::RoiTextural, seq, roi, scale, cfg);
  });
  record.blocks[2] = tagged(Family::NoduleTextural, [&] {
    return textural_block(Family::NoduleTextural, seq, site.region, scale, cfg);
  });
  record.blocks[3] = relative_textural(record.blocks[1], record.blocks[2]);
  record.blocks[4] = tagged(Family::FirstOrder, [&] { return first_order(seq.frames, roi, site.region); });
  for (const auto& block : record.blocks) {
    for (double v : block.values) {
      if (!std::isfinite(v)) fail(ErrorCode::DegenerateData, std::string(to_string(block.family)) + ": non-finite feature");
    }
  }
  return record;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

std::string features_to_csv(const std::vector<FeatureRecord>& records, std::optional<Family> family) {
  std::vector<Family> families;
  if (family) {
    families.push_back(*family);
  } else {
    families.assign(kFamilies.begin(), kFamilies.end());
  }
  std::string out = "case_id,nodule_id";
  for (Family f : families) {
    for (const auto& name : feature_names(f)) out += "," + name;
  }
  out += "\n";
  for (const auto& rec : records) {
    out += rec.case_id + "," + rec.nodule_id;
    for (Family f : families) {
      for (double v : rec.block(f).values) out += "," + format_double(v);
    }
    out += "\n";
  }
  return out;
}

std::vector<FeatureRecord> features_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::CorruptPayload, "feature CSV is empty");
  const auto header = split_line(line);
  if (header.size() < 2 || header[0] != "case_id" || header[1] != "nodule_id") {
    fail(ErrorCode::CorruptPayload, "feature CSV header must start with case_id,nodule_id");
  }
  // Column -> family, verified against the canonical order per family.
  std::vector<Family> column_family;
  std::map<Family, std::size_t> seen;
  for (std::size_t c = 2; c < header.size(); ++c) {
    const std::string& name = header[c];
    const Family f = parse_family(std::string_view(name).substr(0, name.find('.')));
    column_family.push_back(f);
    ++seen[f];
  }
  for (const auto& [f, n] : seen) {
    if (n != family_size(f)) fail(ErrorCode::CorruptPayload, "feature CSV has a partial " + std::string(to_string(f)) + " block");
  }
  std::vector<FeatureRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) fail(ErrorCode::CorruptPayload, "feature CSV row has the wrong column count");
    FeatureRecord rec;
    rec.case_id = cells[0];
    rec.nodule_id = cells[1];
    for (Family f : kFamilies) {
      auto& block = rec.blocks[static_cast<std::size_t>(f)];
      block.family = f;
      if (seen.count(f)) block.names = feature_names(f);
    }
    for (std::size_t c = 2; c < cells.size(); ++c) {
      double v = 0.0;
      const auto& s = cells[c];
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        fail(ErrorCode::CorruptPayload, "bad feature value '" + s + "'");
      }
      rec.blocks[static_cast<std::size_t>(column_family[c - 2])].values.push_back(v);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace thermoviab
