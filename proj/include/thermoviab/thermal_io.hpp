#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace thermoviab {

/// Subpixel image coordinate. Origin is the top-left corner of the top-left
/// pixel, so pixel (row i, col j) has its center at (j + 0.5, i + 0.5).
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline constexpr float kMinTemperature = 0.0f;
inline constexpr float kMaxTemperature = 60.0f;
inline constexpr double kMaxTimestamp = 125.0;

/// One temperature raster in degrees Celsius, row-major.
struct ThermalFrame {
  int width = 0;
  int height = 0;
  double timestamp = 0.0;  // seconds since cooling; negative for the precool image
  std::vector<float> temps;

  ThermalFrame() = default;
  ThermalFrame(int w, int h, double t, float fill = 0.0f)
      : width(w), height(h), timestamp(t), temps(static_cast<std::size_t>(w) * h, fill) {}

  std::size_t size() const { return temps.size(); }
  float at(int row, int col) const { return temps[static_cast<std::size_t>(row) * width + col]; }
  float& at(int row, int col) { return temps[static_cast<std::size_t>(row) * width + col]; }

  /// Throws DimensionMismatch / InvalidTemperature.
  void validate() const;
};

/// Pre-cooling snapshot plus the post-cooling video of one nodule site.
struct ThermalSequence {
  ThermalFrame precool;
  std::vector<ThermalFrame> frames;
  double nominal_rate = 1.0;  // Hz

  int width() const { return precool.width; }
  int height() const { return precool.height; }

  /// Throws DimensionMismatch / InvalidTemperature / NonMonotonicTimestamps.
  void validate() const;
};

struct NoduleAnnotation {
  std::string nodule_id;
  Point2 point;                     // precool frame coordinates
  std::vector<Point2> roi_polygon;  // optional; empty when absent

  friend bool operator==(const NoduleAnnotation&, const NoduleAnnotation&) = default;
};

enum class Label { Viable, Nonviable, Unknown };
enum class Provenance { Real, Phantom };

std::string_view to_string(Label label);
std::string_view to_string(Provenance provenance);
Label parse_label(std::string_view text);
Provenance parse_provenance(std::string_view text);

struct CaseRecord {
  std::string case_id;
  std::string participant_id;
  std::string sequence_path = "frames.bin";
  std::vector<NoduleAnnotation> annotations;
  Label label = Label::Unknown;
  Provenance provenance = Provenance::Real;

  /// Checks annotation invariants against the frame size.
  void validate(int width, int height) const;
};

/// Binary raster; 1 marks a set pixel. Also used for validity masks.
struct RoiMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  RoiMask() = default;
  RoiMask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill) {}

  bool at(int row, int col) const { return bits[static_cast<std::size_t>(row) * width + col] != 0; }
  std::uint8_t& at(int row, int col) { return bits[static_cast<std::size_t>(row) * width + col]; }
  std::size_t count() const;

  friend bool operator==(const RoiMask&, const RoiMask&) = default;
};

struct LoadedCase {
  CaseRecord record;
  ThermalSequence sequence;
};

inline constexpr std::string_view kManifestName = "case.json";
inline constexpr std::string_view kPayloadName = "frames.bin";
/// frames.bin header: "TVFRAMES" magic, then u32 version, width, height, frame count.
inline constexpr std::size_t kPayloadHeaderBytes = 24;

LoadedCase read_case(const std::filesystem::path& dir);

/// Reads only the manifest (no payload); for listing and annotation edits.
CaseRecord read_manifest(const std::filesystem::path& dir);

void write_case(const CaseRecord& record, const ThermalSequence& sequence,
                const std::filesystem::path& dir);

/// Rewrites the annotation list in case.json, leaving the payload untouched.
void write_annotations(const std::filesystem::path& dir,
                       const std::vector<NoduleAnnotation>& annotations);

/// JSON array of {nodule_id, point: [x, y], polygon: [[x, y], ...]}, the
/// same layout used inside case.json.
std::string annotations_json(const std::vector<NoduleAnnotation>& annotations);
/// Accepts that array or an object wrapping it under "annotations". Throws
/// InvalidAnnotation on malformed input (geometry is checked separately).
std::vector<NoduleAnnotation> parse_annotations(std::string_view text);

std::vector<std::uint8_t> encode_payload(const ThermalSequence& sequence);
std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// 1 Hz view: frames averaged per pixel in buckets [k - 0.5, k + 0.5) s,
/// k = 0..round(last timestamp). Empty buckets take the nearest frame in time.
ThermalSequence decimate_to_1hz(const ThermalSequence& sequence);

void write_pgm(const RoiMask& mask, const std::filesystem::path& path);
RoiMask read_pgm(const std::filesystem::path& path);

// Polygons (shared by annotation handling, manual ROIs and the gateway).

double polygon_area(std::span<const Point2> polygon);  // signed, shoelace
bool is_simple_polygon(std::span<const Point2> polygon);
bool point_in_polygon(std::span<const Point2> polygon, Point2 p);  // even-odd

/// Sets every pixel whose center lies inside the polygon (even-odd rule).
/// Throws DegeneratePolygon for fewer than 3 vertices or area below 1 px.
RoiMask rasterize_polygon(std::span<const Point2> polygon, int width, int height);

}  // namespace thermoviab
