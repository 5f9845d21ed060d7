#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

/// Synthetic localized-cooling case. Temperatures in deg C, distances in
/// pixels, times in seconds. Effect sizes are plausible placeholders, not
/// measured values.
struct PhantomSpec {
  int width = 320;
  int height = 240;
  double skin_temp = 33.0;
  double gradient_x = 0.3;  // change across the full frame width
  double gradient_y = -0.2;
  int blob_count = 12;  // smooth skin structure, derived from the seed
  double blob_amplitude = 0.5;
  Point2 disk_center{160.0, 120.0};
  double disk_radius = 60.0;  // ~5 cm at 12 px/cm
  double cooling_depth = 2.0;
  double skin_tau = 45.0;
  Point2 nodule_center{172.0, 114.0};
  double nodule_radius = 8.0;
  bool viable = true;
  double viable_offset = 0.4;  // equilibrium excess of a viable nodule
  double viable_tau = 20.0;    // faster recovery of a viable nodule
  double noise_sigma = 0.04;
  double jitter = 2.0;  // per-frame translation amplitude, uniform in [-j, j]
  double duration = 120.0;
  double frame_rate = 1.0;
  double precool_time = -30.0;
  std::uint64_t seed = 7;
  std::string case_id = "phantom-0000";
  std::string participant_id = "P000";

  /// Throws InvalidSpec.
  void validate() const;
};

struct JitterEntry {
  double t = 0.0;
  double dx = 0.0;
  double dy = 0.0;
};

/// Ground truth kept out of the pipeline inputs.
struct PhantomTruth {
  RoiMask mask;  // cooled disk in frame-0 coordinates
  std::vector<JitterEntry> jitter;  // precool first, then one per video frame
  PhantomSpec spec;
};

struct PhantomCase {
  CaseRecord record;
  ThermalSequence sequence;
  PhantomTruth truth;
};

/// Noise-free, jitter-free closed-form field at world position p. Pass a
/// negative t for the precool image.
class PhantomField {
 public:
  explicit PhantomField(const PhantomSpec& spec);

  double base(Point2 p) const;
  double temperature(Point2 p, double t) const;
  bool in_disk(Point2 p) const;
  bool in_nodule(Point2 p) const;

  /// Renders the field for a frame translated by (dx, dy): pixel p shows the
  /// world point p - (dx, dy).
  void render(double t, double dx, double dy, std::vector<float>& out) const;

 private:
  struct Blob {
    Point2 center;
    double sigma;
    double amplitude;
  };
  PhantomSpec spec_;
  std::vector<Blob> blobs_;
};

PhantomCase generate_case(const PhantomSpec& spec);

void write_phantom_case(const PhantomCase& phantom, const std::filesystem::path& dir);
PhantomTruth read_truth(const std::filesystem::path& dir);

/// Per-case specs of a study: randomized base temperature (+-1 C), disk
/// radius (+-20%), placements and viable offsets in [0.25, 0.6] C.
std::vector<PhantomSpec> study_specs(int n_cases, double viable_fraction, std::uint64_t seed,
                                     const PhantomSpec& base = {});

/// Writes every case plus study.json; returns the case ids.
std::vector<std::string> generate_study(const std::filesystem::path& dir, int n_cases, double viable_fraction,
                                        std::uint64_t seed, const PhantomSpec& base = {});

}  // namespace thermoviab
