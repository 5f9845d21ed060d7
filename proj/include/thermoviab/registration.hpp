#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

enum class WarpKind { Translation, Euclidean, Affine };

std::string_view to_string(WarpKind kind);
WarpKind parse_warp_kind(std::string_view text);

/// 2x3 geometric warp [a b tx; c d ty] mapping reference coordinates into the
/// moving image: aligned(x) = moving(W(x)).
struct WarpModel {
  WarpKind kind = WarpKind::Affine;
  std::array<double, 6> matrix{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
  double rho = 1.0;
  int iterations = 0;
  bool converged = false;

  static WarpModel identity(WarpKind kind = WarpKind::Affine) { return WarpModel{kind}; }
  static WarpModel translation(double tx, double ty) {
    WarpModel w{WarpKind::Translation};
    w.matrix = {1.0, 0.0, tx, 0.0, 1.0, ty};
    return w;
  }
  double tx() const { return matrix[2]; }
  double ty() const { return matrix[5]; }
};

Point2 apply_warp_to_point(const WarpModel& warp, Point2 p);

/// Closed-form inverse. Throws NonInvertibleWarp when |det| < 1e-12.
WarpModel invert_warp(const WarpModel& warp);
Point2 apply_inverse_warp_to_point(const WarpModel& warp, Point2 p);

/// A resampled frame; pixels whose source fell outside the moving image are
/// zero-filled and cleared in `valid`.
struct AlignedFrame {
  ThermalFrame frame;
  RoiMask valid;
};

/// Bilinear resampling aligned(x) = moving(W(x)).
AlignedFrame resample(const ThermalFrame& moving, const WarpModel& warp);

struct EccConfig {
  int max_iterations = 100;
  double epsilon = 1e-5;        // on the parameter-update norm
  std::optional<RoiMask> mask;  // correlation support in reference coordinates
  int pyramid_levels = 2;
  bool smoothing = true;  // binomial pre-blur of both images at every level
};

/// Per-level log of accepted iterations (rho after each accepted step).
struct EccTrace {
  std::vector<std::vector<double>> accepted_rho;
};

/// Maximizes the enhanced correlation coefficient between `reference` and the
/// warped `moving` frame. Errors: FlatImage, Diverged.
WarpModel ecc_align(const ThermalFrame& reference, const ThermalFrame& moving, WarpKind kind,
                    const EccConfig& config = {}, const std::optional<WarpModel>& init = std::nullopt,
                    EccTrace* trace = nullptr);

struct AlignConfig {
  WarpKind frame_kind = WarpKind::Euclidean;
  WarpKind precool_kind = WarpKind::Affine;
  EccConfig ecc;
  double review_rho = 0.9;
};

struct Stabilization {
  WarpModel precool;              // precool -> frame 0
  std::vector<WarpModel> frames;  // frame k -> frame 0; frames[0] is the identity
  bool review_required = false;

  double min_rho() const;
};

/// Aligns every frame and the precool image to frame 0. Each frame is aligned
/// independently against frame 0, seeded with the previous frame's warp.
Stabilization stabilize_sequence(const ThermalSequence& sequence, const AlignConfig& config = {});

/// One JSON object per line: {frame_index, kind, params[6], rho, iterations, converged};
/// the precool warp is logged with frame_index -1.
std::string warps_to_jsonl(const Stabilization& stabilization);
Stabilization warps_from_jsonl(std::string_view text, double review_rho = 0.9);

struct AlignedSequence {
  AlignedFrame precool;
  std::vector<AlignedFrame> frames;
};

AlignedSequence apply_stabilization(const ThermalSequence& sequence, const Stabilization& stabilization);

}  // namespace thermoviab
