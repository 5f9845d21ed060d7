#include "thermoviab/registration.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "thermoviab/error.hpp"

namespace thermoviab {

namespace {

struct Plane {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}
  double at(int row, int col) const { return v[static_cast<std::size_t>(row) * width + col]; }
  double& at(int row, int col) { return v[static_cast<std::size_t>(row) * width + col]; }
};

Plane to_plane(const ThermalFrame& f) {
  Plane p(f.width, f.height);
  std::copy(f.temps.begin(), f.temps.end(), p.v.begin());
  return p;
}

Plane downsample(const Plane& in) {
  Plane out(in.width / 2, in.height / 2);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      out.at(r, c) = 0.25 * (in.at(2 * r, 2 * c) + in.at(2 * r, 2 * c + 1) + in.at(2 * r + 1, 2 * c) +
                             in.at(2 * r + 1, 2 * c + 1));
    }
  }
  return out;
}

RoiMask downsample(const RoiMask& in) {
  RoiMask out(in.width / 2, in.height / 2);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      out.at(r, c) = in.at(2 * r, 2 * c) && in.at(2 * r, 2 * c + 1) && in.at(2 * r + 1, 2 * c) &&
                     in.at(2 * r + 1, 2 * c + 1);
    }
  }
  return out;
}

// Central differences in the interior, one-sided at the border.
void gradients(const Plane& img, Plane& gx, Plane& gy) {
  gx = Plane(img.width, img.height);
  gy = Plane(img.width, img.height);
  const int w = img.width;
  const int h = img.height;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (w > 1) {
        const int c0 = std::max(c - 1, 0);
        const int c1 = std::min(c + 1, w - 1);
        gx.at(r, c) = (img.at(r, c1) - img.at(r, c0)) / (c1 - c0);
      }
      if (h > 1) {
        const int r0 = std::max(r - 1, 0);
        const int r1 = std::min(r + 1, h - 1);
        gy.at(r, c) = (img.at(r1, c) - img.at(r0, c)) / (r1 - r0);
      }
    }
  }
}

// Bilinear sample at continuous coordinate (x, y); false when outside the
// convex hull of pixel centers.
struct Bilinear {
  std::size_t i00 = 0;
  std::size_t i01 = 0;
  std::size_t i10 = 0;
  std::size_t i11 = 0;
  double fx = 0.0;
  double fy = 0.0;

  bool locate(int width, int height, double x, double y) {
    const double u = x - 0.5;
    const double v = y - 0.5;
    if (!(u >= 0.0 && u <= width - 1 && v >= 0.0 && v <= height - 1)) return false;
    int u0 = static_cast<int>(u);
    int v0 = static_cast<int>(v);
    if (u0 > width - 2) u0 = std::max(width - 2, 0);
    if (v0 > height - 2) v0 = std::max(height - 2, 0);
    fx = u - u0;
    fy = v - v0;
    const int u1 = std::min(u0 + 1, width - 1);
    const int v1 = std::min(v0 + 1, height - 1);
    i00 = static_cast<std::size_t>(v0) * width + u0;
    i01 = static_cast<std::size_t>(v0) * width + u1;
    i10 = static_cast<std::size_t>(v1) * width + u0;
    i11 = static_cast<std::size_t>(v1) * width + u1;
    return true;
  }

  template <typename T>
  double sample(const std::vector<T>& data) const {
    const double top = (1.0 - fx) * data[i00] + fx * data[i01];
    const double bottom = (1.0 - fx) * data[i10] + fx * data[i11];
    return (1.0 - fy) * top + fy * bottom;
  }
};

int param_count(WarpKind kind) {
  switch (kind) {
    case WarpKind::Translation: return 2;
    case WarpKind::Euclidean: return 3;
    case WarpKind::Affine: return 6;
  }
  return 6;
}

std::vector<double> params_from_matrix(WarpKind kind, const std::array<double, 6>& m) {
  switch (kind) {
    case WarpKind::Translation: return {m[2], m[5]};
    case WarpKind::Euclidean: return {std::atan2(m[3], m[0]), m[2], m[5]};
    case WarpKind::Affine: return {m.begin(), m.end()};
  }
  return {};
}

std::array<double, 6> matrix_from_params(WarpKind kind, const std::vector<double>& p) {
  switch (kind) {
    case WarpKind::Translation: return {1.0, 0.0, p[0], 0.0, 1.0, p[1]};
    case WarpKind::Euclidean: {
      const double c = std::cos(p[0]);
      const double s = std::sin(p[0]);
      return {c, -s, p[1], s, c, p[2]};
    }
    case WarpKind::Affine: return {p[0], p[1], p[2], p[3], p[4], p[5]};
  }
  return {};
}

// Correlation drops smaller than this are noise around the optimum, not divergence.
constexpr double kRhoTolerance = 1e-4;
// The coarse level only seeds the fine level.
constexpr double kCoarseEpsilon = 1e-3;

// 5-tap binomial blur (sigma ~ 1 px), border replicated; applied to both
// images before alignment to tame sensor noise in the gradients.
Plane smooth(const Plane& in) {
  static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  Plane tmp(in.width, in.height);
  Plane out(in.width, in.height);
  for (int r = 0; r < in.height; ++r) {
    for (int c = 0; c < in.width; ++c) {
      double acc = 0.0;
      for (int o = -2; o <= 2; ++o) acc += k[o + 2] * in.at(r, std::clamp(c + o, 0, in.width - 1));
      tmp.at(r, c) = acc;
    }
  }
  for (int r = 0; r < in.height; ++r) {
    for (int c = 0; c < in.width; ++c) {
      double acc = 0.0;
      for (int o = -2; o <= 2; ++o) acc += k[o + 2] * tmp.at(std::clamp(r + o, 0, in.height - 1), c);
      out.at(r, c) = acc;
    }
  }
  return out;
}

struct SupportPixel {
  double x;
  double y;
  double t;
};

class EccLevel {
 public:
  EccLevel(const Plane& reference, const Plane& moving, const RoiMask* mask, WarpKind kind)
      : moving_(moving), kind_(kind), n_params_(param_count(kind)) {
    for (int r = 0; r < reference.height; ++r) {
      for (int c = 0; c < reference.width; ++c) {
        if (mask && !mask->at(r, c)) continue;
        support_.push_back({c + 0.5, r + 0.5, reference.at(r, c)});
      }
    }
    gradients(moving_, gx_, gy_);
    double mean = 0.0;
    for (const auto& s : support_) mean += s.t;
    mean /= std::max<std::size_t>(support_.size(), 1);
    double var = 0.0;
    for (const auto& s : support_) var += (s.t - mean) * (s.t - mean);
    if (support_.size() < 2 || var <= 0.0) fail(ErrorCode::FlatImage, "reference image has zero variance");
  }

  struct Stats {
    double rho = 0.0;
    std::vector<double> delta;
  };

  // Warps the moving image with matrix m; returns rho and, when requested,
  // the forward-additive ECC parameter update.
  Stats evaluate(const std::array<double, 6>& m, const std::vector<double>& params, bool want_update) {
    const std::size_t n = support_.size();
    warped_.resize(n);
    wgx_.resize(n);
    wgy_.resize(n);
    inside_.assign(n, 0);
    std::size_t count = 0;
    double sum_t = 0.0;
    double sum_i = 0.0;
    Bilinear bl;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = support_[k];
      const double wx = m[0] * s.x + m[1] * s.y + m[2];
      const double wy = m[3] * s.x + m[4] * s.y + m[5];
      if (!bl.locate(moving_.width, moving_.height, wx, wy)) continue;
      inside_[k] = 1;
      warped_[k] = bl.sample(moving_.v);
      if (want_update) {
        wgx_[k] = bl.sample(gx_.v);
        wgy_[k] = bl.sample(gy_.v);
      }
      sum_t += s.t;
      sum_i += warped_[k];
      ++count;
    }
    if (2 * count < n) fail(ErrorCode::Diverged, "warp maps more than half of the support out of bounds");
    const double mean_t = sum_t / count;
    const double mean_i = sum_i / count;

    const int P = n_params_;
    double h[6][6] = {};
    double pi[6] = {};
    double pt[6] = {};
    double img_norm2 = 0.0;
    double tmp_norm2 = 0.0;
    double corr = 0.0;
    double jac[6];
    const double theta = kind_ == WarpKind::Euclidean ? params[0] : 0.0;
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (std::size_t k = 0; k < n; ++k) {
      if (!inside_[k]) continue;
      const auto& s = support_[k];
      const double tz = s.t - mean_t;
      const double iz = warped_[k] - mean_i;
      img_norm2 += iz * iz;
      tmp_norm2 += tz * tz;
      corr += tz * iz;
      if (!want_update) continue;
      const double gx = wgx_[k];
      const double gy = wgy_[k];
      switch (kind_) {
        case WarpKind::Translation:
          jac[0] = gx;
          jac[1] = gy;
          break;
        case WarpKind::Euclidean:
          jac[0] = gx * (-st * s.x - ct * s.y) + gy * (ct * s.x - st * s.y);
          jac[1] = gx;
          jac[2] = gy;
          break;
        case WarpKind::Affine:
          jac[0] = gx * s.x;
          jac[1] = gx * s.y;
          jac[2] = gx;
          jac[3] = gy * s.x;
          jac[4] = gy * s.y;
          jac[5] = gy;
          break;
      }
      for (int a = 0; a < P; ++a) {
        pi[a] += jac[a] * iz;
        pt[a] += jac[a] * tz;
        for (int b = a; b < P; ++b) h[a][b] += jac[a] * jac[b];
      }
    }
    if (!(img_norm2 > 0.0)) fail(ErrorCode::FlatImage, "moving image has zero variance under the support");
    if (!(tmp_norm2 > 0.0)) fail(ErrorCode::FlatImage, "reference image has zero variance under the support");

    Stats out;
    out.rho = std::clamp(corr / std::sqrt(img_norm2 * tmp_norm2), -1.0, 1.0);
    if (!want_update) return out;

    Eigen::MatrixXd H(P, P);
    Eigen::VectorXd proj_i(P);
    Eigen::VectorXd proj_t(P);
    for (int a = 0; a < P; ++a) {
      proj_i[a] = pi[a];
      proj_t[a] = pt[a];
      for (int b = 0; b < P; ++b) H(a, b) = a <= b ? h[a][b] : h[b][a];
    }
    const Eigen::LDLT<Eigen::MatrixXd> solver(H);
    if (solver.info() != Eigen::Success || !solver.isPositive()) {
      fail(ErrorCode::Diverged, "singular ECC Hessian");
    }
    const Eigen::VectorXd proj_i_h = solver.solve(proj_i);
    const double lambda_n = img_norm2 - proj_i.dot(proj_i_h);
    const double lambda_d = corr - proj_t.dot(proj_i_h);
    if (!(lambda_d > 0.0)) fail(ErrorCode::Diverged, "ECC correlation became non-positive");
    const double lambda = lambda_n / lambda_d;
    const Eigen::VectorXd error_proj = lambda * proj_t - proj_i;
    const Eigen::VectorXd delta = solver.solve(error_proj);
    out.delta.assign(delta.data(), delta.data() + P);
    return out;
  }

  // Forward-additive ECC iterations. The step is halved whenever the
  // correlation drops, which damps the two-cycles bilinear interpolation
  // produces near the optimum. The best-correlation warp is returned.
  WarpModel solve(WarpModel warp, int max_iterations, double epsilon, std::vector<double>* log) {
    std::vector<double> params = params_from_matrix(kind_, warp.matrix);
    std::array<double, 6> m = matrix_from_params(kind_, params);
    Stats current = evaluate(m, params, true);
    if (log) log->push_back(current.rho);
    std::array<double, 6> best_m = m;
    double best_rho = current.rho;
    double previous_rho = current.rho;
    double step = 1.0;
    int decreases = 0;
    int iterations = 0;
    bool converged = false;
    while (iterations < max_iterations) {
      double norm2 = 0.0;
      for (double d : current.delta) norm2 += d * d;
      if (step * std::sqrt(norm2) < epsilon) {
        converged = true;
        break;
      }
      ++iterations;
      for (std::size_t i = 0; i < params.size(); ++i) params[i] += step * current.delta[i];
      m = matrix_from_params(kind_, params);
      current = evaluate(m, params, true);
      if (current.rho > best_rho) {
        best_rho = current.rho;
        best_m = m;
        if (log) log->push_back(current.rho);
      }
      step = current.rho < previous_rho ? 0.5 * step : std::min(1.0, 1.5 * step);
      decreases = current.rho < previous_rho - kRhoTolerance ? decreases + 1 : 0;
      if (decreases >= 5) fail(ErrorCode::Diverged, "correlation decreased for 5 consecutive iterations");
      previous_rho = current.rho;
    }
    warp.matrix = best_m;
    warp.rho = best_rho;
    warp.iterations = iterations;
    warp.converged = converged;
    return warp;
  }

 private:
  const Plane& moving_;
  WarpKind kind_;
  int n_params_;
  std::vector<SupportPixel> support_;
  Plane gx_;
  Plane gy_;
  std::vector<double> warped_;
  std::vector<double> wgx_;
  std::vector<double> wgy_;
  std::vector<std::uint8_t> inside_;
};

}  // namespace

std::string_view to_string(WarpKind kind) {
  switch (kind) {
    case WarpKind::Translation: return "translation";
    case WarpKind::Euclidean: return "euclidean";
    case WarpKind::Affine: return "affine";
  }
  return "affine";
}

WarpKind parse_warp_kind(std::string_view text) {
  if (text == "translation") return WarpKind::Translation;
  if (text == "euclidean") return WarpKind::Euclidean;
  if (text == "affine") return WarpKind::Affine;
  fail(ErrorCode::InvalidSpec, "unknown warp kind '" + std::string(text) + "'");
}

Point2 apply_warp_to_point(const WarpModel& warp, Point2 p) {
  const auto& m = warp.matrix;
  return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
}

WarpModel invert_warp(const WarpModel& warp) {
  const auto& m = warp.matrix;
  const double det = m[0] * m[4] - m[1] * m[3];
  if (std::abs(det) < 1e-12) fail(ErrorCode::NonInvertibleWarp, "warp determinant is zero");
  WarpModel inv = warp;
  const double a = m[4] / det;
  const double b = -m[1] / det;
  const double c = -m[3] / det;
  const double d = m[0] / det;
  inv.matrix = {a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])};
  return inv;
}

Point2 apply_inverse_warp_to_point(const WarpModel& warp, Point2 p) {
  return apply_warp_to_point(invert_warp(warp), p);
}

AlignedFrame resample(const ThermalFrame& moving, const WarpModel& warp) {
  AlignedFrame out{ThermalFrame(moving.width, moving.height, moving.timestamp), RoiMask(moving.width, moving.height)};
  const auto& m = warp.matrix;
  const bool identity = m == std::array<double, 6>{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
  if (identity) {
    out.frame.temps = moving.temps;
    std::fill(out.valid.bits.begin(), out.valid.bits.end(), 1);
    return out;
  }
  Bilinear bl;
  for (int r = 0; r < moving.height; ++r) {
    for (int c = 0; c < moving.width; ++c) {
      const double x = c + 0.5;
      const double y = r + 0.5;
      if (!bl.locate(moving.width, moving.height, m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])) continue;
      out.frame.at(r, c) = static_cast<float>(bl.sample(moving.temps));
      out.valid.at(r, c) = 1;
    }
  }
  return out;
}

WarpModel ecc_align(const ThermalFrame& reference, const ThermalFrame& moving, WarpKind kind,
                    const EccConfig& config, const std::optional<WarpModel>& init, EccTrace* trace) {
  if (reference.width != moving.width || reference.height != moving.height) {
    fail(ErrorCode::DimensionMismatch, "ECC frames differ in size");
  }
  if (config.mask && (config.mask->width != reference.width || config.mask->height != reference.height)) {
    fail(ErrorCode::DimensionMismatch, "ECC mask differs in size from the frames");
  }

  std::vector<Plane> refs{to_plane(reference)};
  std::vector<Plane> movs{to_plane(moving)};
  std::vector<std::optional<RoiMask>> masks{config.mask};
  for (int level = 1; level < config.pyramid_levels; ++level) {
    if (refs.back().width < 32 || refs.back().height < 32) break;
    refs.push_back(downsample(refs.back()));
    movs.push_back(downsample(movs.back()));
    masks.push_back(masks.back() ? std::optional<RoiMask>(downsample(*masks.back())) : std::nullopt);
  }

  WarpModel warp = init.value_or(WarpModel::identity(kind));
  warp.kind = kind;
  if (kind == WarpKind::Translation) {
    warp.matrix = {1.0, 0.0, warp.matrix[2], 0.0, 1.0, warp.matrix[5]};
  } else if (kind == WarpKind::Euclidean) {
    warp.matrix = matrix_from_params(kind, params_from_matrix(kind, warp.matrix));
  }
  const int levels = static_cast<int>(refs.size());
  const double coarse = std::ldexp(1.0, -(levels - 1));
  warp.matrix[2] *= coarse;
  warp.matrix[5] *= coarse;

  if (trace) trace->accepted_rho.clear();
  for (int level = levels - 1; level >= 0; --level) {
    const RoiMask* mask = masks[level] ? &*masks[level] : nullptr;
    const Plane ref = config.smoothing ? smooth(refs[level]) : refs[level];
    const Plane mov = config.smoothing ? smooth(movs[level]) : movs[level];
    EccLevel solver(ref, mov, mask, kind);
    std::vector<double> log;
    const double epsilon = level > 0 ? std::max(config.epsilon, kCoarseEpsilon) : config.epsilon;
    warp = solver.solve(warp, config.max_iterations, epsilon, trace ? &log : nullptr);
    if (trace) trace->accepted_rho.push_back(std::move(log));
    if (level > 0) {
      warp.matrix[2] *= 2.0;
      warp.matrix[5] *= 2.0;
    }
  }
  return warp;
}

double Stabilization::min_rho() const {
  double lo = precool.rho;
  for (const auto& w : frames) lo = std::min(lo, w.rho);
  return lo;
}

Stabilization stabilize_sequence(const ThermalSequence& sequence, const AlignConfig& config) {
  if (sequence.frames.size() < 2) fail(ErrorCode::DimensionMismatch, "stabilization needs at least two frames");
  const ThermalFrame& reference = sequence.frames.front();
  Stabilization out;
  WarpModel seed = WarpModel::identity(config.frame_kind);
  seed.converged = true;
  out.frames.push_back(seed);
  for (std::size_t k = 1; k < sequence.frames.size(); ++k) {
    try {
      seed = ecc_align(reference, sequence.frames[k], config.frame_kind, config.ecc, seed);
    } catch (const Error& e) {
      fail(e.code(), "frame " + std::to_string(k) + ": " + e.what());
    }
    out.frames.push_back(seed);
  }
  try {
    out.precool = ecc_align(reference, sequence.precool, config.precool_kind, config.ecc);
  } catch (const Error& e) {
    fail(e.code(), std::string("precool: ") + e.what());
  }
  out.review_required = out.min_rho() < config.review_rho;
  return out;
}

namespace {

nlohmann::json warp_json(int index, const WarpModel& w) {
  return {{"frame_index", index},   {"kind", to_string(w.kind)},         {"params", w.matrix},
          {"rho", w.rho},           {"iterations", w.iterations},        {"converged", w.converged}};
}

WarpModel warp_from_json(const nlohmann::json& j) {
  WarpModel w;
  w.kind = parse_warp_kind(j.at("kind").get<std::string>());
  w.matrix = j.at("params").get<std::array<double, 6>>();
  w.rho = j.at("rho").get<double>();
  w.iterations = j.at("iterations").get<int>();
  w.converged = j.at("converged").get<bool>();
  return w;
}

}  // namespace

std::string warps_to_jsonl(const Stabilization& s) {
  std::string out = warp_json(-1, s.precool).dump() + "\n";
  for (std::size_t k = 0; k < s.frames.size(); ++k) out += warp_json(static_cast<int>(k), s.frames[k]).dump() + "\n";
  return out;
}

Stabilization warps_from_jsonl(std::string_view text, double review_rho) {
  Stabilization s;
  bool have_precool = false;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::IoFailure, std::string("malformed warp log: ") + e.what());
    }
    const int index = j.at("frame_index").get<int>();
    if (index < 0) {
      s.precool = warp_from_json(j);
      have_precool = true;
    } else {
      if (index != static_cast<int>(s.frames.size())) fail(ErrorCode::IoFailure, "warp log out of order");
      s.frames.push_back(warp_from_json(j));
    }
  }
  if (!have_precool || s.frames.empty()) fail(ErrorCode::IoFailure, "warp log incomplete");
  s.review_required = s.min_rho() < review_rho;
  return s;
}

AlignedSequence apply_stabilization(const ThermalSequence& sequence, const Stabilization& stabilization) {
  if (stabilization.frames.size() != sequence.frames.size()) {
    fail(ErrorCode::DimensionMismatch, "warp count does not match the frame count");
  }
  AlignedSequence out;
  out.precool = resample(sequence.precool, stabilization.precool);
  out.frames.reserve(sequence.frames.size());
  for (std::size_t k = 0; k < sequence.frames.size(); ++k) {
    out.frames.push_back(resample(sequence.frames[k], stabilization.frames[k]));
  }
  return out;
}

}  // namespace thermoviab
