#include "thermoviab/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "thermoviab/error.hpp"
#include "thermoviab/rng.hpp"

namespace thermoviab {

// ---------------------------------------------------------------------------
// Classical segmenter

double otsu_threshold(const std::vector<float>& values) {
  if (values.empty()) fail(ErrorCode::NoColdRegion, "empty frame");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) return lo;  // nothing lies strictly below

  constexpr int kBins = 256;
  const double width = (hi - lo) / kBins;
  std::array<double, kBins> hist{};
  for (float v : values) {
    const int b = std::min(static_cast<int>((v - lo) / width), kBins - 1);
    hist[b] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += b * hist[b];

  double w0 = 0.0;
  double sum0 = 0.0;
  double best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  // Lower class = bins 0..best_bin, i.e. values below the upper edge.
  return lo + (best_bin + 1) * width;
}

std::size_t keep_largest_component(RoiMask& mask) {
  const int w = mask.width;
  const int h = mask.height;
  std::vector<int> label(mask.bits.size(), 0);
  std::vector<std::size_t> sizes{0};
  std::vector<int> stack;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * w + c;
      if (!mask.bits[idx] || label[idx]) continue;
      const int id = static_cast<int>(sizes.size());
      std::size_t size = 0;
      label[idx] = id;
      stack.push_back(static_cast<int>(idx));
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        ++size;
        const int cr = cur / w;
        const int cc = cur % w;
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = cr + dr;
            const int nc = cc + dc;
            if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
            const std::size_t n = static_cast<std::size_t>(nr) * w + nc;
            if (mask.bits[n] && !label[n]) {
              label[n] = id;
              stack.push_back(static_cast<int>(n));
            }
          }
        }
      }
      sizes.push_back(size);
    }
  }
  int best = 0;
  for (std::size_t id = 1; id < sizes.size(); ++id) {
    if (sizes[id] > sizes[best]) best = static_cast<int>(id);
  }
  for (std::size_t i = 0; i < label.size(); ++i) mask.bits[i] = (best != 0 && label[i] == best) ? 1 : 0;
  return sizes[best];
}

RoiMask close3x3(const RoiMask& mask) {
  const int w = mask.width;
  const int h = mask.height;
  RoiMask dilated(w, h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      bool any = false;
      for (int dr = -1; dr <= 1 && !any; ++dr) {
        for (int dc = -1; dc <= 1 && !any; ++dc) {
          const int nr = r + dr;
          const int nc = c + dc;
          any = nr >= 0 && nr < h && nc >= 0 && nc < w && mask.at(nr, nc);
        }
      }
      dilated.at(r, c) = any;
    }
  }
  RoiMask closed(w, h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      bool all = true;
      for (int dr = -1; dr <= 1 && all; ++dr) {
        for (int dc = -1; dc <= 1 && all; ++dc) {
          const int nr = r + dr;
          const int nc = c + dc;
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          all = dilated.at(nr, nc);
        }
      }
      closed.at(r, c) = all;
    }
  }
  return closed;
}

RoiMask fill_holes(const RoiMask& mask) {
  const int w = mask.width;
  const int h = mask.height;
  std::vector<std::uint8_t> outside(mask.bits.size(), 0);
  std::vector<int> stack;
  auto seed = [&](int r, int c) {
    const std::size_t idx = static_cast<std::size_t>(r) * w + c;
    if (!mask.bits[idx] && !outside[idx]) {
      outside[idx] = 1;
      stack.push_back(static_cast<int>(idx));
    }
  };
  for (int c = 0; c < w; ++c) {
    seed(0, c);
    seed(h - 1, c);
  }
  for (int r = 0; r < h; ++r) {
    seed(r, 0);
    seed(r, w - 1);
  }
  while (!stack.empty()) {
    const int cur = stack.back();
    stack.pop_back();
    const int r = cur / w;
    const int c = cur % w;
    if (r > 0) seed(r - 1, c);
    if (r + 1 < h) seed(r + 1, c);
    if (c > 0) seed(r, c - 1);
    if (c + 1 < w) seed(r, c + 1);
  }
  RoiMask out(w, h);
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = outside[i] ? 0 : 1;
  return out;
}

RoiMask postprocess_mask(const RoiMask& raw) {
  RoiMask mask = raw;
  keep_largest_component(mask);
  return fill_holes(close3x3(mask));
}

RoiMask segment_cold_region(const ThermalFrame& frame0) {
  const double threshold = otsu_threshold(frame0.temps);
  RoiMask raw(frame0.width, frame0.height);
  for (std::size_t i = 0; i < raw.bits.size(); ++i) raw.bits[i] = frame0.temps[i] < threshold ? 1 : 0;
  const std::size_t largest = keep_largest_component(raw);
  if (largest < 100) {
    fail(ErrorCode::NoColdRegion, "largest cold component has " + std::to_string(largest) + " px (< 100)");
  }
  return fill_holes(close3x3(raw));
}

double dice(const RoiMask& a, const RoiMask& b) {
  if (a.width != b.width || a.height != b.height) fail(ErrorCode::DimensionMismatch, "dice: mask sizes differ");
  std::size_t na = 0;
  std::size_t nb = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0;
    const bool y = b.bits[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

// ---------------------------------------------------------------------------
// Network primitives

namespace {

Tensor conv_forward(const Conv2d& L, const Tensor& x) {
  const int oh = (x.h - 1) / L.stride + 1;
  const int ow = (x.w - 1) / L.stride + 1;
  Tensor y(L.out, oh, ow);
  for (int o = 0; o < L.out; ++o) {
    std::fill_n(&y.at(o, 0, 0), static_cast<std::size_t>(oh) * ow, L.bias[o]);
    for (int i = 0; i < L.in; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double wt = L.weight[((static_cast<std::size_t>(o) * L.in + i) * 3 + ky) * 3 + kx];
          for (int r = 0; r < oh; ++r) {
            const int sr = r * L.stride + ky - 1;
            if (sr < 0 || sr >= x.h) continue;
            const double* src = &x.v[(static_cast<std::size_t>(i) * x.h + sr) * x.w];
            double* dst = &y.at(o, r, 0);
            for (int c = 0; c < ow; ++c) {
              const int sc = c * L.stride + kx - 1;
              if (sc < 0 || sc >= x.w) continue;
              dst[c] += wt * src[sc];
            }
          }
        }
      }
    }
  }
  return y;
}

// Accumulates weight/bias gradients into G and returns dL/dx.
Tensor conv_backward(const Conv2d& L, const Tensor& x, const Tensor& gy, Conv2d& G) {
  Tensor gx(x.c, x.h, x.w);
  for (int o = 0; o < L.out; ++o) {
    double bsum = 0.0;
    for (std::size_t k = 0; k < static_cast<std::size_t>(gy.h) * gy.w; ++k) bsum += gy.v[o * gy.h * gy.w + k];
    G.bias[o] += bsum;
    for (int i = 0; i < L.in; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * L.in + i) * 3 + ky) * 3 + kx;
          const double wt = L.weight[widx];
          double wsum = 0.0;
          for (int r = 0; r < gy.h; ++r) {
            const int sr = r * L.stride + ky - 1;
            if (sr < 0 || sr >= x.h) continue;
            const double* src = &x.v[(static_cast<std::size_t>(i) * x.h + sr) * x.w];
            double* gsrc = &gx.v[(static_cast<std::size_t>(i) * x.h + sr) * x.w];
            const double* g = &gy.v[(static_cast<std::size_t>(o) * gy.h + r) * gy.w];
            for (int c = 0; c < gy.w; ++c) {
              const int sc = c * L.stride + kx - 1;
              if (sc < 0 || sc >= x.w) continue;
              wsum += g[c] * src[sc];
              gsrc[sc] += g[c] * wt;
            }
          }
          G.weight[widx] += wsum;
        }
      }
    }
  }
  return gx;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.v) v = v > 0.0 ? v : 0.0;
}

// Gradient through ReLU given the activated output.
void relu_backward(const Tensor& activated, Tensor& g) {
  for (std::size_t i = 0; i < g.v.size(); ++i) {
    if (!(activated.v[i] > 0.0)) g.v[i] = 0.0;
  }
}

Tensor upsample2(const Tensor& x) {
  Tensor y(x.c, x.h * 2, x.w * 2);
  for (int ch = 0; ch < x.c; ++ch) {
    for (int r = 0; r < y.h; ++r) {
      for (int c = 0; c < y.w; ++c) y.at(ch, r, c) = x.at(ch, r / 2, c / 2);
    }
  }
  return y;
}

Tensor upsample2_backward(const Tensor& gy) {
  Tensor gx(gy.c, gy.h / 2, gy.w / 2);
  for (int ch = 0; ch < gy.c; ++ch) {
    for (int r = 0; r < gy.h; ++r) {
      for (int c = 0; c < gy.w; ++c) gx.at(ch, r / 2, c / 2) += gy.at(ch, r, c);
    }
  }
  return gx;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor y(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return y;
}

void split(const Tensor& g, Tensor& ga, Tensor& gb, int a_channels) {
  ga = Tensor(a_channels, g.h, g.w);
  gb = Tensor(g.c - a_channels, g.h, g.w);
  std::copy(g.v.begin(), g.v.begin() + static_cast<std::ptrdiff_t>(ga.v.size()), ga.v.begin());
  std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(ga.v.size()), g.v.end(), gb.v.begin());
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

Conv2d make_layer(std::string name, int in, int out, int stride, Rng& rng) {
  Conv2d L{std::move(name), in, out, stride, {}, {}};
  L.weight.resize(static_cast<std::size_t>(out) * in * 9);
  L.bias.assign(static_cast<std::size_t>(out), 0.0);
  const double bound = std::sqrt(6.0 / (in * 9.0));
  for (double& w : L.weight) w = rng.uniform(-bound, bound);
  return L;
}

Conv2d zero_like(const Conv2d& L) {
  Conv2d G = L;
  std::fill(G.weight.begin(), G.weight.end(), 0.0);
  std::fill(G.bias.begin(), G.bias.end(), 0.0);
  return G;
}

// Activations kept for the backward pass.
struct ForwardCache {
  Tensor x, e1, e2, e3, u3, d3, c3, u2, d2, c2, u1, d1, c1, logits;
};

enum Layer { kEnc1, kEnc2, kEnc3, kDec3, kDec2, kDec1, kHead };

ForwardCache run_forward(const std::vector<Conv2d>& L, const Tensor& input) {
  if (input.c != 1 || input.h % 8 != 0 || input.w % 8 != 0 || input.h == 0 || input.w == 0) {
    fail(ErrorCode::DimensionMismatch, "segmenter input must be 1 channel with sides divisible by 8");
  }
  ForwardCache f;
  f.x = input;
  f.e1 = conv_forward(L[kEnc1], f.x);
  relu_inplace(f.e1);
  f.e2 = conv_forward(L[kEnc2], f.e1);
  relu_inplace(f.e2);
  f.e3 = conv_forward(L[kEnc3], f.e2);
  relu_inplace(f.e3);
  f.u3 = upsample2(f.e3);
  f.d3 = conv_forward(L[kDec3], f.u3);
  relu_inplace(f.d3);
  f.c3 = concat(f.d3, f.e2);
  f.u2 = upsample2(f.c3);
  f.d2 = conv_forward(L[kDec2], f.u2);
  relu_inplace(f.d2);
  f.c2 = concat(f.d2, f.e1);
  f.u1 = upsample2(f.c2);
  f.d1 = conv_forward(L[kDec1], f.u1);
  relu_inplace(f.d1);
  f.c1 = concat(f.d1, f.x);
  f.logits = conv_forward(L[kHead], f.c1);
  return f;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Flattened views over all parameters, in layer order (weights then bias).
template <typename Fn>
void for_each_param(std::vector<Conv2d>& layers, Fn&& fn) {
  std::size_t k = 0;
  for (auto& L : layers) {
    for (double& w : L.weight) fn(k++, w);
    for (double& b : L.bias) fn(k++, b);
  }
}

constexpr char kCheckpointMagic[8] = {'T', 'V', 'N', 'E', 'T', '0', '0', '1'};

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) ||
      !(adam_epsilon > 0.0) || batch_size <= 0 || epochs < 0) {
    fail(ErrorCode::InvalidSpec, "segmenter training config has a non-positive field");
  }
}

SegmenterNet::SegmenterNet(std::array<int, 3> widths, std::uint64_t seed) : widths_(widths), seed_(seed) {
  for (int w : widths) {
    if (w <= 0) fail(ErrorCode::InvalidSpec, "segmenter widths must be positive");
  }
  Rng rng(seed);
  const auto [w1, w2, w3] = widths;
  layers_.push_back(make_layer("enc1", 1, w1, 2, rng));
  layers_.push_back(make_layer("enc2", w1, w2, 2, rng));
  layers_.push_back(make_layer("enc3", w2, w3, 2, rng));
  layers_.push_back(make_layer("dec3", w3, w2, 1, rng));
  layers_.push_back(make_layer("dec2", 2 * w2, w1, 1, rng));
  layers_.push_back(make_layer("dec1", 2 * w1, w1, 1, rng));
  layers_.push_back(make_layer("head", w1 + 1, 1, 1, rng));
}

std::size_t SegmenterNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& L : layers_) n += L.weight.size() + L.bias.size();
  return n;
}

Tensor SegmenterNet::forward_logits(const Tensor& input) const { return run_forward(layers_, input).logits; }

double SegmenterNet::loss_and_gradients(const Tensor& input, const std::vector<double>& target,
                                        std::vector<Conv2d>& grads) const {
  const ForwardCache f = run_forward(layers_, input);
  if (target.size() != f.logits.v.size()) fail(ErrorCode::DimensionMismatch, "target size differs from input");
  if (grads.size() != layers_.size()) {
    grads.clear();
    for (const auto& L : layers_) grads.push_back(zero_like(L));
  }
  // Entries with a negative target (padding) are ignored.
  std::size_t n = 0;
  for (double t : target) n += t >= 0.0;
  if (n == 0) fail(ErrorCode::EmptyDataset, "no labelled pixels");

  double loss = 0.0;
  Tensor g(1, f.logits.h, f.logits.w);
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] < 0.0) continue;
    const double z = f.logits.v[i];
    const double y = target[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    g.v[i] = (sigmoid(z) - y) / static_cast<double>(n);
  }
  loss /= static_cast<double>(n);

  Tensor gc1 = conv_backward(layers_[kHead], f.c1, g, grads[kHead]);
  Tensor gd1, gx;
  split(gc1, gd1, gx, f.d1.c);
  relu_backward(f.d1, gd1);
  Tensor gu1 = conv_backward(layers_[kDec1], f.u1, gd1, grads[kDec1]);
  Tensor gc2 = upsample2_backward(gu1);
  Tensor gd2, ge1;
  split(gc2, gd2, ge1, f.d2.c);
  relu_backward(f.d2, gd2);
  Tensor gu2 = conv_backward(layers_[kDec2], f.u2, gd2, grads[kDec2]);
  Tensor gc3 = upsample2_backward(gu2);
  Tensor gd3, ge2;
  split(gc3, gd3, ge2, f.d3.c);
  relu_backward(f.d3, gd3);
  Tensor gu3 = conv_backward(layers_[kDec3], f.u3, gd3, grads[kDec3]);
  Tensor ge3 = upsample2_backward(gu3);
  relu_backward(f.e3, ge3);
  add_into(ge2, conv_backward(layers_[kEnc3], f.e2, ge3, grads[kEnc3]));
  relu_backward(f.e2, ge2);
  add_into(ge1, conv_backward(layers_[kEnc2], f.e1, ge2, grads[kEnc2]));
  relu_backward(f.e1, ge1);
  conv_backward(layers_[kEnc1], f.x, ge1, grads[kEnc1]);
  return loss;
}

Tensor prepare_input(const ThermalFrame& frame) {
  const int ph = (frame.height + 7) / 8 * 8;
  const int pw = (frame.width + 7) / 8 * 8;
  double mean = 0.0;
  for (float v : frame.temps) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(frame.temps.size(), 1));
  double var = 0.0;
  for (float v : frame.temps) var += (v - mean) * (v - mean);
  var /= static_cast<double>(std::max<std::size_t>(frame.temps.size(), 1));
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  Tensor t(1, ph, pw);
  for (int r = 0; r < frame.height; ++r) {
    for (int c = 0; c < frame.width; ++c) {
      t.at(0, r, c) = (frame.temps[static_cast<std::size_t>(r) * frame.width + c] - mean) * inv;
    }
  }
  return t;
}

std::vector<double> SegmenterNet::predict(const ThermalFrame& frame) const {
  const Tensor logits = forward_logits(prepare_input(frame));
  std::vector<double> prob(static_cast<std::size_t>(frame.width) * frame.height);
  for (int r = 0; r < frame.height; ++r) {
    for (int c = 0; c < frame.width; ++c) {
      prob[static_cast<std::size_t>(r) * frame.width + c] = sigmoid(logits.at(0, r, c));
    }
  }
  return prob;
}

void adam_step(SegmenterNet& net, std::vector<Conv2d>& grads, double scale, AdamState& state,
               const TrainConfig& cfg) {
  const std::size_t n = net.parameter_count();
  if (state.m.size() != n) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::vector<double> flat(n, 0.0);
  if (!grads.empty()) for_each_param(grads, [&](std::size_t k, double& g) { flat[k] = g * scale; });
  for_each_param(net.layers(), [&](std::size_t k, double& p) {
    const double g = flat[k];
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
    p -= cfg.learning_rate * (state.m[k] / bc1) / (std::sqrt(state.v[k] / bc2) + cfg.adam_epsilon);
    if (!std::isfinite(p)) fail(ErrorCode::NonFiniteLoss, "segmenter parameters became non-finite");
  });
}

SegmenterNet train_segmenter(const std::vector<TrainSample>& dataset, const TrainConfig& cfg,
                             std::vector<double>* loss_log, std::array<int, 3> widths) {
  cfg.validate();
  if (dataset.empty()) fail(ErrorCode::EmptyDataset, "segmenter training set is empty");
  const int width = dataset.front().frame.width;
  const int height = dataset.front().frame.height;
  std::vector<Tensor> inputs;
  std::vector<std::vector<double>> targets;
  for (const auto& s : dataset) {
    if (s.frame.width != width || s.frame.height != height || s.mask.width != width || s.mask.height != height) {
      fail(ErrorCode::DimensionMismatch, "segmenter samples must share one frame size");
    }
    inputs.push_back(prepare_input(s.frame));
    const Tensor& in = inputs.back();
    std::vector<double> t(in.v.size(), -1.0);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) t[static_cast<std::size_t>(r) * in.w + c] = s.mask.at(r, c) ? 1.0 : 0.0;
    }
    targets.push_back(std::move(t));
  }

  SegmenterNet net(widths, cfg.seed);
  AdamState adam;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed ^ 0x5eedULL);
  double reference_loss = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Conv2d> grads;
      double batch_loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        batch_loss += net.loss_and_gradients(inputs[order[k]], targets[order[k]], grads);
      }
      if (adam.step == 0) reference_loss = std::max(batch_loss / static_cast<double>(stop - start), std::log(2.0));
      // A loss two orders of magnitude above the starting loss means the
      // optimizer has left any sensible basin even if it is still finite.
      if (!std::isfinite(batch_loss) || batch_loss / static_cast<double>(stop - start) > 100.0 * reference_loss) {
        fail(ErrorCode::NonFiniteLoss, "segmenter training diverged at epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      adam_step(net, grads, 1.0 / static_cast<double>(stop - start), adam, cfg);
    }
    epoch_loss /= static_cast<double>(order.size());
    if (loss_log) loss_log->push_back(epoch_loss);
  }
  return net;
}

RoiMask infer_mask(const SegmenterNet& net, const ThermalFrame& frame) {
  const std::vector<double> prob = net.predict(frame);
  RoiMask raw(frame.width, frame.height);
  for (std::size_t i = 0; i < prob.size(); ++i) raw.bits[i] = prob[i] >= 0.5 ? 1 : 0;
  return postprocess_mask(raw);
}

void save_segmenter(const SegmenterNet& net, const TrainConfig& cfg, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "thermoviab-segmenter";
  header["widths"] = net.widths();
  header["seed"] = net.seed();
  header["config"] = {{"learning_rate", cfg.learning_rate}, {"beta1", cfg.beta1},   {"beta2", cfg.beta2},
                      {"epsilon", cfg.adam_epsilon},        {"batch_size", cfg.batch_size},
                      {"epochs", cfg.epochs},               {"seed", cfg.seed}};
  header["layers"] = nlohmann::json::array();
  for (const auto& L : net.layers()) {
    header["layers"].push_back({{"name", L.name},
                                {"stride", L.stride},
                                {"weight_shape", {L.out, L.in, 3, 3}},
                                {"bias_shape", {L.out}}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  const unsigned char len_le[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                                   static_cast<unsigned char>(len >> 16), static_cast<unsigned char>(len >> 24)};
  out.write(reinterpret_cast<const char*>(len_le), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  auto put = [&](double value) {
    const float f = static_cast<float>(value);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  for (const auto& L : net.layers()) {
    for (double w : L.weight) put(w);
    for (double b : L.bias) put(b);
  }
  if (!out) fail(ErrorCode::IoFailure, "failed writing " + path.string());
}

SegmenterNet load_segmenter(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    fail(ErrorCode::ModelFormat, "not a segmenter checkpoint: " + path.string());
  }
  auto u32 = [&](std::size_t off) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  };
  const std::uint32_t len = u32(8);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) fail(ErrorCode::ModelFormat, "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ModelFormat, std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "thermoviab-segmenter") fail(ErrorCode::ModelFormat, "unknown checkpoint format");
  SegmenterNet net(header.at("widths").get<std::array<int, 3>>(), header.at("seed").get<std::uint64_t>());
  std::size_t off = 12 + len;
  if (bytes.size() != off + 4 * net.parameter_count()) fail(ErrorCode::ModelFormat, "checkpoint size mismatch");
  for_each_param(net.layers(), [&](std::size_t, double& p) {
    const std::uint32_t bits = u32(off);
    float f;
    std::memcpy(&f, &bits, 4);
    p = f;
    off += 4;
  });
  return net;
}

}  // namespace thermoviab
