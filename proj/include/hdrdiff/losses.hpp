// SPDX-License-Identifier: Apache-2.0
//
// Training objective terms. Every term is a pure function of (N, C, H, W)
// tensors returning its value and the analytic gradient with respect to the
// model output it penalizes; batch terms are averaged over N.
//
//   MSTL     sum_s (1/s) * mean_{c,px} (D_s[eps] - D_s[eps_hat])^2
//   L_rec    mean (ldr - ldr*)^2
//   L_lpips  sum_stages mean (phi(a) - phi(b))^2, phi channel-unit-normalized features
//   L_exp    -zeta * | sum x / sum max(x,1) - sum y / sum max(y,1) |
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hdrdiff/autograd.hpp"
#include "hdrdiff/tensor.hpp"

namespace hdrdiff::losses {

using nn::Shape;
using nn::Tensor;

template <class T>
struct LossValue {
  T value = 0;
  Tensor<T> grad;  // d value / d (penalized input)
};

// ---------------------------------------------------------------------------
// Box downsampling

template <class T>
Tensor<T> downsample_avg(const Tensor<T>& x, int d) {
  const Shape s = x.shape;
  if (s.h != s.w) throw Error("downsample_avg: input must be square");
  if (d < 1 || s.h % d) throw Error("downsample_avg: side " + std::to_string(s.h) + " not divisible by " + std::to_string(d));
  const int f = s.h / d;
  Tensor<T> out({s.n, s.c, d, d});
  const double inv = 1.0 / (static_cast<double>(f) * f);
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int y = 0; y < d; ++y)
      for (int x0 = 0; x0 < d; ++x0) {
        double acc = 0.0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx)
            acc += x[(static_cast<std::size_t>(nc) * s.h + y * f + dy) * s.w + x0 * f + dx];
        out[(static_cast<std::size_t>(nc) * d + y) * d + x0] = static_cast<T>(acc * inv);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Multiscale training loss

template <class T>
LossValue<T> multiscale_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred, const std::vector<int>& scales) {
  nn::require_same<T>(eps_true.shape, eps_pred.shape, "multiscale_loss");
  const Shape s = eps_true.shape;
  if (scales.empty()) throw Error("multiscale_loss: no scales");
  if (s.h != s.w || *std::max_element(scales.begin(), scales.end()) != s.h)
    throw Error("multiscale_loss: largest scale must equal the square input side");
  LossValue<T> out{T(0), Tensor<T>(s)};
  double total = 0.0;
  for (int d : scales) {
    const Tensor<T> dt = downsample_avg(eps_true, d);
    const Tensor<T> dp = downsample_avg(eps_pred, d);
    const double norm = 1.0 / (static_cast<double>(d) * s.n * s.c * d * d);  // (1/s) * mean
    double acc = 0.0;
    for (std::size_t i = 0; i < dt.size(); ++i) {
      const double diff = static_cast<double>(dp[i]) - dt[i];
      acc += diff * diff;
    }
    total += acc * norm;
    const int f = s.h / d;
    const double spread = 2.0 * norm / (static_cast<double>(f) * f);
    for (int nc = 0; nc < s.n * s.c; ++nc)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const std::size_t k = (static_cast<std::size_t>(nc) * d + y / f) * d + x / f;
          out.grad[(static_cast<std::size_t>(nc) * s.h + y) * s.w + x] +=
              static_cast<T>(spread * (static_cast<double>(dp[k]) - dt[k]));
        }
  }
  out.value = static_cast<T>(total);
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction loss

/// Mean squared error; gradient with respect to `decoded`.
template <class T>
LossValue<T> reconstruction_loss(const Tensor<T>& ldr_true, const Tensor<T>& decoded) {
  nn::require_same<T>(ldr_true.shape, decoded.shape, "reconstruction_loss");
  LossValue<T> out{T(0), Tensor<T>(decoded.shape)};
  const double inv = 1.0 / static_cast<double>(decoded.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    const double d = static_cast<double>(decoded[i]) - ldr_true[i];
    acc += d * d;
    out.grad[i] = static_cast<T>(2.0 * d * inv);
  }
  out.value = static_cast<T>(acc * inv);
  return out;
}

// ---------------------------------------------------------------------------
// Exposure loss

namespace detail {
struct ExposureRatio {
  double ratio, sum, sum_clamped;
};
template <class T>
ExposureRatio exposure_ratio(std::span<const T> x) {
  double a = 0.0, b = 0.0;
  for (T v : x) {
    a += v;
    b += std::max<double>(v, 1.0);
  }
  return {a / b, a, b};
}
}  // namespace detail

/// Both inputs normalized to [0, 1]; gradient with respect to x0_hat_norm.
/// At the non-differentiable point (equal ratios) the zero subgradient is used.
template <class T>
LossValue<T> exposure_loss(const Tensor<T>& x0_hat_norm, const Tensor<T>& x_ldr_norm, double zeta) {
  nn::require_same<T>(x0_hat_norm.shape, x_ldr_norm.shape, "exposure_loss");
  if (!(zeta >= 0.0)) throw Error("exposure_loss: zeta must be >= 0");
  const Shape s = x0_hat_norm.shape;
  LossValue<T> out{T(0), Tensor<T>(s)};
  const std::size_t m = s.per_sample();
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const auto rx = detail::exposure_ratio(x0_hat_norm.sample(n));
    const auto ry = detail::exposure_ratio(x_ldr_norm.sample(n));
    const double diff = rx.ratio - ry.ratio;
    total += -zeta * std::abs(diff);
    const double sign = diff > 0.0 ? 1.0 : diff < 0.0 ? -1.0 : 0.0;
    const double k = -zeta * sign / s.n;
    for (std::size_t i = 0; i < m; ++i) {
      const double v = x0_hat_norm[n * m + i];
      const double dr = 1.0 / rx.sum_clamped - (v > 1.0 ? rx.sum / (rx.sum_clamped * rx.sum_clamped) : 0.0);
      out.grad[n * m + i] = static_cast<T>(k * dr);
    }
  }
  out.value = static_cast<T>(total / s.n);
  return out;
}

// ---------------------------------------------------------------------------
// Perceptual loss

/// Fixed (never trained) multi-stage conv feature map: conv3x3 + ReLU stages
/// separated by 2x max-pooling, weights drawn from a seeded fan-in-scaled normal.
/// Learned weights can be substituted through set_stage_weights().
template <class T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 0x5EED, std::vector<int> channels = {8, 16, 32}) {
    std::mt19937_64 rng(seed);
    int cin = 3;
    for (int cout : channels) {
      Tensor<T> w({cout, cin, 3, 3});
      std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (cin * 9.0)));
      for (auto& v : w.data) v = static_cast<T>(nd(rng));
      weights_.push_back(nn::constant(std::move(w)));
      biases_.push_back(nn::constant(Tensor<T>({cout, 1, 1, 1})));
      cin = cout;
    }
  }

  std::size_t stages() const { return weights_.size(); }

  void set_stage_weights(std::size_t stage, Tensor<T> w, Tensor<T> b) {
    nn::require_same<T>(w.shape, weights_.at(stage)->shape(), "set_stage_weights");
    nn::require_same<T>(b.shape, biases_.at(stage)->shape(), "set_stage_weights");
    weights_[stage] = nn::constant(std::move(w));
    biases_[stage] = nn::constant(std::move(b));
  }

  /// Channel-unit-normalized activations of every stage.
  std::vector<nn::Var<T>> features(const nn::Var<T>& x) const {
    std::vector<nn::Var<T>> out;
    nn::Var<T> h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (i > 0) h = nn::maxpool2(h);
      h = nn::relu(nn::conv2d(h, weights_[i], biases_[i]));
      out.push_back(nn::channel_unit_normalize(h));
    }
    return out;
  }

  /// Graph form: sum over stages of mean squared feature difference.
  nn::Var<T> distance(const nn::Var<T>& a, const nn::Var<T>& b) const {
    const auto fa = features(a);
    const auto fb = features(b);
    std::vector<nn::Var<T>> terms;
    for (std::size_t i = 0; i < fa.size(); ++i) terms.push_back(nn::mse(fa[i], fb[i]));
    return nn::sum_scalars(terms);
  }

 private:
  std::vector<nn::Var<T>> weights_;
  std::vector<nn::Var<T>> biases_;
};

/// Value and gradient with respect to x_a.
template <class T>
LossValue<T> perceptual_loss(const Tensor<T>& x_a, const Tensor<T>& x_b, const FeatureExtractor<T>& extractor) {
  nn::require_same<T>(x_a.shape, x_b.shape, "perceptual_loss");
  auto a = nn::parameter(x_a);
  auto loss = extractor.distance(a, nn::constant(x_b));
  nn::backward(loss);
  return {loss->value[0], a->grad.empty() ? Tensor<T>(x_a.shape) : a->grad};
}

// ---------------------------------------------------------------------------
// Combined objective

struct LossWeights {
  double zeta = 0.1;
  bool use_mstl = true;
  bool use_rec = true;
  bool use_lpips = true;
  bool use_exp = true;
  std::vector<int> scales;  // empty: {base/8, base/4, base/2, base}

  std::vector<int> resolved_scales(int base) const {
    std::vector<int> s = scales;
    if (s.empty())
      for (int d = base / 8; d <= base; d *= 2)
        if (d >= 1) s.push_back(d);
    std::sort(s.begin(), s.end());
    return s;
  }

  void validate(int base) const {
    if (!(zeta >= 0.0)) throw Error("LossWeights: zeta must be >= 0");
    if (!(use_mstl || use_rec || use_lpips || use_exp)) throw Error("LossWeights: at least one term must be enabled");
    const auto s = resolved_scales(base);
    if (s.empty() || s.back() != base) throw Error("LossWeights: largest scale must equal the base resolution");
    for (int d : s)
      if (d < 1 || base % d) throw Error("LossWeights: scale " + std::to_string(d) + " does not divide the base resolution");
  }
};

inline const std::vector<std::string>& term_names() {
  static const std::vector<std::string> names{"mstl", "rec", "lpips", "exp"};
  return names;
}

struct LossReport {
  double total = 0.0;
  std::map<std::string, double> per_term;  // every term present; disabled terms are exactly 0

  double term(const std::string& name) const {
    auto it = per_term.find(name);
    return it == per_term.end() ? 0.0 : it->second;
  }
  /// step,total,mstl,rec,lpips,exp
  std::string csv_row(long step) const {
    std::string row = std::to_string(step) + "," + fmt(total);
    for (const auto& n : term_names()) row += "," + fmt(term(n));
    return row;
  }
  static std::string csv_header() { return "step,total,mstl,rec,lpips,exp"; }

 private:
  static std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }
};

/// Everything total_loss() may need; terms whose inputs are absent must be disabled.
template <class T>
struct LossInputs {
  const Tensor<T>* eps_true = nullptr;
  const Tensor<T>* eps_pred = nullptr;
  const Tensor<T>* ldr = nullptr;          // input LDR, [0, 1]
  const Tensor<T>* ldr_decoded = nullptr;  // autoencoder reconstruction
  const Tensor<T>* x0 = nullptr;           // model-domain target
  const Tensor<T>* x0_hat = nullptr;       // model-domain prediction
  const Tensor<T>* x0_hat_norm = nullptr;  // prediction mapped to [0, 1]
};

template <class T>
LossReport total_loss(const LossInputs<T>& in, const LossWeights& w, const FeatureExtractor<T>* extractor = nullptr) {
  auto need = [](const void* p, const char* what) {
    if (!p) throw Error(std::string("total_loss: missing input for ") + what);
  };
  LossReport r;
  for (const auto& n : term_names()) r.per_term[n] = 0.0;
  if (w.use_mstl) {
    need(in.eps_true, "mstl");
    need(in.eps_pred, "mstl");
    r.per_term["mstl"] = multiscale_loss(*in.eps_true, *in.eps_pred, w.resolved_scales(in.eps_true->shape.h)).value;
  }
  if (w.use_rec) {
    need(in.ldr, "rec");
    need(in.ldr_decoded, "rec");
    r.per_term["rec"] = reconstruction_loss(*in.ldr, *in.ldr_decoded).value;
  }
  if (w.use_lpips) {
    need(in.x0, "lpips");
    need(in.x0_hat, "lpips");
    need(extractor, "lpips");
    r.per_term["lpips"] = perceptual_loss(*in.x0_hat, *in.x0, *extractor).value;
  }
  if (w.use_exp) {
    need(in.x0_hat_norm, "exp");
    need(in.ldr, "exp");
    r.per_term["exp"] = exposure_loss(*in.x0_hat_norm, *in.ldr, w.zeta).value;
  }
  for (const auto& [_, v] : r.per_term) r.total += v;
  return r;
}

}  // namespace hdrdiff::losses
