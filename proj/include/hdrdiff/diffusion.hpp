// SPDX-License-Identifier: Apache-2.0
//
// Forward corruption, classifier-free guided noise prediction and ancestral
// DDPM sampling. Tensors are (N, C, H, W) in the model domain [-1, 1].
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "hdrdiff/schedule.hpp"
#include "hdrdiff/tensor.hpp"

namespace hdrdiff::diffusion {

using nn::Shape;
using nn::Tensor;
using schedule::NoiseSchedule;

/// Guidance scale s, training-time probability of the null condition, and the
/// null condition itself (all-zeros latent, see null_condition()).
struct GuidanceConfig {
  double scale = 2.0;
  double p_uncond = 0.1;

  void validate() const {
    if (!(scale >= 0.0)) throw Error("GuidanceConfig: scale must be >= 0");
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw Error("GuidanceConfig: p_uncond must lie in [0, 1]");
  }
};

template <class T>
Tensor<T> null_condition(const Shape& z_shape) {
  return Tensor<T>(z_shape, T(0));
}

namespace detail {
inline std::vector<int> broadcast_steps(std::span<const int> t, int n) {
  if (t.size() == 1) return std::vector<int>(static_cast<std::size_t>(n), t[0]);
  if (t.size() != static_cast<std::size_t>(n)) throw Error("diffusion: need one timestep per sample");
  return {t.begin(), t.end()};
}
}  // namespace detail

/// x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps, with per-sample t
/// (a single entry broadcasts).
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const NoiseSchedule& s) {
  nn::require_same<T>(x0.shape, eps.shape, "q_sample");
  const auto steps = detail::broadcast_steps(t, x0.shape.n);
  Tensor<T> out(x0.shape);
  const std::size_t m = x0.shape.per_sample();
  for (int n = 0; n < x0.shape.n; ++n) {
    s.check_step(steps[n]);
    const T a = static_cast<T>(s.sqrt_alpha_bar(steps[n]));
    const T b = static_cast<T>(s.sqrt_one_minus_alpha_bar(steps[n]));
    for (std::size_t i = 0; i < m; ++i) out[n * m + i] = a * x0[n * m + i] + b * eps[n * m + i];
  }
  return out;
}

template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  const int ts[1] = {t};
  return q_sample(x0, std::span<const int>(ts), eps, s);
}

/// eps_uncond + s * (eps_cond - eps_uncond)
template <class T>
Tensor<T> guided_eps(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s) {
  nn::require_same<T>(eps_cond.shape, eps_uncond.shape, "guided_eps");
  if (s == 1.0) return eps_cond;  // u + (c - u) can round away from c
  Tensor<T> out(eps_cond.shape);
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + st * (eps_cond[i] - eps_uncond[i]);
  return out;
}

/// Per-sample coefficients of x0_hat = a * x_t + b * eps_hat.
struct X0Coefficients {
  double from_xt;
  double from_eps;
};

inline X0Coefficients x0_coefficients(int t, const NoiseSchedule& s) {
  s.check_step(t);
  const double sa = s.sqrt_alpha_bar(t);
  return {1.0 / sa, -s.sqrt_one_minus_alpha_bar(t) / sa};
}

/// Inverts the forward process given a noise estimate; clamps to [-1, 1] unless clamp = false.
template <class T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, std::span<const int> t, const NoiseSchedule& s,
                     bool clamp = true) {
  nn::require_same<T>(x_t.shape, eps_hat.shape, "predict_x0");
  const auto steps = detail::broadcast_steps(t, x_t.shape.n);
  Tensor<T> out(x_t.shape);
  const std::size_t m = x_t.shape.per_sample();
  for (int n = 0; n < x_t.shape.n; ++n) {
    const auto c = x0_coefficients(steps[n], s);
    for (std::size_t i = 0; i < m; ++i) {
      T v = static_cast<T>(c.from_xt * x_t[n * m + i] + c.from_eps * eps_hat[n * m + i]);
      out[n * m + i] = clamp ? std::clamp(v, T(-1), T(1)) : v;
    }
  }
  return out;
}

template <class T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                     bool clamp = true) {
  const int ts[1] = {t};
  return predict_x0(x_t, eps_hat, std::span<const int>(ts), s, clamp);
}

/// One ancestral step: mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t),
/// returns mu + sigma_t * noise, and exactly mu at t = 1.
template <class T>
Tensor<T> p_step(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& s,
                 const Tensor<T>& noise) {
  s.check_step(t);
  nn::require_same<T>(x_t.shape, eps_hat.shape, "p_step");
  if (t > 1) nn::require_same<T>(x_t.shape, noise.shape, "p_step noise");
  const double beta = s.beta[t];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
  const double eps_coef = beta / s.sqrt_one_minus_alpha_bar(t);
  const double sigma = t > 1 ? s.sigma[t] : 0.0;
  Tensor<T> out(x_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double mu = inv_sqrt_alpha * (static_cast<double>(x_t[i]) - eps_coef * eps_hat[i]);
    if (t > 1) mu += sigma * noise[i];
    out[i] = static_cast<T>(mu);
  }
  return out;
}

/// Same step written as the posterior mean of q(x_{t-1} | x_t, x0_hat) with x0_hat
/// clamped to [-1, 1]. Identical to p_step whenever x0_hat is already in range.
template <class T>
Tensor<T> p_step_clipped(const Tensor<T>& x_t, int t, const Tensor<T>& eps_hat, const NoiseSchedule& s,
                         const Tensor<T>& noise) {
  s.check_step(t);
  nn::require_same<T>(x_t.shape, eps_hat.shape, "p_step_clipped");
  if (t > 1) nn::require_same<T>(x_t.shape, noise.shape, "p_step_clipped noise");
  const Tensor<T> x0 = predict_x0(x_t, eps_hat, t, s, true);
  const double ab = s.alpha_bar[t], ab_prev = s.alpha_bar[t - 1], beta = s.beta[t];
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
  const double sigma = t > 1 ? s.sigma[t] : 0.0;
  Tensor<T> out(x_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double mu = c0 * x0[i] + ct * x_t[i];
    if (t > 1) mu += sigma * noise[i];
    out[i] = static_cast<T>(mu);
  }
  return out;
}

/// Noise predictor: (x_t, per-sample steps, per-sample condition) -> eps.
template <class T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>& x_t, const std::vector<int>& t, const Tensor<T>& cond)>;

/// Ancestral sampling over all T steps with classifier-free guidance. Each step
/// evaluates the denoiser once on a 2N batch holding [cond; null]. Deterministic
/// for a fixed seed. `clip_x0` selects p_step_clipped over p_step.
template <class T>
Tensor<T> sample(const Denoiser<T>& denoiser, const Tensor<T>& z_sem, Shape image_shape, const NoiseSchedule& s,
                 const GuidanceConfig& guidance, std::uint64_t rng_seed, bool clip_x0 = true) {
  guidance.validate();
  if (z_sem.shape.n != image_shape.n) throw Error("sample: condition batch does not match image batch");
  const int N = image_shape.n;
  std::mt19937_64 rng(rng_seed);
  Tensor<T> x = nn::randn<T>(image_shape, rng);

  const Shape zs = z_sem.shape;
  Tensor<T> cond2({2 * N, zs.c, zs.h, zs.w});
  std::copy(z_sem.data.begin(), z_sem.data.end(), cond2.data.begin());  // second half stays null

  const Shape x2s{2 * N, image_shape.c, image_shape.h, image_shape.w};
  const std::size_t half = image_shape.numel();
  Tensor<T> x2(x2s), eps_c(image_shape), eps_u(image_shape), noise(image_shape);
  for (int t = s.T; t >= 1; --t) {
    std::copy(x.data.begin(), x.data.end(), x2.data.begin());
    std::copy(x.data.begin(), x.data.end(), x2.data.begin() + static_cast<std::ptrdiff_t>(half));
    const Tensor<T> eps2 = denoiser(x2, std::vector<int>(static_cast<std::size_t>(2 * N), t), cond2);
    nn::require_same<T>(eps2.shape, x2s, "sample: denoiser output");
    std::copy_n(eps2.data.begin(), half, eps_c.data.begin());
    std::copy_n(eps2.data.begin() + static_cast<std::ptrdiff_t>(half), half, eps_u.data.begin());
    const Tensor<T> eps_hat = guided_eps(eps_c, eps_u, guidance.scale);
    if (t > 1) nn::fill_normal(noise, rng);
    x = clip_x0 ? p_step_clipped(x, t, eps_hat, s, noise) : p_step(x, t, eps_hat, s, noise);
  }
  return x;
}

}  // namespace hdrdiff::diffusion
