// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hdrdiff/nets.hpp"

namespace hdrdiff::optim {

using nn::Tensor;

/// Adam over every tensor in a registry. State is kept in registry order.
template <class T>
class Adam {
 public:
  Adam(const nets::ParamRegistry<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [_, v] : params.all()) {
      m_.emplace_back(v->value.shape);
      v_.emplace_back(v->value.shape);
    }
  }

  /// Applies one update from the accumulated gradients; parameters without a gradient are skipped.
  void step(nets::ParamRegistry<T>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto& all = params.all();
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto& p = *all[i].second;
      if (p.grad.empty()) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        m[k] = static_cast<T>(beta1_ * m[k] + (1.0 - beta1_) * g);
        v[k] = static_cast<T>(beta2_ * v[k] + (1.0 - beta2_) * g * g);
        const double mh = m[k] / c1, vh = v[k] / c2;
        p.value[k] = static_cast<T>(p.value[k] - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

/// Exponential moving average of parameter values: ema = d * ema + (1 - d) * p.
template <class T>
class Ema {
 public:
  Ema(const nets::ParamRegistry<T>& params, double decay) : decay_(decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw Error("Ema: decay must lie in [0, 1)");
    for (const auto& [_, v] : params.all()) shadow_.push_back(v->value);
  }

  void update(const nets::ParamRegistry<T>& params) {
    const auto& all = params.all();
    for (std::size_t i = 0; i < all.size(); ++i) {
      const auto& p = all[i].second->value;
      auto& s = shadow_[i];
      for (std::size_t k = 0; k < p.size(); ++k)
        s[k] = static_cast<T>(decay_ * s[k] + (1.0 - decay_) * p[k]);
    }
  }

  /// Copies the averaged weights into the registry.
  void copy_to(nets::ParamRegistry<T>& params) const {
    const auto& all = params.all();
    for (std::size_t i = 0; i < all.size(); ++i) all[i].second->value = shadow_[i];
  }

  std::vector<Tensor<T>>& shadow() { return shadow_; }
  const std::vector<Tensor<T>>& shadow() const { return shadow_; }

 private:
  double decay_;
  std::vector<Tensor<T>> shadow_;
};

}  // namespace hdrdiff::optim
