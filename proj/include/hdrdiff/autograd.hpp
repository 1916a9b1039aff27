// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-free reverse-mode autodiff over NCHW tensors. Each op creates a
// node holding its value, its parents and a backward closure; backward() walks
// the graph in reverse topological order. Convolutions and dense layers lower
// to Eigen GEMMs via im2col.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hdrdiff/tensor.hpp"

namespace hdrdiff::nn {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  const Shape& shape() const { return value.shape; }

  Tensor<T>& g() {
    if (grad.empty()) grad = Tensor<T>(value.shape);
    return grad;
  }
  void zero_grad() { grad = Tensor<T>(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

/// Wraps an op result; records the graph edge only when some parent needs gradients.
template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled() && std::any_of(parents.begin(), parents.end(), [](const Var<T>& p) { return p->requires_grad; })) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

/// Seeds d(root)/d(root) with `seed` (ones for a scalar root) and accumulates
/// gradients into every reachable node that requires them.
template <class T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  if (seed) {
    require_same<T>(seed->shape, root->value.shape, "backward seed");
    auto& g = root->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    auto& g = root->g();
    std::fill(g.data.begin(), g.data.end(), T(1));
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same<T>(a->shape(), b->shape(), "add");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same<T>(a->shape(), b->shape(), "sub");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same<T>(a->shape(), b->shape(), "mul");
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      auto& g = a->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

/// y = f(x) elementwise with derivative df(x, y).
template <class T, class F, class DF>
Var<T> map(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x->value[i]);
  return make_node<T>(std::move(out), {x}, [df](Node<T>& self) {
    auto& x = self.parents[0];
    auto& g = x->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x->value[i], self.value[i]);
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  return map<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return map<T>(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return map<T>(
      x, [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// Clamp; the gradient is passed only strictly inside (lo, hi).
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return map<T>(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return map<T>(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

/// y[n] = scale[n] * x[n] + offset[n] with per-sample scalars and a constant offset tensor.
template <class T>
Var<T> per_sample_affine(const Var<T>& x, std::vector<T> scales, const Tensor<T>* offset = nullptr) {
  const Shape s = x->shape();
  if (scales.size() != static_cast<std::size_t>(s.n)) throw Error("per_sample_affine: need one scale per sample");
  if (offset) require_same<T>(offset->shape, s, "per_sample_affine offset");
  Tensor<T> out(s);
  const std::size_t m = s.per_sample();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t k = n * m + i;
      out[k] = scales[n] * x->value[k] + (offset ? (*offset)[k] : T(0));
    }
  return make_node<T>(std::move(out), {x}, [scales = std::move(scales), m](Node<T>& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t n = 0; n < scales.size(); ++n)
      for (std::size_t i = 0; i < m; ++i) g[n * m + i] += scales[n] * self.grad[n * m + i];
  });
}

// ---------------------------------------------------------------------------
// Broadcasts and shape ops

/// x: (N, C, H, W), v: (N, C, 1, 1) added to every pixel.
template <class T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  const Shape s = x->shape();
  if (!(v->shape() == Shape{s.n, s.c, 1, 1})) throw Error("add_channel: bias shape " + v->shape().str());
  Tensor<T> out = x->value;
  const std::size_t hw = s.hw();
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc)
    for (std::size_t p = 0; p < hw; ++p) out[nc * hw + p] += v->value[nc];
  return make_node<T>(std::move(out), {x, v}, [hw](Node<T>& self) {
    auto& x = self.parents[0];
    auto& v = self.parents[1];
    if (x->requires_grad) {
      auto& g = x->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (v->requires_grad) {
      auto& g = v->g();
      for (std::size_t nc = 0; nc < g.size(); ++nc) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += self.grad[nc * hw + p];
        g[nc] += acc;
      }
    }
  });
}

/// x: (N, C, H, W) multiplied by a (N, 1, H, W) map shared across channels.
template <class T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& a) {
  const Shape s = x->shape();
  if (!(a->shape() == Shape{s.n, 1, s.h, s.w})) throw Error("mul_spatial: gate shape " + a->shape().str());
  Tensor<T> out(s);
  const std::size_t hw = s.hw();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        out[(static_cast<std::size_t>(n) * s.c + c) * hw + p] = x->value[(static_cast<std::size_t>(n) * s.c + c) * hw + p] * a->value[n * hw + p];
  return make_node<T>(std::move(out), {x, a}, [s, hw](Node<T>& self) {
    auto& x = self.parents[0];
    auto& a = self.parents[1];
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
          if (x->requires_grad) x->g()[k] += self.grad[k] * a->value[n * hw + p];
          if (a->requires_grad) a->g()[n * hw + p] += self.grad[k] * x->value[k];
        }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  if (s.numel() != x->shape().numel()) throw Error("reshape: element count mismatch");
  Tensor<T> out(s, x->value.data);
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a->shape(), sb = b->shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) throw Error("concat_channels: shape mismatch");
  const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> out(so);
  const std::size_t ma = sa.per_sample(), mb = sb.per_sample();
  for (int n = 0; n < so.n; ++n) {
    std::copy_n(a->value.ptr() + n * ma, ma, out.ptr() + n * (ma + mb));
    std::copy_n(b->value.ptr() + n * mb, mb, out.ptr() + n * (ma + mb) + ma);
  }
  return make_node<T>(std::move(out), {a, b}, [ma, mb](Node<T>& self) {
    const int nb = self.value.shape.n;
    for (int n = 0; n < nb; ++n) {
      if (self.parents[0]->requires_grad) {
        auto& g = self.parents[0]->g();
        for (std::size_t i = 0; i < ma; ++i) g[n * ma + i] += self.grad[n * (ma + mb) + i];
      }
      if (self.parents[1]->requires_grad) {
        auto& g = self.parents[1]->g();
        for (std::size_t i = 0; i < mb; ++i) g[n * mb + i] += self.grad[n * (ma + mb) + ma + i];
      }
    }
  });
}

/// Multiplies each sample by mask[n] (0 or 1); used to swap in the all-zeros null condition.
template <class T>
Var<T> mask_samples(const Var<T>& x, const std::vector<T>& mask) {
  return per_sample_affine<T>(x, mask);
}

// ---------------------------------------------------------------------------
// Pooling / resampling

template <class T>
Var<T> maxpool2(const Var<T>& x) {
  const Shape s = x->shape();
  if (s.h % 2 || s.w % 2) throw Error("maxpool2: odd spatial size " + s.str());
  const Shape so{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(so);
  std::vector<std::uint32_t> arg(so.numel());
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int y = 0; y < so.h; ++y)
      for (int xx = 0; xx < so.w; ++xx) {
        std::uint32_t best = static_cast<std::uint32_t>((static_cast<std::size_t>(nc) * s.h + 2 * y) * s.w + 2 * xx);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const auto k = static_cast<std::uint32_t>((static_cast<std::size_t>(nc) * s.h + 2 * y + dy) * s.w + 2 * xx + dx);
            if (x->value[k] > x->value[best]) best = k;
          }
        const std::size_t o = (static_cast<std::size_t>(nc) * so.h + y) * so.w + xx;
        out[o] = x->value[best];
        arg[o] = best;
      }
  return make_node<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

/// Nearest-neighbour upsampling by 2.
template <class T>
Var<T> upsample2(const Var<T>& x) {
  const Shape s = x->shape();
  const Shape so{s.n, s.c, s.h * 2, s.w * 2};
  Tensor<T> out(so);
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int y = 0; y < so.h; ++y)
      for (int xx = 0; xx < so.w; ++xx)
        out[(static_cast<std::size_t>(nc) * so.h + y) * so.w + xx] =
            x->value[(static_cast<std::size_t>(nc) * s.h + y / 2) * s.w + xx / 2];
  return make_node<T>(std::move(out), {x}, [s, so](Node<T>& self) {
    auto& g = self.parents[0]->g();
    for (int nc = 0; nc < s.n * s.c; ++nc)
      for (int y = 0; y < so.h; ++y)
        for (int xx = 0; xx < so.w; ++xx)
          g[(static_cast<std::size_t>(nc) * s.h + y / 2) * s.w + xx / 2] +=
              self.grad[(static_cast<std::size_t>(nc) * so.h + y) * so.w + xx];
  });
}

// ---------------------------------------------------------------------------
// Convolution and dense layers

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRow = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRow = Eigen::Map<const RowMat<T>>;

/// col[(c*k*k + ky*k + kx), y*W + x] = x[n, c, y+ky-pad, x+kx-pad] for one sample (zero padded).
template <class T>
void im2col(const T* x, int c_in, int h, int w, int k, T* col) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * hw;
        const int ox = kx - pad;
        const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * h + sy) * w;
          std::fill(dst, dst + x0, T(0));
          std::copy(src + x0 + ox, src + x1 + ox, dst + x0);
          std::fill(dst + x1, dst + w, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* col, int c_in, int h, int w, int k, T* dx) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * hw;
        const int ox = kx - pad;
        const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * h + sy) * w;
          const T* src = row + static_cast<std::size_t>(y) * w;
          for (int xx = x0; xx < x1; ++xx) dst[xx + ox] += src[xx];
        }
      }
}

}  // namespace detail

/// Stride-1 "same" convolution. w: (Cout, Cin, k, k) with odd k; b: (Cout, 1, 1, 1).
/// Lowered per sample to out_n (Cout x HW) = W (Cout x Cin*k*k) * im2col(x_n).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape s = x->shape();
  const Shape ws = w->shape();
  const int k = ws.h;
  if (ws.c != s.c || ws.h != ws.w || k % 2 == 0) throw Error("conv2d: weight " + ws.str() + " vs input " + s.str());
  const int cout = ws.n;
  const int K = s.c * k * k;
  const Eigen::Index hw = static_cast<Eigen::Index>(s.hw());

  Tensor<T> y({s.n, cout, s.h, s.w});
  std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(K) * hw);
  const detail::CMapRow<T> wm(w->value.ptr(), cout, K);
  for (int n = 0; n < s.n; ++n) {
    const T* xn = x->value.ptr() + n * s.per_sample();
    const T* cn = xn;
    if (k != 1) {
      detail::im2col(xn, s.c, s.h, s.w, k, col.data());
      cn = col.data();
    }
    detail::MapRow<T> out(y.ptr() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
    out.noalias() = wm * detail::CMapRow<T>(cn, K, hw);
    for (int co = 0; co < cout; ++co) out.row(co).array() += b->value[co];
  }
  return make_node<T>(std::move(y), {x, w, b}, [k, K, cout, hw](Node<T>& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    auto& b = self.parents[2];
    const Shape s = x->shape();
    if (b->requires_grad) {
      auto& gb = b->g();
      for (int n = 0; n < s.n; ++n)
        for (int co = 0; co < cout; ++co)
          gb[co] += detail::CMapRow<T>(self.grad.ptr() + (static_cast<std::size_t>(n) * cout + co) * hw, 1, hw).sum();
    }
    if (!w->requires_grad && !x->requires_grad) return;
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(K) * hw);
    std::vector<T> dcol(static_cast<std::size_t>(K) * hw);
    const detail::CMapRow<T> wm(w->value.ptr(), cout, K);
    for (int n = 0; n < s.n; ++n) {
      const detail::CMapRow<T> dout(self.grad.ptr() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
      const T* xn = x->value.ptr() + n * s.per_sample();
      if (w->requires_grad) {
        const T* cn = xn;
        if (k != 1) {
          detail::im2col(xn, s.c, s.h, s.w, k, col.data());
          cn = col.data();
        }
        detail::MapRow<T>(w->g().ptr(), cout, K).noalias() += dout * detail::CMapRow<T>(cn, K, hw).transpose();
      }
      if (x->requires_grad) {
        T* gx = x->g().ptr() + n * s.per_sample();
        if (k == 1) {
          detail::MapRow<T>(gx, K, hw).noalias() += wm.transpose() * dout;
        } else {
          detail::MapRow<T>(dcol.data(), K, hw).noalias() = wm.transpose() * dout;
          detail::col2im_add(dcol.data(), s.c, s.h, s.w, k, gx);
        }
      }
    }
  });
}

/// x: (N, D, 1, 1) or any shape flattened per sample; w: (O, D, 1, 1); b: (O, 1, 1, 1).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape s = x->shape();
  const int D = static_cast<int>(s.per_sample());
  const int O = w->shape().n;
  if (static_cast<int>(w->shape().per_sample()) != D) throw Error("linear: weight " + w->shape().str() + " vs input " + s.str());
  Tensor<T> y({s.n, O, 1, 1});
  detail::MapRow<T> ym(y.ptr(), s.n, O);
  ym.noalias() = detail::CMapRow<T>(x->value.ptr(), s.n, D) * detail::CMapRow<T>(w->value.ptr(), O, D).transpose();
  for (int n = 0; n < s.n; ++n)
    for (int o = 0; o < O; ++o) ym(n, o) += b->value[o];
  return make_node<T>(std::move(y), {x, w, b}, [D, O](Node<T>& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    auto& b = self.parents[2];
    const int N = x->shape().n;
    detail::CMapRow<T> dy(self.grad.ptr(), N, O);
    if (x->requires_grad)
      detail::MapRow<T>(x->g().ptr(), N, D).noalias() += dy * detail::CMapRow<T>(w->value.ptr(), O, D);
    if (w->requires_grad)
      detail::MapRow<T>(w->g().ptr(), O, D).noalias() += dy.transpose() * detail::CMapRow<T>(x->value.ptr(), N, D);
    if (b->requires_grad) {
      auto& gb = b->g();
      for (int o = 0; o < O; ++o) gb[o] += dy.col(o).sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization over (C/groups x H x W) per sample, per-channel affine.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  const Shape s = x->shape();
  if (groups < 1 || s.c % groups) throw Error("group_norm: channels not divisible by groups");
  const int cg = s.c / groups;
  const std::size_t hw = s.hw();
  const std::size_t m = static_cast<std::size_t>(cg) * hw;
  Tensor<T> y(s);
  std::vector<T> xhat(s.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(s.n) * groups);
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + g * cg) * hw;
      double mean = 0.0;
      for (std::size_t i = 0; i < m; ++i) mean += x->value[base + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = x->value[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      inv_std[static_cast<std::size_t>(n) * groups + g] = is;
      for (int c = 0; c < cg; ++c) {
        const int ch = g * cg + c;
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t k = base + c * hw + p;
          xhat[k] = static_cast<T>((x->value[k] - mean) * is);
          y[k] = gamma->value[ch] * xhat[k] + beta->value[ch];
        }
      }
    }
  return make_node<T>(std::move(y), {x, gamma, beta},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, cg, hw, m](Node<T>& self) {
                        auto& x = self.parents[0];
                        auto& gamma = self.parents[1];
                        auto& beta = self.parents[2];
                        const Shape s = x->shape();
                        for (int n = 0; n < s.n; ++n)
                          for (int g = 0; g < groups; ++g) {
                            const std::size_t base = (static_cast<std::size_t>(n) * s.c + g * cg) * hw;
                            double sum_d = 0.0, sum_dx = 0.0;
                            for (int c = 0; c < cg; ++c) {
                              const int ch = g * cg + c;
                              T dg = 0, db = 0;
                              for (std::size_t p = 0; p < hw; ++p) {
                                const std::size_t k = base + c * hw + p;
                                const T dy = self.grad[k];
                                dg += dy * xhat[k];
                                db += dy;
                                const double dxh = static_cast<double>(dy) * gamma->value[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[k];
                              }
                              if (gamma->requires_grad) gamma->g()[ch] += dg;
                              if (beta->requires_grad) beta->g()[ch] += db;
                            }
                            if (!x->requires_grad) continue;
                            auto& gx = x->g();
                            const double md = sum_d / static_cast<double>(m), mdx = sum_dx / static_cast<double>(m);
                            const double is = inv_std[static_cast<std::size_t>(n) * groups + g];
                            for (int c = 0; c < cg; ++c) {
                              const int ch = g * cg + c;
                              for (std::size_t p = 0; p < hw; ++p) {
                                const std::size_t k = base + c * hw + p;
                                const double dxh = static_cast<double>(self.grad[k]) * gamma->value[ch];
                                gx[k] += static_cast<T>(is * (dxh - md - xhat[k] * mdx));
                              }
                            }
                          }
                      });
}

/// Divides each pixel's channel vector by its L2 norm.
template <class T>
Var<T> channel_unit_normalize(const Var<T>& x, T eps = T(1e-10)) {
  const Shape s = x->shape();
  const std::size_t hw = s.hw();
  Tensor<T> y(s);
  std::vector<T> inv(static_cast<std::size_t>(s.n) * hw);
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      T ss = 0;
      for (int c = 0; c < s.c; ++c) {
        const T v = x->value[(static_cast<std::size_t>(n) * s.c + c) * hw + p];
        ss += v * v;
      }
      const T iv = T(1) / std::sqrt(ss + eps);
      inv[n * hw + p] = iv;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
        y[k] = x->value[k] * iv;
      }
    }
  return make_node<T>(std::move(y), {x}, [inv = std::move(inv), hw](Node<T>& self) {
    const Shape s = self.value.shape;
    auto& g = self.parents[0]->g();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        T dot = 0;
        for (int c = 0; c < s.c; ++c) {
          const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
          dot += self.grad[k] * self.value[k];
        }
        const T iv = inv[n * hw + p];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * hw + p;
          g[k] += iv * (self.grad[k] - self.value[k] * dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

/// Mean over all elements of (a - b)^2. Scalar (1,1,1,1) output.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same<T>(a->shape(), b->shape(), "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    acc += d * d;
  }
  const std::size_t count = a->value.size();
  Tensor<T> out(Shape{}, static_cast<T>(acc / static_cast<double>(count)));
  return make_node<T>(std::move(out), {a, b}, [count](Node<T>& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    const T k = T(2) * self.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = a->value[i] - b->value[i];
      if (a->requires_grad) a->g()[i] += k * d;
      if (b->requires_grad) b->g()[i] -= k * d;
    }
  });
}

/// Attaches an externally computed scalar loss and its gradient with respect to x.
template <class T>
Var<T> external_loss(const Var<T>& x, T value, Tensor<T> grad_wrt_x) {
  require_same<T>(grad_wrt_x.shape, x->shape(), "external_loss");
  return make_node<T>(Tensor<T>(Shape{}, value), {x}, [gx = std::move(grad_wrt_x)](Node<T>& self) {
    auto& g = self.parents[0]->g();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * gx[i];
  });
}

template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& terms) {
  T acc = 0;
  for (const auto& t : terms) {
    if (t->value.size() != 1) throw Error("sum_scalars: non-scalar term");
    acc += t->value[0];
  }
  return make_node<T>(Tensor<T>(Shape{}, acc), terms, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->g()[0] += self.grad[0];
  });
}

}  // namespace hdrdiff::nn
