// SPDX-License-Identifier: Apache-2.0
//
// Learned components: LDR encoder (-> z_sem), LDR decoder (-> LDR*), and the
// attention recurrent-residual UNet noise predictor.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hdrdiff/autograd.hpp"

namespace hdrdiff::nets {

using nn::Shape;
using nn::Tensor;
using nn::Var;

struct NetConfig {
  int base_resolution = 32;
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 2, 4};
  int recurrent_steps = 2;
  int z_dim = 64;
  int time_embed_dim = 128;
  std::set<int> attention_levels{1, 2};
  int norm_groups = 8;
  std::uint64_t init_seed = 1234;
  bool spatial_condition = false;  // also concatenate the LDR image to x_t at the denoiser input

  int depth() const { return static_cast<int>(channel_multipliers.size()); }
  int channels(int level) const { return base_channels * channel_multipliers.at(static_cast<std::size_t>(level)); }
  int bottom_resolution() const { return base_resolution >> (depth() - 1); }

  void validate() const {
    const int r = base_resolution;
    if (r < 16 || (r & (r - 1))) throw Error("NetConfig: base_resolution must be a power of two >= 16");
    if (channel_multipliers.empty()) throw Error("NetConfig: channel_multipliers must not be empty");
    if ((r >> (depth() - 1)) < 1 || (1 << (depth() - 1)) > r) throw Error("NetConfig: UNet too deep for resolution");
    if (base_channels < 1) throw Error("NetConfig: base_channels must be >= 1");
    if (recurrent_steps < 1) throw Error("NetConfig: recurrent_steps must be >= 1");
    if (z_dim < 8) throw Error("NetConfig: z_dim must be >= 8");
    if (time_embed_dim < 2 || time_embed_dim % 2) throw Error("NetConfig: time_embed_dim must be even");
    for (int m : channel_multipliers)
      if (m < 1) throw Error("NetConfig: channel multipliers must be >= 1");
    for (int a : attention_levels)
      if (a < 0 || a >= depth() - 1) throw Error("NetConfig: attention level " + std::to_string(a) + " has no skip connection");
  }
};

/// Largest group count <= preferred that divides c.
inline int groups_for(int c, int preferred) {
  for (int g = std::min(preferred, c); g > 1; --g)
    if (c % g == 0) return g;
  return 1;
}

/// Ordered, named trainable tensors.
template <class T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : rng_(seed) {}

  /// Fan-in scaled normal init, std = 1/sqrt(fan_in).
  Var<T> weight(const std::string& name, Shape s, int fan_in) {
    Tensor<T> t(s);
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    for (auto& v : t.data) v = static_cast<T>(nd(rng_));
    return add(name, std::move(t));
  }
  Var<T> filled(const std::string& name, Shape s, T value) { return add(name, Tensor<T>(s, value)); }

  Var<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw Error("duplicate parameter name " + name);
    auto v = nn::parameter(std::move(t));
    index_[name] = params_.size();
    params_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& all() const { return params_; }
  Var<T> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v->value.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, v] : params_) v->zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers

template <class T>
struct Conv {
  Var<T> w, b;
  Conv() = default;
  Conv(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int k) {
    w = reg.weight(name + ".w", {cout, cin, k, k}, cin * k * k);
    b = reg.filled(name + ".b", {cout, 1, 1, 1}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return nn::conv2d(x, w, b); }
};

template <class T>
struct Dense {
  Var<T> w, b;
  Dense() = default;
  Dense(ParamRegistry<T>& reg, const std::string& name, int din, int dout) {
    w = reg.weight(name + ".w", {dout, din, 1, 1}, din);
    b = reg.filled(name + ".b", {dout, 1, 1, 1}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return nn::linear(x, w, b); }
};

template <class T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;
  GroupNorm() = default;
  GroupNorm(ParamRegistry<T>& reg, const std::string& name, int c, int preferred_groups) {
    gamma = reg.filled(name + ".gamma", {c, 1, 1, 1}, T(1));
    beta = reg.filled(name + ".beta", {c, 1, 1, 1}, T(0));
    groups = groups_for(c, preferred_groups);
  }
  Var<T> operator()(const Var<T>& x) const { return nn::group_norm(x, gamma, beta, groups); }
};

/// Recurrent-residual block: h = proj(x); r_1 = act(norm(conv(h)) + e);
/// r_k = act(norm(conv(h + r_{k-1})) + e); out = h + r_steps. The conv and norm
/// weights are shared across iterations. With one step this is a plain residual block.
template <class T>
struct R2Block {
  std::optional<Conv<T>> proj;
  Conv<T> conv;
  GroupNorm<T> norm;
  std::optional<Dense<T>> emb;
  int steps = 1;
  int cout = 0;

  R2Block() = default;
  R2Block(ParamRegistry<T>& reg, const std::string& name, int cin, int cout_, int steps_, int groups, int emb_dim)
      : steps(steps_), cout(cout_) {
    if (cin != cout) proj.emplace(reg, name + ".proj", cin, cout, 1);
    conv = Conv<T>(reg, name + ".conv", cout, cout, 3);
    norm = GroupNorm<T>(reg, name + ".norm", cout, groups);
    if (emb_dim > 0) emb.emplace(reg, name + ".emb", emb_dim, cout);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& emb_act) const {
    const Var<T> h = proj ? (*proj)(x) : x;
    Var<T> e;
    if (emb && emb_act) e = nn::reshape((*emb)(emb_act), Shape{x->shape().n, cout, 1, 1});
    Var<T> r;
    for (int k = 0; k < steps; ++k) {
      Var<T> u = norm(conv(k == 0 ? h : nn::add(h, r)));
      if (e) u = nn::add_channel(u, e);
      r = nn::silu(u);
    }
    return nn::add(h, r);
  }
};

/// Additive attention gate on a skip connection: x * sigmoid(psi(relu(Wx x + Wg g))).
template <class T>
struct AttentionGate {
  Conv<T> wx, wg, psi;
  AttentionGate() = default;
  AttentionGate(ParamRegistry<T>& reg, const std::string& name, int cx, int cg, int ci) {
    wx = Conv<T>(reg, name + ".wx", cx, ci, 1);
    wg = Conv<T>(reg, name + ".wg", cg, ci, 1);
    psi = Conv<T>(reg, name + ".psi", ci, 1, 1);
  }
  Var<T> operator()(const Var<T>& x, const Var<T>& g) const {
    const Var<T> alpha = nn::sigmoid(psi(nn::relu(nn::add(wx(x), wg(g)))));
    return nn::mul_spatial(x, alpha);
  }
};

/// Standard transformer-style sinusoidal embedding of integer timesteps: (N, dim, 1, 1).
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(t.size()), dim, 1, 1});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      out[n * dim + k] = static_cast<T>(std::sin(t[n] * freq));
      out[n * dim + half + k] = static_cast<T>(std::cos(t[n] * freq));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Networks

/// Contracting path ending in a dense projection of the bottom feature map to z_dim.
template <class T>
struct Encoder {
  Conv<T> stem;
  std::vector<R2Block<T>> blocks;
  Dense<T> head;
  NetConfig cfg;

  Encoder() = default;
  Encoder(ParamRegistry<T>& reg, const NetConfig& c) : cfg(c) {
    const std::string p = "encoder";
    stem = Conv<T>(reg, p + ".stem", 3, c.channels(0), 3);
    int cin = c.channels(0);
    for (int i = 0; i < c.depth(); ++i) {
      blocks.emplace_back(reg, p + ".block" + std::to_string(i), cin, c.channels(i), c.recurrent_steps, c.norm_groups, 0);
      cin = c.channels(i);
    }
    const int r = c.bottom_resolution();
    head = Dense<T>(reg, p + ".head", cin * r * r, c.z_dim);
  }

  Var<T> operator()(const Var<T>& ldr) const {
    const Shape s = ldr->shape();
    if (s.c != 3 || s.h != cfg.base_resolution || s.w != cfg.base_resolution)
      throw Error("encode: expected (N,3," + std::to_string(cfg.base_resolution) + "," +
                  std::to_string(cfg.base_resolution) + ") input, got " + s.str());
    Var<T> h = stem(ldr);
    for (int i = 0; i < cfg.depth(); ++i) {
      h = blocks[static_cast<std::size_t>(i)](h, nullptr);
      if (i + 1 < cfg.depth()) h = nn::maxpool2(h);
    }
    return head(nn::silu(h));
  }
};

/// Transpose of the encoder: dense lift to the bottom map, blocks + upsampling, sigmoid output.
template <class T>
struct Decoder {
  Dense<T> lift;
  std::vector<R2Block<T>> blocks;
  GroupNorm<T> out_norm;
  Conv<T> out;
  NetConfig cfg;

  Decoder() = default;
  Decoder(ParamRegistry<T>& reg, const NetConfig& c) : cfg(c) {
    const std::string p = "decoder";
    const int r = c.bottom_resolution();
    const int top = c.channels(c.depth() - 1);
    lift = Dense<T>(reg, p + ".lift", c.z_dim, top * r * r);
    int cin = top;
    for (int i = c.depth() - 1; i >= 0; --i) {
      blocks.emplace_back(reg, p + ".block" + std::to_string(i), cin, c.channels(i), c.recurrent_steps, c.norm_groups, 0);
      cin = c.channels(i);
    }
    out_norm = GroupNorm<T>(reg, p + ".out_norm", cin, c.norm_groups);
    out = Conv<T>(reg, p + ".out", cin, 3, 3);
  }

  Var<T> operator()(const Var<T>& z) const {
    const Shape s = z->shape();
    if (static_cast<int>(s.per_sample()) != cfg.z_dim) throw Error("decode: z has wrong dimension " + s.str());
    const int r = cfg.bottom_resolution();
    Var<T> h = nn::reshape(lift(z), Shape{s.n, cfg.channels(cfg.depth() - 1), r, r});
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      h = blocks[k](h, nullptr);
      if (k + 1 < blocks.size()) h = nn::upsample2(h);
    }
    return nn::sigmoid(out(nn::silu(out_norm(h))));
  }
};

/// Single conv layer + pooling + dense map to z_dim; the conditioning path of
/// the autoencoder-free baseline.
template <class T>
struct ConvStem {
  Conv<T> conv;
  Dense<T> head;
  NetConfig cfg;

  ConvStem() = default;
  ConvStem(ParamRegistry<T>& reg, const NetConfig& c) : cfg(c) {
    conv = Conv<T>(reg, "stem.conv", 3, c.channels(0), 3);
    const int r = c.bottom_resolution();
    head = Dense<T>(reg, "stem.head", c.channels(0) * r * r, c.z_dim);
  }
  Var<T> operator()(const Var<T>& ldr) const {
    Var<T> h = nn::silu(conv(ldr));
    for (int i = 0; i + 1 < cfg.depth(); ++i) h = nn::maxpool2(h);
    return head(h);
  }
};

/// Attention recurrent-residual UNet predicting eps from (x_t, t, z).
template <class T>
struct Denoiser {
  Dense<T> time1, time2, cond;
  Conv<T> stem;
  std::vector<R2Block<T>> down;
  R2Block<T> mid;
  std::vector<R2Block<T>> up;  // up[i] produces level i
  std::map<int, AttentionGate<T>> gates;
  GroupNorm<T> out_norm;
  Conv<T> out;
  NetConfig cfg;

  Denoiser() = default;
  Denoiser(ParamRegistry<T>& reg, const NetConfig& c) : cfg(c) {
    const std::string p = "denoiser";
    const int E = c.time_embed_dim;
    time1 = Dense<T>(reg, p + ".time1", c.base_channels, E);
    time2 = Dense<T>(reg, p + ".time2", E, E);
    cond = Dense<T>(reg, p + ".cond", c.z_dim, E);
    stem = Conv<T>(reg, p + ".stem", c.spatial_condition ? 6 : 3, c.channels(0), 3);
    int cin = c.channels(0);
    for (int i = 0; i < c.depth(); ++i) {
      down.emplace_back(reg, p + ".down" + std::to_string(i), cin, c.channels(i), c.recurrent_steps, c.norm_groups, E);
      cin = c.channels(i);
    }
    mid = R2Block<T>(reg, p + ".mid", cin, cin, c.recurrent_steps, c.norm_groups, E);
    up.resize(static_cast<std::size_t>(c.depth() - 1));
    for (int i = c.depth() - 2; i >= 0; --i) {
      if (c.attention_levels.count(i))
        gates.emplace(i, AttentionGate<T>(reg, p + ".gate" + std::to_string(i), c.channels(i), cin,
                                          std::max(1, c.channels(i) / 2)));
      up[static_cast<std::size_t>(i)] =
          R2Block<T>(reg, p + ".up" + std::to_string(i), cin + c.channels(i), c.channels(i), c.recurrent_steps,
                     c.norm_groups, E);
      cin = c.channels(i);
    }
    out_norm = GroupNorm<T>(reg, p + ".out_norm", cin, c.norm_groups);
    out = Conv<T>(reg, p + ".out", cin, 3, 3);
  }

  /// `ldr` (model domain, x_t's shape) is required iff cfg.spatial_condition.
  Var<T> operator()(const Var<T>& x_t, const std::vector<int>& t, const Var<T>& z, const Var<T>& ldr = nullptr) const {
    const Shape s = x_t->shape();
    if (s.c != 3 || s.h != cfg.base_resolution || s.w != cfg.base_resolution)
      throw Error("denoise: expected (N,3," + std::to_string(cfg.base_resolution) + "," +
                  std::to_string(cfg.base_resolution) + ") input, got " + s.str());
    if (t.size() != static_cast<std::size_t>(s.n)) throw Error("denoise: need one timestep per sample");
    if (z->shape().n != s.n || static_cast<int>(z->shape().per_sample()) != cfg.z_dim)
      throw Error("denoise: condition shape " + z->shape().str());
    for (int v : t)
      if (v < 1) throw Error("denoise: timestep must be >= 1");

    const Var<T> temb = nn::constant(timestep_embedding<T>(t, cfg.base_channels));
    const Var<T> emb = nn::add(time2(nn::silu(time1(temb))), cond(z));
    const Var<T> emb_act = nn::silu(emb);

    if (cfg.spatial_condition && (!ldr || !(ldr->shape() == s)))
      throw Error("denoise: spatial conditioning needs an LDR tensor of shape " + s.str());
    Var<T> h = stem(cfg.spatial_condition ? nn::concat_channels(x_t, ldr) : x_t);
    std::vector<Var<T>> skips;
    for (int i = 0; i < cfg.depth(); ++i) {
      h = down[static_cast<std::size_t>(i)](h, emb_act);
      if (i + 1 < cfg.depth()) {
        skips.push_back(h);
        h = nn::maxpool2(h);
      }
    }
    h = mid(h, emb_act);
    for (int i = cfg.depth() - 2; i >= 0; --i) {
      h = nn::upsample2(h);
      Var<T> skip = skips[static_cast<std::size_t>(i)];
      if (auto it = gates.find(i); it != gates.end()) skip = it->second(skip, h);
      h = up[static_cast<std::size_t>(i)](nn::concat_channels(h, skip), emb_act);
    }
    return out(nn::silu(out_norm(h)));
  }
};

/// Which network produces the conditioning latent.
enum class Conditioner { Encoder, ConvStem };

/// Encoder (or conv stem), optional decoder, and denoiser sharing one parameter registry.
template <class T>
struct ModelBundle {
  NetConfig config;
  Conditioner conditioner = Conditioner::Encoder;
  bool has_decoder = true;
  ParamRegistry<T> params;
  std::optional<Encoder<T>> encoder;
  std::optional<ConvStem<T>> conv_stem;
  std::optional<Decoder<T>> decoder;
  Denoiser<T> denoiser;

  ModelBundle(const NetConfig& c, Conditioner cond, bool with_decoder)
      : config(c), conditioner(cond), has_decoder(with_decoder), params(c.init_seed) {
    c.validate();
    denoiser = Denoiser<T>(params, c);
    if (cond == Conditioner::Encoder)
      encoder.emplace(params, c);
    else
      conv_stem.emplace(params, c);
    if (with_decoder) decoder.emplace(params, c);
  }
  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;

  Var<T> encode(const Var<T>& ldr) const {
    const Shape s = ldr->shape();
    if (s.c != 3 || s.h != config.base_resolution || s.w != config.base_resolution)
      throw Error("encode: resolution mismatch, got " + s.str());
    return encoder ? (*encoder)(ldr) : (*conv_stem)(ldr);
  }
  Var<T> decode(const Var<T>& z) const {
    if (!decoder) throw Error("decode: this model has no decoder");
    return (*decoder)(z);
  }
  Var<T> denoise(const Var<T>& x_t, const std::vector<int>& t, const Var<T>& z, const Var<T>& ldr = nullptr) const {
    return denoiser(x_t, t, z, ldr);
  }

  std::size_t count_parameters() const { return params.count(); }
};

template <class T>
std::size_t count_parameters(const ModelBundle<T>& b) {
  return b.count_parameters();
}

}  // namespace hdrdiff::nets
