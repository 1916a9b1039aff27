// SPDX-License-Identifier: Apache-2.0
//
// Training loop, checkpoint glue, guided sampling from a trained model,
// evaluation and the four-variant ablation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hdrdiff/camera_sim.hpp"
#include "hdrdiff/checkpoint.hpp"
#include "hdrdiff/config.hpp"
#include "hdrdiff/diffusion.hpp"
#include "hdrdiff/imgio.hpp"
#include "hdrdiff/losses.hpp"
#include "hdrdiff/metrics.hpp"
#include "hdrdiff/nets.hpp"
#include "hdrdiff/optim.hpp"
#include "hdrdiff/schedule.hpp"

namespace hdrdiff::training {

namespace fs = std::filesystem;
using nn::Shape;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Variants

enum class Variant { Full, EncoderOnly, NoExposure, Vanilla };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Vanilla, Variant::EncoderOnly, Variant::NoExposure, Variant::Full};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "FULL";
    case Variant::EncoderOnly: return "ENCODER_ONLY";
    case Variant::NoExposure: return "NO_EXPOSURE";
    case Variant::Vanilla: return "VANILLA";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw Error("unknown variant '" + s + "' (expected FULL, ENCODER_ONLY, NO_EXPOSURE or VANILLA)");
}

struct VariantTraits {
  bool decoder;   // decoder + reconstruction loss
  bool exposure;  // exposure loss
  nets::Conditioner conditioner;
};

inline VariantTraits traits(Variant v) {
  switch (v) {
    case Variant::Full: return {true, true, nets::Conditioner::Encoder};
    case Variant::EncoderOnly: return {false, true, nets::Conditioner::Encoder};
    case Variant::NoExposure: return {true, false, nets::Conditioner::Encoder};
    case Variant::Vanilla: return {false, false, nets::Conditioner::ConvStem};
  }
  throw Error("bad variant");
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  fs::path manifest;
  fs::path out_dir = "run";
  nets::NetConfig net;
  schedule::Kind schedule_kind = schedule::Kind::ShiftedCosine;
  double shift_ratio = 0.25;
  int timesteps = 1000;
  diffusion::GuidanceConfig guidance;
  losses::LossWeights loss;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double ema_decay = 0.999;
  long long max_steps = 1000;
  std::uint64_t seed = 0;
  long long checkpoint_every = 500;
  Variant variant = Variant::Full;
  double log_min = std::numeric_limits<double>::quiet_NaN();  // NaN: fitted to the training set
  double log_max = std::numeric_limits<double>::quiet_NaN();
  double epsilon_log = imgio::kDefaultEpsilonLog;
  bool clip_x0 = true;  // sampler clamps its x0 estimate each step

  bool log_range_resolved() const { return std::isfinite(log_min) && std::isfinite(log_max); }

  imgio::LogRange log_range() const {
    if (!log_range_resolved()) throw Error("TrainConfig: log range not resolved");
    return {log_min, log_max, epsilon_log};
  }

  /// Loss switches after applying the variant's toggles.
  losses::LossWeights effective_losses() const {
    losses::LossWeights w = loss;
    const auto tr = traits(variant);
    w.use_rec = w.use_rec && tr.decoder;
    w.use_exp = w.use_exp && tr.exposure;
    return w;
  }

  /// Network config with the init seed mixed with the run seed.
  nets::NetConfig model_net() const {
    nets::NetConfig c = net;
    c.init_seed = camera::derive_seed(seed, net.init_seed);
    return c;
  }

  void validate() const {
    net.validate();
    guidance.validate();
    loss.validate(net.base_resolution);
    if (max_steps < 1) throw Error("TrainConfig: max_steps must be >= 1");
    if (checkpoint_every < 1) throw Error("TrainConfig: checkpoint_every must be >= 1");
    if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be > 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw Error("TrainConfig: ema_decay must lie in [0, 1)");
    if (timesteps < 2) throw Error("TrainConfig: timesteps must be >= 2");
    if (!(shift_ratio > 0.0)) throw Error("TrainConfig: shift_ratio must be > 0");
    if (!(epsilon_log > 0.0)) throw Error("TrainConfig: epsilon_log must be > 0");
    if (log_range_resolved() && !(log_max > log_min)) throw Error("TrainConfig: log_max must exceed log_min");
  }

  config::KeyValue to_kv() const {
    using config::format_double;
    config::KeyValue kv;
    kv.set("manifest", manifest.string());
    kv.set("out_dir", out_dir.string());
    kv.set("variant", to_string(variant));
    kv.set("seed", std::to_string(seed));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("learning_rate", format_double(learning_rate));
    kv.set("ema_decay", format_double(ema_decay));
    kv.set("max_steps", std::to_string(max_steps));
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    kv.set("base_resolution", std::to_string(net.base_resolution));
    kv.set("base_channels", std::to_string(net.base_channels));
    kv.set("channel_multipliers", config::format_int_list(net.channel_multipliers));
    kv.set("recurrent_steps", std::to_string(net.recurrent_steps));
    kv.set("z_dim", std::to_string(net.z_dim));
    kv.set("time_embed_dim", std::to_string(net.time_embed_dim));
    kv.set("attention_levels",
           config::format_int_list(std::vector<int>(net.attention_levels.begin(), net.attention_levels.end())));
    kv.set("norm_groups", std::to_string(net.norm_groups));
    kv.set("init_seed", std::to_string(net.init_seed));
    kv.set("spatial_condition", net.spatial_condition ? "true" : "false");
    kv.set("schedule", schedule_kind == schedule::Kind::Cosine ? "cosine" : "shifted");
    kv.set("shift_ratio", format_double(shift_ratio));
    kv.set("timesteps", std::to_string(timesteps));
    kv.set("guidance_scale", format_double(guidance.scale));
    kv.set("p_uncond", format_double(guidance.p_uncond));
    kv.set("zeta", format_double(loss.zeta));
    kv.set("use_mstl", loss.use_mstl ? "true" : "false");
    kv.set("use_rec", loss.use_rec ? "true" : "false");
    kv.set("use_lpips", loss.use_lpips ? "true" : "false");
    kv.set("use_exp", loss.use_exp ? "true" : "false");
    kv.set("mstl_scales", config::format_int_list(loss.scales));
    kv.set("log_min", std::isfinite(log_min) ? format_double(log_min) : "auto");
    kv.set("log_max", std::isfinite(log_max) ? format_double(log_max) : "auto");
    kv.set("epsilon_log", format_double(epsilon_log));
    kv.set("clip_x0", clip_x0 ? "true" : "false");
    return kv;
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = [] {
      std::set<std::string> out;
      const auto kv = TrainConfig{}.to_kv();
      for (const auto& [key, _] : kv.values()) out.insert(key);
      return out;
    }();
    return k;
  }

  /// Keys that may differ between a checkpoint and the run resuming from it.
  static const std::set<std::string>& run_only_keys() {
    static const std::set<std::string> k{"manifest", "out_dir", "max_steps", "checkpoint_every", "clip_x0"};
    return k;
  }

  /// Applies every key present in `kv` on top of `base`; unknown keys are errors.
  static TrainConfig from_kv(const config::KeyValue& kv) { return from_kv(kv, TrainConfig()); }
  static TrainConfig from_kv(const config::KeyValue& kv, TrainConfig c) {
    using namespace config;
    kv.require_known(keys());
    for (const auto& [k, v] : kv.values()) {
      if (k == "manifest") c.manifest = v;
      else if (k == "out_dir") c.out_dir = v;
      else if (k == "variant") c.variant = parse_variant(v);
      else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_int(k, v));
      else if (k == "batch_size") c.batch_size = static_cast<int>(parse_int(k, v));
      else if (k == "learning_rate") c.learning_rate = parse_double(k, v);
      else if (k == "ema_decay") c.ema_decay = parse_double(k, v);
      else if (k == "max_steps") c.max_steps = parse_int(k, v);
      else if (k == "checkpoint_every") c.checkpoint_every = parse_int(k, v);
      else if (k == "base_resolution") c.net.base_resolution = static_cast<int>(parse_int(k, v));
      else if (k == "base_channels") c.net.base_channels = static_cast<int>(parse_int(k, v));
      else if (k == "channel_multipliers") c.net.channel_multipliers = parse_int_list(k, v);
      else if (k == "recurrent_steps") c.net.recurrent_steps = static_cast<int>(parse_int(k, v));
      else if (k == "z_dim") c.net.z_dim = static_cast<int>(parse_int(k, v));
      else if (k == "time_embed_dim") c.net.time_embed_dim = static_cast<int>(parse_int(k, v));
      else if (k == "attention_levels") {
        const auto l = parse_int_list(k, v);
        c.net.attention_levels = std::set<int>(l.begin(), l.end());
      } else if (k == "norm_groups") c.net.norm_groups = static_cast<int>(parse_int(k, v));
      else if (k == "init_seed") c.net.init_seed = static_cast<std::uint64_t>(parse_int(k, v));
      else if (k == "spatial_condition") c.net.spatial_condition = parse_bool(k, v);
      else if (k == "schedule") c.schedule_kind = schedule::parse_kind(v);
      else if (k == "shift_ratio") c.shift_ratio = parse_double(k, v);
      else if (k == "timesteps") c.timesteps = static_cast<int>(parse_int(k, v));
      else if (k == "guidance_scale") c.guidance.scale = parse_double(k, v);
      else if (k == "p_uncond") c.guidance.p_uncond = parse_double(k, v);
      else if (k == "zeta") c.loss.zeta = parse_double(k, v);
      else if (k == "use_mstl") c.loss.use_mstl = parse_bool(k, v);
      else if (k == "use_rec") c.loss.use_rec = parse_bool(k, v);
      else if (k == "use_lpips") c.loss.use_lpips = parse_bool(k, v);
      else if (k == "use_exp") c.loss.use_exp = parse_bool(k, v);
      else if (k == "mstl_scales") c.loss.scales = parse_int_list(k, v);
      else if (k == "log_min") c.log_min = v == "auto" ? std::numeric_limits<double>::quiet_NaN() : parse_double(k, v);
      else if (k == "log_max") c.log_max = v == "auto" ? std::numeric_limits<double>::quiet_NaN() : parse_double(k, v);
      else if (k == "epsilon_log") c.epsilon_log = parse_double(k, v);
      else if (k == "clip_x0") c.clip_x0 = parse_bool(k, v);
    }
    return c;
  }

  schedule::NoiseSchedule noise_schedule() const { return schedule::discretize(schedule_kind, shift_ratio, timesteps); }
};

/// Throws unless every model-defining key agrees.
inline void require_compatible(const TrainConfig& a, const TrainConfig& b) {
  const auto ka = a.to_kv(), kb = b.to_kv();
  for (const auto& key : TrainConfig::keys()) {
    if (TrainConfig::run_only_keys().count(key)) continue;
    if (key == "log_min" || key == "log_max") {
      const bool ra = a.log_range_resolved(), rb = b.log_range_resolved();
      if (ra && rb && ka.get(key) != kb.get(key))
        throw Error("checkpoint config mismatch on '" + key + "': " + ka.get(key) + " vs " + kb.get(key));
      continue;
    }
    if (ka.get(key) != kb.get(key))
      throw Error("checkpoint config mismatch on '" + key + "': " + ka.get(key) + " vs " + kb.get(key));
  }
}

// ---------------------------------------------------------------------------
// Data

/// Paired images held in memory, both as buffers and as model-ready tensors.
struct PairedData {
  std::vector<ImageBuffer> hdr;  // HDR_LINEAR
  std::vector<ImageBuffer> ldr;  // LDR_NORMALIZED
  Tensor<float> x0;              // model domain (N, 3, H, W)
  Tensor<float> ldr_t;           // [0, 1] (N, 3, H, W)

  int size() const { return static_cast<int>(hdr.size()); }
};

inline std::pair<std::vector<ImageBuffer>, std::vector<ImageBuffer>> read_pairs(const fs::path& manifest) {
  const auto m = camera::read_manifest(manifest);
  if (m.rows.empty()) throw Error("manifest " + manifest.string() + " lists no pairs");
  std::vector<ImageBuffer> hdr, ldr;
  for (const auto& r : m.rows) {
    hdr.push_back(imgio::read_pfm(r.hdr_path));
    ldr.push_back(imgio::read_ppm(r.ldr_path));
    if (!hdr.back().same_shape(ldr.back()))
      throw Error("pair " + std::to_string(r.index) + ": HDR and LDR sizes differ");
  }
  return {std::move(hdr), std::move(ldr)};
}

/// [min, max] of ln(v + eps) over all pixels, widened by 5% of the span on each side.
inline std::pair<double, double> fit_log_range(const std::vector<ImageBuffer>& hdr, double epsilon_log) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& img : hdr)
    for (float v : img.data()) {
      const double l = std::log(static_cast<double>(v) + epsilon_log);
      lo = std::min(lo, l);
      hi = std::max(hi, l);
    }
  if (!(hi > lo + 1e-6)) return {lo - 1.0, hi + 1.0};
  const double margin = 0.05 * (hi - lo);
  return {lo - margin, hi + margin};
}

inline PairedData make_paired(std::vector<ImageBuffer> hdr, std::vector<ImageBuffer> ldr, const imgio::LogRange& range) {
  PairedData d;
  std::vector<ImageBuffer> model;
  for (const auto& h : hdr) model.push_back(imgio::to_model_domain(h, range));
  d.x0 = nn::images_to_tensor<float>(model);
  d.ldr_t = nn::images_to_tensor<float>(ldr);
  d.hdr = std::move(hdr);
  d.ldr = std::move(ldr);
  return d;
}

inline PairedData load_pairs(const fs::path& manifest, const imgio::LogRange& range) {
  auto [hdr, ldr] = read_pairs(manifest);
  return make_paired(std::move(hdr), std::move(ldr), range);
}

/// LDR in [0, 1] mapped affinely onto the model domain [-1, 1].
inline Tensor<float> ldr_to_model(const Tensor<float>& ldr) {
  Tensor<float> out(ldr.shape);
  for (std::size_t i = 0; i < ldr.size(); ++i) out[i] = 2.0f * ldr[i] - 1.0f;
  return out;
}

/// Naive reconstruction: the LDR read directly as a model-domain image and decoded to linear HDR.
inline ImageBuffer naive_hdr(const ImageBuffer& ldr, const imgio::LogRange& range) {
  require_range(ldr, DynamicRange::LdrNormalized, "naive_hdr");
  std::vector<float> out(ldr.size());
  const auto d = ldr.data();
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>(range.from_model(2.0 * d[i] - 1.0));
  return ImageBuffer(ldr.height(), ldr.width(), DynamicRange::HdrLinear, std::move(out));
}

// ---------------------------------------------------------------------------
// Trainer

inline std::unique_ptr<nets::ModelBundle<float>> make_bundle(const TrainConfig& cfg) {
  const auto tr = traits(cfg.variant);
  return std::make_unique<nets::ModelBundle<float>>(cfg.model_net(), tr.conditioner, tr.decoder);
}

/// Model, optimizer, EMA, schedule and the single RNG stream of one training run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, PairedData data)
      : cfg_(std::move(cfg)),
        data_(std::move(data)),
        weights_(cfg_.effective_losses()),
        bundle_(make_bundle(cfg_)),
        adam_(bundle_->params, cfg_.learning_rate),
        ema_(bundle_->params, cfg_.ema_decay),
        sched_(cfg_.noise_schedule()),
        range_(cfg_.log_range()),
        rng_(cfg_.seed) {
    cfg_.validate();
    const int r = cfg_.net.base_resolution;
    if (data_.size() > 0 && (data_.x0.shape.h != r || data_.x0.shape.w != r))
      throw Error("training data is " + std::to_string(data_.x0.shape.h) + "x" + std::to_string(data_.x0.shape.w) +
                  " but base_resolution is " + std::to_string(r));
  }

  const TrainConfig& config() const { return cfg_; }
  const PairedData& data() const { return data_; }
  nets::ModelBundle<float>& model() { return *bundle_; }
  const nets::ModelBundle<float>& model() const { return *bundle_; }
  optim::Ema<float>& ema() { return ema_; }
  const schedule::NoiseSchedule& noise_schedule() const { return sched_; }
  long long steps_done() const { return step_; }
  std::mt19937_64& rng() { return rng_; }

  /// One update on a batch drawn (with replacement) from the training data.
  losses::LossReport step() {
    if (data_.size() == 0) throw Error("Trainer: no training data");
    const int B = cfg_.batch_size;
    const Shape s{B, 3, data_.x0.shape.h, data_.x0.shape.w};
    Tensor<float> x0(s), ldr(s);
    std::uniform_int_distribution<int> pick(0, data_.size() - 1);
    for (int n = 0; n < B; ++n) {
      const int k = pick(rng_);
      nn::copy_sample(data_.x0, k, x0, n);
      nn::copy_sample(data_.ldr_t, k, ldr, n);
    }
    return train_step(x0, ldr);
  }

  /// One update on an explicit batch: x0 in the model domain, ldr in [0, 1].
  losses::LossReport train_step(const Tensor<float>& x0, const Tensor<float>& ldr) {
    nn::require_same<float>(x0.shape, ldr.shape, "train_step");
    const int B = x0.shape.n;

    std::uniform_int_distribution<int> pick_t(1, sched_.T);
    std::vector<int> t(static_cast<std::size_t>(B));
    for (auto& v : t) v = pick_t(rng_);
    Tensor<float> eps(x0.shape);
    nn::fill_normal(eps, rng_);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<float> keep(static_cast<std::size_t>(B));
    for (auto& k : keep) k = u01(rng_) < cfg_.guidance.p_uncond ? 0.0f : 1.0f;

    const Tensor<float> x_t = diffusion::q_sample(x0, std::span<const int>(t), eps, sched_);
    const auto ldr_v = nn::constant(ldr);
    const auto z = bundle_->encode(ldr_v);
    const auto z_used = nn::mask_samples(z, keep);
    nn::Var<float> ldr_cond;
    if (cfg_.net.spatial_condition) {
      Tensor<float> lc = ldr_to_model(ldr);
      const std::size_t m = lc.shape.per_sample();
      for (int n = 0; n < B; ++n)
        if (keep[static_cast<std::size_t>(n)] == 0.0f) std::fill_n(lc.data.begin() + static_cast<std::ptrdiff_t>(n * m), m, 0.0f);
      ldr_cond = nn::constant(std::move(lc));
    }
    const auto x_t_v = nn::constant(x_t);
    const auto eps_pred = bundle_->denoise(x_t_v, t, z_used, ldr_cond);

    losses::LossReport report;
    for (const auto& n : losses::term_names()) report.per_term[n] = 0.0;
    std::vector<nn::Var<float>> terms;

    if (weights_.use_mstl) {
      auto l = losses::multiscale_loss(eps, eps_pred->value, weights_.resolved_scales(x0.shape.h));
      report.per_term["mstl"] = l.value;
      terms.push_back(nn::external_loss(eps_pred, l.value, std::move(l.grad)));
    }
    if (weights_.use_rec) {
      const auto dec = bundle_->decode(z);
      auto l = losses::reconstruction_loss(ldr, dec->value);
      report.per_term["rec"] = l.value;
      terms.push_back(nn::external_loss(dec, l.value, std::move(l.grad)));
    }
    if (weights_.use_lpips || weights_.use_exp) {
      std::vector<float> from_eps(static_cast<std::size_t>(B));
      Tensor<float> offset(x0.shape);
      const std::size_t m = x0.shape.per_sample();
      for (int n = 0; n < B; ++n) {
        const auto c = diffusion::x0_coefficients(t[static_cast<std::size_t>(n)], sched_);
        from_eps[static_cast<std::size_t>(n)] = static_cast<float>(c.from_eps);
        for (std::size_t i = 0; i < m; ++i) offset[n * m + i] = static_cast<float>(c.from_xt * x_t[n * m + i]);
      }
      const auto x0_hat = nn::clamp(nn::per_sample_affine(eps_pred, std::move(from_eps), &offset), -1.0f, 1.0f);
      if (weights_.use_lpips) {
        const auto d = extractor_.distance(x0_hat, nn::constant(x0));
        report.per_term["lpips"] = d->value[0];
        terms.push_back(d);
      }
      if (weights_.use_exp) {
        const imgio::LogRange r = range_;
        const auto x0_norm = nn::map<float>(
            x0_hat,
            [r](float m) {
              const double v = r.from_model(m);
              return static_cast<float>(v / (1.0 + v));
            },
            [r](float m, float) {
              const double v = r.from_model(m);
              return static_cast<float>(r.from_model_slope(m) / ((1.0 + v) * (1.0 + v)));
            });
        auto l = losses::exposure_loss(x0_norm->value, ldr, weights_.zeta);
        report.per_term["exp"] = l.value;
        terms.push_back(nn::external_loss(x0_norm, l.value, std::move(l.grad)));
      }
    }
    for (const auto& [_, v] : report.per_term) report.total += v;
    if (!std::isfinite(report.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step_ + 1 << ":";
      for (const auto& [k, v] : report.per_term) os << " " << k << "=" << v;
      throw Error(os.str());
    }

    bundle_->params.zero_grad();
    nn::backward(nn::sum_scalars(terms));
    adam_.step(bundle_->params);
    ema_.update(bundle_->params);
    ++step_;
    return report;
  }

  checkpoint::Archive archive() const {
    checkpoint::Archive a;
    a.config_text = cfg_.to_kv().str();
    a.step = static_cast<std::uint64_t>(step_);
    std::ostringstream os;
    os << rng_;
    a.rng_state = os.str();
    const auto& params = bundle_->params.all();
    auto& self = const_cast<Trainer&>(*this);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = params[i].first;
      a.arrays["param/" + name].assign(params[i].second->value.data.begin(), params[i].second->value.data.end());
      a.arrays["ema/" + name].assign(ema_.shadow()[i].data.begin(), ema_.shadow()[i].data.end());
      a.arrays["adam_m/" + name].assign(self.adam_.first_moments()[i].data.begin(), self.adam_.first_moments()[i].data.end());
      a.arrays["adam_v/" + name].assign(self.adam_.second_moments()[i].data.begin(), self.adam_.second_moments()[i].data.end());
    }
    return a;
  }

  void save(const fs::path& path) const { checkpoint::save(archive(), path); }

  /// Restores weights, optimizer state, EMA, step and RNG; the archived config must be compatible.
  void restore(const checkpoint::Archive& a) {
    const TrainConfig saved = TrainConfig::from_kv(config::KeyValue::parse(a.config_text));
    require_compatible(saved, cfg_);
    const auto& params = bundle_->params.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = params[i].first;
      auto load = [&](const std::string& key, Tensor<float>& dst) {
        const auto& src = a.array(key);
        if (src.size() != dst.size()) throw FormatError("checkpoint: size mismatch for " + key);
        dst.data.assign(src.begin(), src.end());
      };
      load("param/" + name, params[i].second->value);
      load("ema/" + name, ema_.shadow()[i]);
      load("adam_m/" + name, adam_.first_moments()[i]);
      load("adam_v/" + name, adam_.second_moments()[i]);
    }
    step_ = static_cast<long long>(a.step);
    adam_.set_steps(step_);
    std::istringstream is(a.rng_state);
    is >> rng_;
    if (!is) throw FormatError("checkpoint: bad RNG state");
  }

 private:
  TrainConfig cfg_;
  PairedData data_;
  losses::LossWeights weights_;
  std::unique_ptr<nets::ModelBundle<float>> bundle_;
  optim::Adam<float> adam_;
  optim::Ema<float> ema_;
  schedule::NoiseSchedule sched_;
  imgio::LogRange range_;
  losses::FeatureExtractor<float> extractor_;
  std::mt19937_64 rng_;
  long long step_ = 0;
};

// ---------------------------------------------------------------------------
// Loading a trained model

struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<nets::ModelBundle<float>> bundle;
  long long step = 0;
};

/// Rebuilds the model described by a checkpoint and loads its EMA weights
/// (raw weights when `use_ema` is false).
inline LoadedModel load_model(const fs::path& path, bool use_ema = true) {
  const auto a = checkpoint::load(path);
  LoadedModel m;
  m.config = TrainConfig::from_kv(config::KeyValue::parse(a.config_text));
  m.config.validate();
  m.config.log_range();
  m.bundle = make_bundle(m.config);
  m.step = static_cast<long long>(a.step);
  for (const auto& [name, v] : m.bundle->params.all()) {
    const auto& src = a.array((use_ema ? "ema/" : "param/") + name);
    if (src.size() != v->value.size()) throw FormatError("checkpoint: size mismatch for " + name);
    v->value.data.assign(src.begin(), src.end());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Sampling

/// Guided ancestral sampling for a batch of LDR inputs ([0, 1] tensor); returns
/// model-domain samples clamped to [-1, 1].
inline Tensor<float> sample_model_domain(const nets::ModelBundle<float>& model, const schedule::NoiseSchedule& sched,
                                         const Tensor<float>& ldr, double guidance_scale, std::uint64_t seed,
                                         bool clip_x0 = true) {
  nn::NoGradGuard no_grad;
  const int N = ldr.shape.n;
  const Tensor<float> z = model.encode(nn::constant(ldr))->value;
  nn::Var<float> ldr2;
  if (model.config.spatial_condition) {
    Tensor<float> lc({2 * N, 3, ldr.shape.h, ldr.shape.w});
    const Tensor<float> lm = ldr_to_model(ldr);
    std::copy(lm.data.begin(), lm.data.end(), lc.data.begin());  // null half stays zero
    ldr2 = nn::constant(std::move(lc));
  }
  const diffusion::Denoiser<float> den = [&](const Tensor<float>& x, const std::vector<int>& t,
                                             const Tensor<float>& cond) {
    return model.denoise(nn::constant(x), t, nn::constant(cond), ldr2)->value;
  };
  diffusion::GuidanceConfig g;
  g.scale = guidance_scale;
  Tensor<float> x = diffusion::sample(den, z, ldr.shape, sched, g, seed, clip_x0);
  for (auto& v : x.data) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

/// One HDR sample per LDR image, in chunks of at most `chunk` images.
inline std::vector<ImageBuffer> sample_hdr(const nets::ModelBundle<float>& model, const TrainConfig& cfg,
                                           const std::vector<ImageBuffer>& ldr, double guidance_scale,
                                           std::uint64_t seed, int chunk = 16) {
  const auto sched = cfg.noise_schedule();
  const auto range = cfg.log_range();
  std::vector<ImageBuffer> out;
  for (std::size_t start = 0, c = 0; start < ldr.size(); start += static_cast<std::size_t>(chunk), ++c) {
    const std::size_t end = std::min(ldr.size(), start + static_cast<std::size_t>(chunk));
    const auto batch = nn::images_to_tensor<float>(std::span<const ImageBuffer>(ldr.data() + start, end - start));
    const auto x = sample_model_domain(model, sched, batch, guidance_scale, camera::derive_seed(seed, c), cfg.clip_x0);
    for (int n = 0; n < x.shape.n; ++n)
      out.push_back(imgio::from_model_domain(nn::tensor_to_image(x, n, DynamicRange::LogHdr), range));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline constexpr double kEvalGamma = 2.2;

/// Scores predictions against ground truth, both tonemapped with gamma 2.2.
inline metrics::EvalReport score_predictions(const std::vector<ImageBuffer>& pred, const std::vector<ImageBuffer>& truth,
                                             const std::vector<ImageBuffer>& ldr) {
  if (pred.size() != truth.size() || pred.size() != ldr.size()) throw Error("score_predictions: count mismatch");
  metrics::EvalReport r;
  for (std::size_t i = 0; i < pred.size(); ++i)
    r.rows.push_back(
        metrics::score(imgio::tonemap(pred[i], kEvalGamma), imgio::tonemap(truth[i], kEvalGamma), ldr[i]));
  return r;
}

inline metrics::EvalReport evaluate_model(const nets::ModelBundle<float>& model, const TrainConfig& cfg,
                                          const std::vector<ImageBuffer>& hdr, const std::vector<ImageBuffer>& ldr,
                                          double guidance_scale, std::uint64_t seed,
                                          std::vector<ImageBuffer>* predictions = nullptr) {
  auto pred = sample_hdr(model, cfg, ldr, guidance_scale, seed);
  auto report = score_predictions(pred, hdr, ldr);
  if (predictions) *predictions = std::move(pred);
  return report;
}

/// Samples one HDR per manifest pair and writes the per-image CSV plus aggregate row.
inline metrics::EvalReport evaluate(const fs::path& checkpoint_path, const fs::path& manifest, const fs::path& out_csv,
                                    std::optional<double> guidance_scale = {}, std::uint64_t seed = 0) {
  const auto m = load_model(checkpoint_path);
  auto [hdr, ldr] = read_pairs(manifest);
  const auto report =
      evaluate_model(*m.bundle, m.config, hdr, ldr, guidance_scale.value_or(m.config.guidance.scale), seed);
  report.write_csv(out_csv);
  return report;
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainResult {
  std::vector<fs::path> checkpoints;
  std::vector<losses::LossReport> losses;  // steps run by this call
  fs::path final_checkpoint;
  TrainConfig config;                      // with the resolved log range
};

inline fs::path checkpoint_name(const fs::path& dir, long long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06lld.bin", step);
  return dir / buf;
}

/// Resolves the log range from the manifest's HDR images if unset.
inline TrainConfig resolve_log_range(TrainConfig cfg, const std::vector<ImageBuffer>& hdr) {
  if (!cfg.log_range_resolved()) {
    const auto [lo, hi] = fit_log_range(hdr, cfg.epsilon_log);
    cfg.log_min = lo;
    cfg.log_max = hi;
  }
  return cfg;
}

using StepCallback = std::function<void(long long step, const losses::LossReport&)>;

/// Runs until max_steps, writing loss.csv, config.txt and a checkpoint every
/// checkpoint_every steps plus one at the final step.
inline TrainResult train(TrainConfig cfg, const std::optional<fs::path>& resume = {}, const StepCallback& on_step = {}) {
  auto [hdr, ldr] = read_pairs(cfg.manifest);
  std::optional<checkpoint::Archive> archive;
  if (resume) {
    archive = checkpoint::load(*resume);
    const TrainConfig saved = TrainConfig::from_kv(config::KeyValue::parse(archive->config_text));
    if (!cfg.log_range_resolved()) {
      cfg.log_min = saved.log_min;
      cfg.log_max = saved.log_max;
    }
  }
  cfg = resolve_log_range(std::move(cfg), hdr);
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  cfg.to_kv().save(cfg.out_dir / "config.txt");

  Trainer trainer(cfg, make_paired(std::move(hdr), std::move(ldr), cfg.log_range()));
  if (archive) trainer.restore(*archive);

  const fs::path csv_path = cfg.out_dir / "loss.csv";
  std::vector<std::string> kept;
  if (archive && fs::exists(csv_path)) {
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoll(line.substr(0, line.find(','))) <= trainer.steps_done()) kept.push_back(line);
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw Error("cannot write " + csv_path.string());
  csv << losses::LossReport::csv_header() << "\n";
  for (const auto& l : kept) csv << l << "\n";

  TrainResult result;
  result.config = cfg;
  while (trainer.steps_done() < cfg.max_steps) {
    const auto report = trainer.step();
    const long long s = trainer.steps_done();
    csv << report.csv_row(static_cast<long>(s)) << "\n";
    result.losses.push_back(report);
    if (on_step) on_step(s, report);
    if (s % cfg.checkpoint_every == 0 || s == cfg.max_steps) {
      csv.flush();
      const auto path = checkpoint_name(cfg.out_dir, s);
      trainer.save(path);
      result.checkpoints.push_back(path);
    }
  }
  if (!csv) throw Error("write failed: " + csv_path.string());
  result.final_checkpoint = result.checkpoints.empty() ? fs::path() : result.checkpoints.back();
  if (result.final_checkpoint.empty()) {
    result.final_checkpoint = checkpoint_name(cfg.out_dir, trainer.steps_done());
    trainer.save(result.final_checkpoint);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  Variant variant;
  metrics::MeanStd psnr, ssim, untrained_psnr;
  fs::path checkpoint;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string csv() const {
    std::string out = "variant,decoder,exposure,psnr_mean,psnr_std,ssim_mean,ssim_std,untrained_psnr_mean,untrained_psnr_std\n";
    char buf[256];
    for (const auto& r : rows) {
      const auto tr = traits(r.variant);
      std::snprintf(buf, sizeof buf, "%s,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", to_string(r.variant).c_str(),
                    tr.decoder ? 1 : 0, tr.exposure ? 1 : 0, r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std,
                    r.untrained_psnr.mean, r.untrained_psnr.std);
      out += buf;
    }
    return out;
  }
};

/// Trains every variant with the base config's seed, evaluates each (and its
/// untrained initialization) on the eval set, and writes ablation.csv,
/// one tonemapped preview per variant and a 2x2 grid.ppm
/// (rows: decoder absent/present, columns: exposure loss absent/present).
inline AblationTable run_ablation(const TrainConfig& base, const std::vector<Variant>& variants,
                                  const fs::path& eval_manifest, const fs::path& out_dir,
                                  const StepCallback& on_step = {}) {
  if (variants.empty()) throw Error("run_ablation: no variants");
  fs::create_directories(out_dir);
  auto [eval_hdr, eval_ldr] = read_pairs(eval_manifest);
  const int R = eval_hdr[0].height();
  if (eval_hdr[0].width() != R) throw Error("run_ablation: eval images must be square");
  std::vector<float> grid(static_cast<std::size_t>(2 * R) * (2 * R) * 3, 0.0f);

  AblationTable table;
  for (Variant v : variants) {
    TrainConfig cfg = base;
    cfg.variant = v;
    cfg.out_dir = out_dir / to_string(v);
    const auto result = train(cfg, std::nullopt, on_step);

    const auto untrained = make_bundle(result.config);
    const auto before = evaluate_model(*untrained, result.config, eval_hdr, eval_ldr, base.guidance.scale, base.seed);
    const auto trained = load_model(result.final_checkpoint);
    std::vector<ImageBuffer> pred;
    const auto after =
        evaluate_model(*trained.bundle, trained.config, eval_hdr, eval_ldr, base.guidance.scale, base.seed, &pred);
    after.write_csv(out_dir / (to_string(v) + "_eval.csv"));

    const ImageBuffer preview = imgio::tonemap(pred[0], kEvalGamma);
    imgio::write_ppm(preview, out_dir / (to_string(v) + ".ppm"));
    const auto tr = traits(v);
    const int oy = tr.decoder ? R : 0, ox = tr.exposure ? R : 0;
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x)
        for (int c = 0; c < 3; ++c)
          grid[(static_cast<std::size_t>(oy + y) * 2 * R + ox + x) * 3 + c] = preview.at(y, x, c);

    table.rows.push_back({v, after.psnr(), after.ssim(), before.psnr(), result.final_checkpoint});
  }
  std::ofstream(out_dir / "ablation.csv", std::ios::trunc) << table.csv();
  imgio::write_ppm(ImageBuffer(2 * R, 2 * R, DynamicRange::LdrNormalized, std::move(grid)), out_dir / "grid.ppm");
  return table;
}

}  // namespace hdrdiff::training
