// SPDX-License-Identifier: Apache-2.0
//
// hdrgen command line: synth-data, train, sample, eval, ablate, schedule, tonemap.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.
#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hdrdiff/camera_sim.hpp"
#include "hdrdiff/config.hpp"
#include "hdrdiff/imgio.hpp"
#include "hdrdiff/schedule.hpp"
#include "hdrdiff/training.hpp"

namespace hdrdiff::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Missing or inconsistent arguments detected after parsing.
struct UsageError : Error {
  using Error::Error;
};

namespace detail {

inline std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

inline ImageBuffer read_hdr_any(const fs::path& p) {
  const auto e = lower_ext(p);
  if (e == ".pfm") return imgio::read_pfm(p);
  if (e == ".hdr" || e == ".rgbe" || e == ".pic") return imgio::read_rgbe(p);
  throw Error("unsupported HDR extension '" + e + "' (expected .pfm or .hdr)");
}

/// Training flags that map one-to-one onto config keys.
struct OverrideFlag {
  const char* flag;
  const char* key;
  const char* help;
};

inline const std::vector<OverrideFlag>& train_flags() {
  static const std::vector<OverrideFlag> f{
      {"--manifest", "manifest", "training manifest.csv"},
      {"--out", "out_dir", "output directory"},
      {"--variant", "variant", "FULL, ENCODER_ONLY, NO_EXPOSURE or VANILLA"},
      {"--steps", "max_steps", "number of optimizer steps"},
      {"--batch", "batch_size", "batch size"},
      {"--lr", "learning_rate", "learning rate"},
      {"--ema", "ema_decay", "EMA decay in [0, 1)"},
      {"--checkpoint-every", "checkpoint_every", "steps between checkpoints"},
      {"--resolution", "base_resolution", "image side (power of two)"},
      {"--channels", "base_channels", "base channel count"},
      {"--recurrent-steps", "recurrent_steps", "iterations per recurrent block"},
      {"--z-dim", "z_dim", "conditioning latent size"},
      {"--timesteps", "timesteps", "diffusion steps T"},
      {"--schedule", "schedule", "cosine or shifted"},
      {"--shift", "shift_ratio", "shift ratio of the shifted schedule"},
      {"--guidance", "guidance_scale", "classifier-free guidance scale"},
      {"--p-uncond", "p_uncond", "null-condition probability during training"},
      {"--zeta", "zeta", "exposure loss weight"},
      {"--spatial-condition", "spatial_condition", "true to concatenate the LDR image to x_t"},
  };
  return f;
}

/// Registers the override flags plus --config on `cmd`; values land in `store`.
inline void add_train_options(CLI::App* cmd, std::map<std::string, std::string>& store, std::string& config_path) {
  cmd->add_option("--config", config_path, "key = value config file; flags override its values");
  for (const auto& f : train_flags()) cmd->add_option(f.flag, store[f.key], f.help);
}

inline training::TrainConfig build_config(const CLI::App* cmd, const std::map<std::string, std::string>& store,
                                          const std::string& config_path, std::uint64_t seed) {
  config::KeyValue kv;
  if (!config_path.empty()) kv = config::KeyValue::load(config_path);
  for (const auto& f : train_flags())
    if (cmd->count(f.flag)) kv.set(f.key, store.at(f.key));
  if (cmd->count("--seed")) kv.set("seed", std::to_string(seed));
  for (const char* key : {"manifest", "out_dir"})
    if (!kv.has(key) || kv.get(key).empty())
      throw UsageError(cmd->get_name() + ": config key '" + key + "' is required (flag " +
                       (std::string(key) == "manifest" ? "--manifest" : "--out") + " or --config)");
  auto cfg = training::TrainConfig::from_kv(kv);
  cfg.validate();
  return cfg;
}

}  // namespace detail

/// Parses argv and runs one command.
inline int run(int argc, char** argv) {
  CLI::App app{"Conditional diffusion for single-image HDR reconstruction", "hdrgen"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "random seed"); };

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate paired synthetic HDR/LDR scenes");
  std::string synth_out;
  int synth_count = 256;
  camera::DatasetOptions synth_opt;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n,--count", synth_count, "number of pairs")->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_opt.size, "image side in pixels");
  synth->add_option("--blobs", synth_opt.n_blobs, "light blobs per scene");
  synth->add_option("--stops-min", synth_opt.stops_min, "minimum scene dynamic range in stops");
  synth->add_option("--stops-max", synth_opt.stops_max, "maximum scene dynamic range in stops");
  synth->add_option("--exposure-min", synth_opt.exposure_stops_min, "lowest camera exposure in stops");
  synth->add_option("--exposure-max", synth_opt.exposure_stops_max, "highest camera exposure in stops");
  synth->add_option("--gamma", synth_opt.gamma, "camera response exponent");
  add_seed(synth);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::map<std::string, std::string> train_store;
  std::string train_config;
  std::string resume;
  detail::add_train_options(train, train_store, train_config);
  train->add_option("--resume", resume, "checkpoint to continue from");
  add_seed(train);

  // sample
  auto* sample = app.add_subcommand("sample", "reconstruct an HDR image from one LDR image");
  std::string sample_ckpt, sample_ldr, sample_out, sample_preview;
  std::optional<double> sample_guidance;
  sample->add_option("--checkpoint", sample_ckpt, "trained checkpoint")->required();
  sample->add_option("--ldr", sample_ldr, "input LDR image (.ppm)")->required();
  sample->add_option("--out", sample_out, "output HDR image (.pfm)")->required();
  sample->add_option("--preview", sample_preview, "tonemapped preview (.ppm); default: --out with .ppm extension");
  sample->add_option("--guidance", sample_guidance, "guidance scale; default: the checkpoint's");
  add_seed(sample);

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a paired manifest");
  std::string eval_ckpt, eval_manifest, eval_out;
  std::optional<double> eval_guidance;
  eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval->add_option("--manifest", eval_manifest, "evaluation manifest.csv")->required();
  eval->add_option("--out", eval_out, "per-image CSV")->required();
  eval->add_option("--guidance", eval_guidance, "guidance scale; default: the checkpoint's");
  add_seed(eval);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and compare the four decoder/exposure variants");
  std::map<std::string, std::string> ablate_store;
  std::string ablate_config, ablate_eval;
  std::vector<std::string> ablate_variants;
  detail::add_train_options(ablate, ablate_store, ablate_config);
  ablate->add_option("--eval-manifest", ablate_eval, "held-out manifest.csv")->required();
  ablate->add_option("--variants", ablate_variants, "subset of FULL ENCODER_ONLY NO_EXPOSURE VANILLA");
  add_seed(ablate);

  // schedule
  auto* sched = app.add_subcommand("schedule", "write the discretized noise schedule as CSV");
  std::string sched_kind = "shifted", sched_out;
  double sched_shift = 0.25;
  int sched_steps = 1000;
  sched->add_option("--kind", sched_kind, "cosine or shifted");
  sched->add_option("--shift", sched_shift, "shift ratio");
  sched->add_option("--steps", sched_steps, "number of steps T");
  sched->add_option("--out", sched_out, "output CSV")->required();
  add_seed(sched);

  // tonemap
  auto* tm = app.add_subcommand("tonemap", "tonemap an HDR image (.pfm or .hdr) to a PPM");
  std::string tm_in, tm_out;
  double tm_gamma = 2.2;
  tm->add_option("--in", tm_in, "input HDR image")->required();
  tm->add_option("--out", tm_out, "output .ppm")->required();
  tm->add_option("--gamma", tm_gamma, "display gamma");
  add_seed(tm);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return kUsage;
  }

  try {
    if (*synth) {
      const auto m = camera::make_dataset(synth_count, synth_opt, seed, synth_out);
      std::cerr << "wrote " << m.rows.size() << " pairs to " << m.path.string() << "\n";
    } else if (*train) {
      auto cfg = detail::build_config(train, train_store, train_config, seed);
      std::optional<fs::path> from;
      if (!resume.empty()) from = resume;
      const auto result = training::train(cfg, from, [](long long s, const losses::LossReport& r) {
        if (s % 100 == 0) std::cerr << "step " << s << " loss " << r.total << "\n";
      });
      std::cerr << "final checkpoint " << result.final_checkpoint.string() << "\n";
    } else if (*sample) {
      const auto m = training::load_model(sample_ckpt);
      const ImageBuffer ldr = imgio::read_ppm(sample_ldr);
      const int r = m.config.net.base_resolution;
      if (ldr.height() != r || ldr.width() != r)
        throw Error("sample: LDR is " + std::to_string(ldr.width()) + "x" + std::to_string(ldr.height()) +
                    " but the model expects " + std::to_string(r) + "x" + std::to_string(r));
      const auto hdr =
          training::sample_hdr(*m.bundle, m.config, {ldr}, sample_guidance.value_or(m.config.guidance.scale), seed);
      imgio::write_pfm(hdr[0], sample_out);
      fs::path preview = sample_preview.empty() ? fs::path(sample_out).replace_extension(".ppm") : fs::path(sample_preview);
      imgio::write_ppm(imgio::tonemap(hdr[0], training::kEvalGamma), preview);
    } else if (*eval) {
      const auto rep = training::evaluate(eval_ckpt, eval_manifest, eval_out, eval_guidance, seed);
      std::cerr << "psnr " << rep.psnr().mean << " ± " << rep.psnr().std << " dB, ssim " << rep.ssim().mean << " ± "
                << rep.ssim().std << " (tonemapped, gamma 2.2)\n";
    } else if (*ablate) {
      auto cfg = detail::build_config(ablate, ablate_store, ablate_config, seed);
      std::vector<training::Variant> variants;
      for (const auto& v : ablate_variants) variants.push_back(training::parse_variant(v));
      if (variants.empty()) variants = training::all_variants();
      const auto table = training::run_ablation(cfg, variants, ablate_eval, cfg.out_dir);
      std::cout << table.csv();
    } else if (*sched) {
      const auto s = schedule::discretize(schedule::parse_kind(sched_kind), sched_shift, sched_steps);
      schedule::snr_curve_csv(s, sched_out);
    } else if (*tm) {
      imgio::write_ppm(imgio::tonemap(detail::read_hdr_any(tm_in), tm_gamma), tm_out);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace hdrdiff::cli
