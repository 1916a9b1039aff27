// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails
// outside the --known-fail list.
// Usage: acceptance [--known-fail N]... [criterion numbers...]   (default: all)
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hdrdiff/training.hpp"

using namespace hdrdiff;
namespace fs = std::filesystem;
using nn::Shape;
using nn::Tensor;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor<double> uniform(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::current_path() / "acceptance_work" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

Outcome schedule_analytics() {
  double worst_shift = 0.0, worst_cos = 0.0;
  const double a17 = std::abs(schedule::alpha_bar_continuous(0.5, 0.25) - 1.0 / 17.0);
  for (int i = 1; i <= 100; ++i) {
    const double t = i / 101.0;
    for (double r : {0.25, 0.5, 2.0})
      worst_shift = std::max(worst_shift,
                             std::abs(schedule::log_snr(t, r) - schedule::log_snr(t, 1.0) - 2.0 * std::log(r)));
    const double lam = -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0));
    const double c = std::cos(std::numbers::pi * t / 2.0);
    worst_cos = std::max(worst_cos, std::abs(1.0 / (1.0 + std::exp(-lam)) - c * c));
    worst_cos = std::max(worst_cos, std::abs(schedule::alpha_bar_continuous(t, 1.0) - c * c));
  }
  return {a17 <= 1e-9 && worst_shift <= 1e-9 && worst_cos <= 1e-9,
          fmt("|ab(0.5,1/4)-1/17|=%.2e shift=%.2e cos=%.2e (tol 1e-9)", a17, worst_shift, worst_cos)};
}

Outcome forward_moments() {
  const int T = 1000, draws = 100000;
  const auto s = schedule::discretize(schedule::Kind::ShiftedCosine, 0.25, T);
  const double x0v = 0.8;
  bool ok = true;
  std::string d;
  std::mt19937_64 rng(2024);
  for (int t : {T / 4, T / 2, 3 * T / 4}) {
    const Tensor<double> x0({1, 1, 1, draws}, x0v);
    Tensor<double> eps(x0.shape);
    nn::fill_normal(eps, rng);
    const auto xt = diffusion::q_sample(x0, t, eps, s);
    double m = 0.0, v = 0.0;
    for (double x : xt.data) m += x;
    m /= draws;
    for (double x : xt.data) v += (x - m) * (x - m);
    v /= draws;
    const double mu = std::sqrt(s.alpha_bar[t]) * x0v, var = 1.0 - s.alpha_bar[t];
    // 5% of the mean, or four standard errors when the mean itself is tiny
    const double mean_tol = std::max(0.05 * std::abs(mu), 4.0 * std::sqrt(var / draws));
    const bool pass = std::abs(m - mu) <= mean_tol && std::abs(v - var) <= 0.05 * var;
    ok = ok && pass;
    d += fmt("t=%d mean %.4f/%.4f var %.4f/%.4f; ", t, m, mu, v, var);
  }
  return {ok, d};
}

// direct coding of the multiscale loss: box-average both tensors to side s,
// take the mean squared difference and weight it by 1/s
double mstl_direct(const Tensor<double>& a, const Tensor<double>& b, const std::vector<int>& scales) {
  const int H = a.shape.h;
  double total = 0.0;
  for (int sc : scales) {
    const int f = H / sc;
    double acc = 0.0;
    for (int n = 0; n < a.shape.n; ++n)
      for (int c = 0; c < a.shape.c; ++c)
        for (int y = 0; y < sc; ++y)
          for (int x = 0; x < sc; ++x) {
            double da = 0.0, db = 0.0;
            for (int dy = 0; dy < f; ++dy)
              for (int dx = 0; dx < f; ++dx) {
                da += a.at(n, c, y * f + dy, x * f + dx);
                db += b.at(n, c, y * f + dy, x * f + dx);
              }
            const double diff = (da - db) / (f * f);
            acc += diff * diff;
          }
    total += acc / (static_cast<double>(a.shape.n) * a.shape.c * sc * sc) / sc;
  }
  return total;
}

Outcome multiscale_oracle() {
  const double c = 0.37;
  const Tensor<double> zero256({1, 3, 256, 256}, 0.0), const256({1, 3, 256, 256}, c);
  const double v256 = losses::multiscale_loss(zero256, const256, {32, 64, 128, 256}).value;
  const Tensor<double> zero32({2, 3, 32, 32}, 0.0), const32({2, 3, 32, 32}, c);
  const double v32 = losses::multiscale_loss(zero32, const32, {8, 16, 32}).value;
  const double e256 = std::abs(v256 - c * c * 15.0 / 256.0), e32 = std::abs(v32 - c * c * 7.0 / 32.0);
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = uniform({2, 3, 32, 32}, seed), b = uniform({2, 3, 32, 32}, seed + 50);
    const std::vector<int> scales{4, 8, 16, 32};
    worst = std::max(worst, std::abs(losses::multiscale_loss(a, b, scales).value - mstl_direct(a, b, scales)));
  }
  return {e256 <= 1e-9 && e32 <= 1e-9 && worst <= 1e-9,
          fmt("base256 err %.2e, base32 err %.2e, random vs direct %.2e (tol 1e-9)", e256, e32, worst)};
}

Outcome exposure_gradient() {
  const Shape s{1, 3, 8, 8};
  double worst = 0.0;
  int used = 0;
  for (std::uint64_t seed = 0; used < 20; ++seed) {
    const auto x = uniform(s, 100 + seed, 0.0, 1.0), y = uniform(s, 200 + seed, 0.0, 1.0);
    const auto lv = losses::exposure_loss(x, y, 1.0);
    if (std::abs(losses::detail::exposure_ratio(x.sample(0)).ratio - losses::detail::exposure_ratio(y.sample(0)).ratio) <
        1e-3)
      continue;  // skip the kink
    ++used;
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double num = (losses::exposure_loss(xp, y, 1.0).value - losses::exposure_loss(xm, y, 1.0).value) / (2 * h);
      worst = std::max(worst, std::abs(num - lv.grad[i]) / std::max(std::abs(num), 1e-12));
    }
  }
  // sign: the loss falls strictly as the mean gap grows
  bool monotone = true;
  double prev = 1.0;
  const Tensor<double> ldr(s, 0.3);
  for (int k = 0; k <= 10; ++k) {
    const double v = losses::exposure_loss(Tensor<double>(s, 0.3 + 0.06 * k), ldr, 1.0).value;
    if (k > 0 && !(v < prev)) monotone = false;
    prev = v;
  }
  return {worst <= 1e-4 && monotone, fmt("worst relative gradient error %.2e over %d pairs (tol 1e-4), monotone %s",
                                         worst, used, monotone ? "yes" : "no")};
}

Outcome guidance_identities() {
  const auto ec = uniform({2, 3, 4, 4}, 1), eu = uniform({2, 3, 4, 4}, 2);
  const bool exact = diffusion::guided_eps(ec, eu, 0.0).data == eu.data && diffusion::guided_eps(ec, eu, 1.0).data == ec.data;

  nets::NetConfig cfg;
  cfg.base_resolution = 16;
  cfg.base_channels = 8;
  cfg.channel_multipliers = {1, 2};
  cfg.z_dim = 16;
  cfg.time_embed_dim = 16;
  cfg.attention_levels = {0};
  nets::ModelBundle<float> model(cfg, nets::Conditioner::Encoder, false);
  const auto s = schedule::discretize(schedule::Kind::ShiftedCosine, 0.25, 50);
  const Tensor<float> ldr = uniform({2, 3, 16, 16}, 3, 0.0, 1.0).cast<float>();
  nn::NoGradGuard ng;
  const Tensor<float> z = model.encode(nn::constant(ldr))->value;
  const diffusion::Denoiser<float> den = [&](const Tensor<float>& x, const std::vector<int>& t, const Tensor<float>& c) {
    return model.denoise(nn::constant(x), t, nn::constant(c))->value;
  };
  diffusion::GuidanceConfig g;
  g.scale = 0.0;
  const auto guided = diffusion::sample(den, z, ldr.shape, s, g, 99);
  const auto uncond = diffusion::sample(den, diffusion::null_condition<float>(z.shape), ldr.shape, s, g, 99);
  const bool bit_equal = guided.data == uncond.data;
  return {exact && bit_equal,
          fmt("guided_eps exact at s=0,1: %s; s=0 sample bit-equal to unconditional: %s", exact ? "yes" : "no",
              bit_equal ? "yes" : "no")};
}

Outcome planted_sampling() {
  const auto s = schedule::discretize(schedule::Kind::ShiftedCosine, 0.25, 200);
  const auto x0 = uniform({1, 3, 32, 32}, 5);
  const diffusion::Denoiser<double> oracle = [&](const Tensor<double>& xt, const std::vector<int>& t,
                                                 const Tensor<double>&) {
    Tensor<double> out(xt.shape);
    const std::size_t m = xt.shape.per_sample();
    for (int n = 0; n < xt.shape.n; ++n) {
      const double a = s.sqrt_alpha_bar(t[n]), b = s.sqrt_one_minus_alpha_bar(t[n]);
      for (std::size_t i = 0; i < m; ++i) out[n * m + i] = (xt[n * m + i] - a * x0[i]) / b;
    }
    return out;
  };
  diffusion::GuidanceConfig g;
  double worst[2] = {0.0, 0.0};
  for (int clip = 0; clip < 2; ++clip) {
    const auto out = diffusion::sample(oracle, Tensor<double>({1, 4, 1, 1}, 1.0), x0.shape, s, g, 17, clip == 1);
    for (std::size_t i = 0; i < x0.size(); ++i) worst[clip] = std::max(worst[clip], std::abs(out[i] - x0[i]));
  }
  return {worst[0] < 0.05 && worst[1] < 0.05,
          fmt("L_inf error %.2e (clipped sampler), %.2e (plain) (tol 0.05)", worst[1], worst[0])};
}

// Desk-scale configuration shared by the end-to-end and ablation runs.
training::TrainConfig desk_config(const fs::path& manifest, const fs::path& out) {
  training::TrainConfig c;
  c.manifest = manifest;
  c.out_dir = out;
  c.net.base_resolution = 32;
  c.net.base_channels = 16;
  c.net.spatial_condition = true;
  c.schedule_kind = schedule::Kind::Cosine;
  c.shift_ratio = 1.0;
  c.timesteps = 200;
  c.batch_size = 8;
  c.learning_rate = 5e-4;
  c.ema_decay = 0.995;
  c.max_steps = 3000;
  c.checkpoint_every = 1000;
  c.seed = 1;
  return c;
}

double autoencoder_psnr(const nets::ModelBundle<float>& m, const std::vector<ImageBuffer>& ldr) {
  nn::NoGradGuard ng;
  double acc = 0.0;
  for (std::size_t start = 0; start < ldr.size(); start += 32) {
    const std::size_t end = std::min(ldr.size(), start + 32);
    const auto batch = nn::images_to_tensor<float>(std::span<const ImageBuffer>(ldr.data() + start, end - start));
    const auto dec = m.decode(m.encode(nn::constant(batch)))->value;
    for (int n = 0; n < dec.shape.n; ++n)
      acc += metrics::psnr(nn::tensor_to_image(dec, n, DynamicRange::LdrNormalized), ldr[start + n]);
  }
  return acc / static_cast<double>(ldr.size());
}

Outcome end_to_end() {
  const auto dir = scratch("end_to_end");
  camera::DatasetOptions opt;
  opt.size = 32;
  const auto train_m = camera::make_dataset(256, opt, 1, dir / "train");
  const auto held_m = camera::make_dataset(16, opt, 999, dir / "held");
  auto cfg = desk_config(train_m.path, dir / "run");

  double first10 = 0.0;
  const auto result = training::train(cfg, std::nullopt, [&](long long s, const losses::LossReport& r) {
    if (s <= 10) first10 += r.total / 10.0;
    if (s % 500 == 0) std::cerr << "  [7] step " << s << " loss " << r.total << "\n";
  });
  double last100 = 0.0;
  for (std::size_t i = result.losses.size() - 100; i < result.losses.size(); ++i) last100 += result.losses[i].total / 100.0;
  const double drop = 1.0 - last100 / first10;

  const auto m = training::load_model(result.final_checkpoint);
  auto [train_hdr, train_ldr] = training::read_pairs(train_m.path);
  const double ae = autoencoder_psnr(*m.bundle, train_ldr);

  auto [hdr, ldr] = training::read_pairs(held_m.path);
  const auto rep = training::evaluate_model(*m.bundle, m.config, hdr, ldr, 2.0, 7);
  std::vector<ImageBuffer> naive;
  for (const auto& l : ldr) naive.push_back(training::naive_hdr(l, m.config.log_range()));
  const auto base = training::score_predictions(naive, hdr, ldr);
  const double gain = rep.psnr().mean - base.psnr().mean;

  const bool a = drop >= 0.5, b = ae > 25.0, c = gain >= 1.0;
  return {a && b && c,
          fmt("(a) loss %.4f -> %.4f, drop %.0f%% %s; (b) autoencoder PSNR %.2f dB %s; (c) sampled %.2f dB vs naive "
              "%.2f dB, gain %+.2f dB %s",
              first10, last100, 100 * drop, a ? "ok" : "FAIL", ae, b ? "ok" : "FAIL", rep.psnr().mean,
              base.psnr().mean, gain, c ? "ok" : "FAIL")};
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

Outcome ablation() {
  const auto dir = scratch("ablation");
  camera::DatasetOptions opt;
  opt.size = 32;
  const auto train_m = camera::make_dataset(256, opt, 1, dir / "train");
  const auto eval_m = camera::make_dataset(16, opt, 999, dir / "eval");
  auto cfg = desk_config(train_m.path, dir / "out");
  cfg.max_steps = 1000;
  cfg.to_kv().save(dir / "ablate.cfg");

  const std::string cmd = std::string("\"") + HDRGEN_PATH + "\" ablate --config \"" + (dir / "ablate.cfg").string() +
                          "\" --eval-manifest \"" + eval_m.path.string() + "\" --seed 1 > \"" +
                          (dir / "stdout.csv").string() + "\"";
  const int status = std::system(cmd.c_str());
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "hdrgen ablate failed"};

  std::ifstream in(dir / "out" / "ablation.csv");
  std::string line;
  std::getline(in, line);
  bool all_beat = true;
  int rows = 0;
  std::string d;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.size() < 9) return {false, "malformed ablation.csv"};
    const double trained = std::stod(cells[3]), untrained = std::stod(cells[7]);
    all_beat = all_beat && trained > untrained;
    d += fmt("%s %.2f (untrained %.2f); ", cells[0].c_str(), trained, untrained);
    ++rows;
  }
  const bool grid = fs::exists(dir / "out" / "grid.ppm");
  d += "reference ordering 16.36 < 16.71 < 16.97 (not asserted)";
  return {rows == 4 && all_beat && grid, d};
}

Outcome format_fidelity() {
  const auto dir = scratch("formats");
  bool ok = true;
  std::string d;

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 50.0f);
  std::vector<float> px(17 * 13 * 3);
  for (auto& v : px) v = u(rng);
  const ImageBuffer hdr(17, 13, DynamicRange::HdrLinear, px);
  imgio::write_pfm(hdr, dir / "a.pfm");
  const auto back = imgio::read_pfm(dir / "a.pfm");
  imgio::write_pfm(back, dir / "b.pfm");
  const bool pfm = back == hdr && imgio::detail::read_file(dir / "a.pfm") == imgio::detail::read_file(dir / "b.pfm");

  std::vector<float> lp(17 * 13 * 3);
  for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  imgio::write_ppm(ImageBuffer(17, 13, DynamicRange::LdrNormalized, lp), dir / "a.ppm");
  imgio::write_ppm(imgio::read_ppm(dir / "a.ppm"), dir / "b.ppm");
  const bool ppm = imgio::detail::read_file(dir / "a.ppm") == imgio::detail::read_file(dir / "b.ppm");

  // encode(decode(bytes)) == bytes for every mantissa pair with a leading byte >= 128
  long bad = 0, checked = 0;
  for (int e : {1, 100, 128, 129, 160, 254})
    for (int r = 128; r < 256; ++r)
      for (int g = 0; g < 256; ++g)
        for (int b : {0, 77, 255}) {
          const imgio::Rgbe p{static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(std::min(b, r)),
                              static_cast<std::uint8_t>(e)};
          const auto f = imgio::rgbe_to_float(p);
          bad += imgio::float_to_rgbe(f[0], f[1], f[2]) != p;
          ++checked;
        }
  const auto one = imgio::float_to_rgbe(1.0f, 0.0f, 0.0f);
  const auto dec = imgio::rgbe_to_float({128, 0, 0, 129});
  const bool unit = one == imgio::Rgbe{128, 0, 0, 129} && dec[0] == 1.0f && dec[1] == 0.0f && dec[2] == 0.0f;
  ok = pfm && ppm && bad == 0 && unit;
  d = fmt("PFM round trip %s, PPM round trip %s, RGBE sweep %ld/%ld exact, (1,0,0) <-> (128,0,0,129) %s",
          pfm ? "ok" : "FAIL", ppm ? "ok" : "FAIL", checked - bad, checked, unit ? "ok" : "FAIL");
  return {ok, d};
}

Outcome metric_consistency() {
  const auto img = [](float v) { return ImageBuffer::filled(16, 16, DynamicRange::LdrNormalized, v); };
  const double p20 = metrics::psnr(img(0.4f), img(0.5f));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.2f, 0.8f);
  std::vector<float> px(32 * 32 * 3), qx(px.size());
  for (auto& v : px) v = u(rng);
  for (auto& v : qx) v = u(rng);
  const ImageBuffer x(32, 32, DynamicRange::LdrNormalized, px), y(32, 32, DynamicRange::LdrNormalized, qx);
  const double self = metrics::ssim(x, x), sym = std::abs(metrics::ssim(x, y) - metrics::ssim(y, x));
  bool monotone = true;
  double prev = INFINITY;
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> noise(px.size());
  for (auto& v : noise) v = nd(rng);
  for (float sigma : {0.005f, 0.01f, 0.02f, 0.05f, 0.1f}) {
    std::vector<float> n(px.size());
    for (std::size_t i = 0; i < n.size(); ++i) n[i] = std::clamp(px[i] + sigma * noise[i], 0.0f, 1.0f);
    const double p = metrics::psnr(x, ImageBuffer(32, 32, DynamicRange::LdrNormalized, n));
    monotone = monotone && p < prev;
    prev = p;
  }
  const bool ok = std::abs(p20 - 20.0) < 1e-4 && std::abs(self - 1.0) < 1e-12 && sym < 1e-12 && monotone;
  return {ok, fmt("PSNR at MSE 0.01 = %.6f dB, SSIM(x,x) = %.12f, |SSIM(x,y)-SSIM(y,x)| = %.1e, monotone %s", p20,
                  self, sym, monotone ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"schedule analytics", schedule_analytics},
      {"forward-process moments", forward_moments},
      {"multiscale loss oracle", multiscale_oracle},
      {"exposure loss gradient", exposure_gradient},
      {"guidance identities", guidance_identities},
      {"planted-denoiser sampling", planted_sampling},
      {"end-to-end desk-scale training", end_to_end},
      {"ablation harness", ablation},
      {"format fidelity", format_fidelity},
      {"metric self-consistency", metric_consistency},
  };
  // --known-fail N: still run and report N, but leave it out of the exit code
  std::set<int> only, known;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--known-fail" && i + 1 < argc) known.insert(std::atoi(argv[++i]));
    else only.insert(std::atoi(argv[i]));
  }

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool excused = !o.pass && known.count(id);
    failed += !o.pass && !excused;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail
              << fmt(" [%.1f s]", secs) << (excused ? " (known shortfall, not counted)" : "") << std::endl;
  }
  std::cout << failed << " unexpected failure(s)" << std::endl;
  return failed == 0 ? 0 : 1;
}
