// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired data: procedural HDR scenes and a forward camera model
// (exposure, power-law CRF, clipping, 8-bit quantization) producing the LDR
// inputs the reconstruction model learns to invert.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hdrdiff/image.hpp"
#include "hdrdiff/imgio.hpp"

namespace hdrdiff::camera {

struct CameraParams {
  double exposure = 1.0;
  double gamma = 1.0 / 2.2;
  double clip_low = 0.0;
  double clip_high = 1.0;
  int quantization_levels = 256;

  void validate() const {
    if (!(exposure > 0.0)) throw Error("CameraParams: exposure must be positive");
    if (!(gamma > 0.0)) throw Error("CameraParams: gamma must be positive");
    if (quantization_levels < 2) throw Error("CameraParams: quantization_levels must be >= 2");
    if (!(clip_low < clip_high)) throw Error("CameraParams: clip_low must be below clip_high");
  }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int size = 32;
  int n_blobs = 4;
  double dynamic_range_stops = 8.0;

  void validate() const {
    constexpr int sizes[] = {16, 32, 64, 128, 256};
    if (std::find(std::begin(sizes), std::end(sizes), size) == std::end(sizes))
      throw Error("SceneSpec: size must be one of 16, 32, 64, 128, 256");
    if (n_blobs < 0) throw Error("SceneSpec: n_blobs must be non-negative");
    if (!(dynamic_range_stops >= 4.0 && dynamic_range_stops <= 16.0))
      throw Error("SceneSpec: dynamic_range_stops must lie in [4, 16]");
  }
};

/// splitmix64 finalizer; derives independent per-item seeds from a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Smooth log-radiance gradient plus Gaussian blobs, rescaled so that
/// max/min over all pixels and channels is exactly 2^dynamic_range_stops,
/// centred on 1.0 in log2.
inline ImageBuffer synth_hdr_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  const int n = spec.size;
  const double angle = uni(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(angle), dy = std::sin(angle);
  const double curve = uni(-0.5, 0.5);
  double tint[3];
  for (double& t : tint) t = uni(-0.15, 0.15);

  struct Blob {
    double cx, cy, inv2s2, amp, tint[3];
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(spec.n_blobs));
  for (auto& b : blobs) {
    b.cx = uni(0.0, n);
    b.cy = uni(0.0, n);
    const double sigma = uni(n / 16.0, n / 5.0);
    b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
    b.amp = uni(0.0, 1.0) < 0.75 ? uni(0.8, 2.5) : -uni(0.5, 1.5);
    for (double& t : b.tint) t = uni(0.75, 1.0);
  }

  std::vector<double> field(static_cast<std::size_t>(n) * n * 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = (x + 0.5) / n - 0.5, py = (y + 0.5) / n - 0.5;
      const double g = px * dx + py * dy + curve * (px * px + py * py);
      for (int c = 0; c < 3; ++c) {
        double v = g * (1.0 + tint[c]);
        for (const auto& b : blobs) {
          const double rx = x + 0.5 - b.cx, ry = y + 0.5 - b.cy;
          v += b.amp * b.tint[c] * std::exp(-(rx * rx + ry * ry) * b.inv2s2);
        }
        field[(static_cast<std::size_t>(y) * n + x) * 3 + c] = v;
      }
    }
  }
  const auto [lo_it, hi_it] = std::minmax_element(field.begin(), field.end());
  const double lo = *lo_it, span = std::max(*hi_it - lo, 1e-12);
  const double stops = spec.dynamic_range_stops;
  std::vector<float> data(field.size());
  for (std::size_t i = 0; i < field.size(); ++i)
    data[i] = static_cast<float>(std::exp2((field[i] - lo) / span * stops - 0.5 * stops));
  return ImageBuffer(n, n, DynamicRange::HdrLinear, std::move(data));
}

/// v -> quantize(clip((exposure * v)^gamma)), quantize(u) = floor(u * (L-1) + 0.5) / (L-1).
inline double camera_response(double v, const CameraParams& p) {
  const double u = std::clamp(std::pow(p.exposure * std::max(v, 0.0), p.gamma), p.clip_low, p.clip_high);
  const double levels = p.quantization_levels - 1;
  return std::floor(u * levels + 0.5) / levels;
}

inline ImageBuffer ldr_from_hdr(const ImageBuffer& hdr, const CameraParams& params) {
  require_range(hdr, DynamicRange::HdrLinear, "ldr_from_hdr");
  params.validate();
  std::vector<float> out(hdr.size());
  std::transform(hdr.data().begin(), hdr.data().end(), out.begin(),
                 [&](float v) { return static_cast<float>(camera_response(v, params)); });
  return ImageBuffer(hdr.height(), hdr.width(), DynamicRange::LdrNormalized, std::move(out));
}

struct SaturationStats {
  double under = 0.0;
  double over = 0.0;
};

/// Fractions of channel samples at or below low_thresh and at or above high_thresh.
inline SaturationStats saturation_fraction(const ImageBuffer& ldr, double low_thresh, double high_thresh) {
  require_range(ldr, DynamicRange::LdrNormalized, "saturation_fraction");
  if (!(0.0 <= low_thresh && low_thresh < high_thresh && high_thresh <= 1.0))
    throw Error("saturation_fraction: need 0 <= low_thresh < high_thresh <= 1");
  std::size_t under = 0, over = 0;
  for (float v : ldr.data()) {
    under += v <= low_thresh;
    over += v >= high_thresh;
  }
  const double n = static_cast<double>(ldr.size());
  return {under / n, over / n};
}

// ---------------------------------------------------------------------------
// Paired datasets

struct ManifestRow {
  int index = 0;
  std::filesystem::path hdr_path;  // resolved against the manifest directory
  std::filesystem::path ldr_path;
  std::uint64_t seed = 0;
  double exposure = 1.0;
  double gamma = 1.0 / 2.2;
};

struct Manifest {
  std::filesystem::path path;
  std::vector<ManifestRow> rows;
};

inline constexpr const char* kManifestHeader = "index,hdr_path,ldr_path,seed,exposure,gamma";

struct DatasetOptions {
  int size = 32;
  int n_blobs = 4;
  double stops_min = 6.0;
  double stops_max = 12.0;
  double exposure_stops_min = -5.0;
  double exposure_stops_max = 1.0;
  double gamma = 1.0 / 2.2;
};

/// Picks camera parameters for pair i of n. Receives a per-pair RNG.
using ParamsSampler = std::function<CameraParams(int i, int n, std::mt19937_64& rng)>;

/// Exposure stops stratified over [exposure_stops_min, exposure_stops_max] with
/// jitter inside each stratum, so every dataset spans under- and over-exposure.
inline ParamsSampler stratified_exposure_sampler(const DatasetOptions& opt) {
  return [opt](int i, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double frac = (i + u01(rng)) / std::max(n, 1);
    CameraParams p;
    p.exposure = std::exp2(opt.exposure_stops_min + frac * (opt.exposure_stops_max - opt.exposure_stops_min));
    p.gamma = opt.gamma;
    return p;
  };
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_manifest(const Manifest& m) {
  const auto dir = m.path.parent_path();
  std::ofstream out(m.path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest " + m.path.string());
  out << kManifestHeader << "\n";
  for (const auto& r : m.rows) {
    out << r.index << "," << std::filesystem::relative(r.hdr_path, dir).generic_string() << ","
        << std::filesystem::relative(r.ldr_path, dir).generic_string() << "," << r.seed << ","
        << format_double(r.exposure) << "," << format_double(r.gamma) << "\n";
  }
  if (!out) throw Error("write failed: " + m.path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m;
  m.path = path;
  const auto dir = path.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader)
    throw FormatError("manifest: expected header '" + std::string(kManifestHeader) + "'");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      ManifestRow r;
      r.index = std::stoi(f[0]);
      r.hdr_path = dir / f[1];
      r.ldr_path = dir / f[2];
      r.seed = std::stoull(f[3]);
      r.exposure = std::stod(f[4]);
      r.gamma = std::stod(f[5]);
      m.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": bad numeric field");
    }
  }
  return m;
}

/// Writes scene_NNNN.pfm / scene_NNNN.ppm pairs plus manifest.csv into out_dir.
inline Manifest make_dataset(int n_pairs, const DatasetOptions& opt, std::uint64_t master_seed,
                             const std::filesystem::path& out_dir, ParamsSampler sampler = {}) {
  if (n_pairs < 1) throw Error("make_dataset: n_pairs must be >= 1");
  if (!sampler) sampler = stratified_exposure_sampler(opt);
  std::filesystem::create_directories(out_dir);
  Manifest m;
  m.path = out_dir / "manifest.csv";
  for (int i = 0; i < n_pairs; ++i) {
    std::mt19937_64 rng(derive_seed(master_seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    SceneSpec spec;
    spec.seed = rng();
    spec.size = opt.size;
    spec.n_blobs = opt.n_blobs;
    spec.dynamic_range_stops = opt.stops_min + (opt.stops_max - opt.stops_min) * u01(rng);
    const CameraParams params = sampler(i, n_pairs, rng);

    const ImageBuffer hdr = synth_hdr_scene(spec);
    const ImageBuffer ldr = ldr_from_hdr(hdr, params);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04d", i);
    ManifestRow row{i, out_dir / (std::string(stem) + ".pfm"), out_dir / (std::string(stem) + ".ppm"), spec.seed,
                    params.exposure, params.gamma};
    imgio::write_pfm(hdr, row.hdr_path);
    imgio::write_ppm(ldr, row.ldr_path);
    m.rows.push_back(std::move(row));
  }
  write_manifest(m);
  return m;
}

}  // namespace hdrdiff::camera
