// SPDX-License-Identifier: Apache-2.0
//
// Image quality metrics on [0, 1] tonemapped images, plus the per-image /
// aggregate evaluation report.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"

namespace hdrdiff::metrics {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const ImageBuffer& x, const ImageBuffer& y) {
  require_same_shape(x, y, "mse");
  double acc = 0.0;
  const auto a = x.data(), b = y.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / MSE), capped at 99 dB when MSE < 1e-12.
inline double psnr(const ImageBuffer& x, const ImageBuffer& y, double peak = 1.0) {
  if (!(peak > 0.0)) throw Error("psnr: peak must be positive");
  const double m = mse(x, y);
  if (m < 1e-12) return kPsnrCap;
  return 10.0 * std::log10(peak * peak / m);
}

/// Mean SSIM over non-overlapping 8x8 windows, per channel, then averaged over
/// channels. Window statistics use population (1/n) moments. Trailing rows and
/// columns that do not fill a window are ignored.
inline double ssim(const ImageBuffer& x, const ImageBuffer& y) {
  require_same_shape(x, y, "ssim");
  constexpr int W = 8;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  if (x.height() < W || x.width() < W) throw Error("ssim: image smaller than one 8x8 window");
  const int wy = x.height() / W, wx = x.width() / W;
  double total = 0.0;
  for (int c = 0; c < x.channels(); ++c) {
    double chan = 0.0;
    for (int by = 0; by < wy; ++by)
      for (int bx = 0; bx < wx; ++bx) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int yy = by * W; yy < (by + 1) * W; ++yy)
          for (int xx = bx * W; xx < (bx + 1) * W; ++xx) {
            const double a = x.at(yy, xx, c), b = y.at(yy, xx, c);
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
          }
        const double n = W * W;
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        chan += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      }
    total += chan / (static_cast<double>(wy) * wx);
  }
  return total / x.channels();
}

/// |mean(x_pred) - mean(x_ldr)|
inline double exposure_gap(const ImageBuffer& x_pred, const ImageBuffer& x_ldr) {
  require_same_shape(x_pred, x_ldr, "exposure_gap");
  double a = 0.0, b = 0.0;
  for (float v : x_pred.data()) a += v;
  for (float v : x_ldr.data()) b += v;
  return std::abs(a - b) / static_cast<double>(x_pred.size());
}

struct ImageScores {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double exposure_gap = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) return {};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

struct EvalReport {
  std::vector<ImageScores> rows;

  MeanStd psnr() const { return column(&ImageScores::psnr_db); }
  MeanStd ssim() const { return column(&ImageScores::ssim); }
  MeanStd exposure_gap() const { return column(&ImageScores::exposure_gap); }

  /// index,psnr_db,ssim,exposure_gap then one `aggregate` row of mean±std cells.
  std::string csv() const {
    std::string out = "index,psnr_db,ssim,exposure_gap\n";
    char buf[160];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", i, rows[i].psnr_db, rows[i].ssim, rows[i].exposure_gap);
      out += buf;
    }
    const auto p = psnr(), s = ssim(), e = exposure_gap();
    std::snprintf(buf, sizeof buf, "aggregate,%.17g±%.17g,%.17g±%.17g,%.17g±%.17g\n", p.mean, p.std, s.mean, s.std,
                  e.mean, e.std);
    out += buf;
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << csv();
  }

 private:
  MeanStd column(double ImageScores::*field) const {
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r.*field);
    return mean_std(v);
  }
};

/// All three scores for one tonemapped prediction against tonemapped ground truth.
/// `ldr` is the network input used for the exposure gap.
inline ImageScores score(const ImageBuffer& pred_tm, const ImageBuffer& truth_tm, const ImageBuffer& ldr) {
  return {psnr(pred_tm, truth_tm), ssim(pred_tm, truth_tm), exposure_gap(pred_tm, ldr)};
}

}  // namespace hdrdiff::metrics
