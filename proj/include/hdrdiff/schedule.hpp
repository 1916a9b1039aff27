// SPDX-License-Identifier: Apache-2.0
//
// Cosine and resolution-shifted cosine noise schedules in the
// variance-preserving parameterization:
//
//   log SNR(t) = -2 ln tan(pi t / 2) + 2 ln(shift_ratio)
//   alpha_bar(t) = sigmoid(log SNR(t))
//
// and their T-step discretization.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"

namespace hdrdiff::schedule {

enum class Kind { Cosine, ShiftedCosine };

inline Kind parse_kind(const std::string& s) {
  if (s == "cosine") return Kind::Cosine;
  if (s == "shifted" || s == "shifted_cosine") return Kind::ShiftedCosine;
  throw Error("unknown schedule kind '" + s + "' (expected cosine|shifted)");
}

inline const char* to_string(Kind k) { return k == Kind::Cosine ? "cosine" : "shifted"; }

inline constexpr double kAlphaBarMargin = 1e-5;

inline double log_snr(double t, double shift_ratio) {
  if (!(t > 0.0 && t < 1.0)) throw Error("log_snr: t must lie in the open interval (0, 1)");
  if (!(shift_ratio > 0.0)) throw Error("log_snr: shift_ratio must be positive");
  return -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0)) + 2.0 * std::log(shift_ratio);
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double alpha_bar_continuous(double t, double shift_ratio) { return sigmoid(log_snr(t, shift_ratio)); }

/// Immutable discretized schedule. Index i runs over 0..T; beta[0] = 1 - alpha_bar[0]
/// so that alpha_bar[i] = prod_{s<=i} (1 - beta[s]). sigma[0] is unused (0).
struct NoiseSchedule {
  Kind kind = Kind::ShiftedCosine;
  double shift_ratio = 0.25;
  int T = 0;
  std::vector<double> alpha_bar;
  std::vector<double> beta;
  std::vector<double> sigma;

  int steps() const { return T; }
  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar.at(static_cast<std::size_t>(t))); }
  double sqrt_one_minus_alpha_bar(int t) const { return std::sqrt(1.0 - alpha_bar.at(static_cast<std::size_t>(t))); }
  double log_snr_at(int i) const { return std::log(alpha_bar[i] / (1.0 - alpha_bar[i])); }

  void check_step(int t) const {
    if (t < 1 || t > T) throw Error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

/// alpha_bar[i] = m + (1 - 2m) * alpha_bar_continuous(i / T), m = 1e-5, using the
/// exact limits 1 and 0 at i = 0 and i = T. The affine squeeze keeps every value in
/// [m, 1 - m] while preserving strict monotonicity (a hard clamp would flatten the tail).
inline NoiseSchedule discretize(Kind kind, double shift_ratio, int T) {
  if (T < 2) throw Error("discretize: T must be >= 2");
  const double ratio = kind == Kind::Cosine ? 1.0 : shift_ratio;
  if (!(ratio > 0.0)) throw Error("discretize: shift_ratio must be positive");
  NoiseSchedule s;
  s.kind = kind;
  s.shift_ratio = ratio;
  s.T = T;
  s.alpha_bar.resize(T + 1);
  s.beta.resize(T + 1);
  s.sigma.assign(T + 1, 0.0);
  constexpr double m = kAlphaBarMargin;
  for (int i = 0; i <= T; ++i) {
    const double cont = i == 0 ? 1.0 : i == T ? 0.0 : alpha_bar_continuous(static_cast<double>(i) / T, ratio);
    s.alpha_bar[i] = m + (1.0 - 2.0 * m) * cont;
  }
  s.beta[0] = 1.0 - s.alpha_bar[0];
  for (int i = 1; i <= T; ++i) {
    s.beta[i] = 1.0 - s.alpha_bar[i] / s.alpha_bar[i - 1];
    s.sigma[i] = std::sqrt(s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]));
  }
  return s;
}

inline constexpr const char* kSnrCsvHeader = "t,log_snr,alpha_bar,beta";

/// One row per step i = 1..T; the t column is the continuous time i / T.
inline void snr_curve_csv(const NoiseSchedule& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << kSnrCsvHeader << "\n";
  for (int i = 1; i <= s.T; ++i)
    out << static_cast<double>(i) / s.T << "," << s.log_snr_at(i) << "," << s.alpha_bar[i] << "," << s.beta[i] << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace hdrdiff::schedule
