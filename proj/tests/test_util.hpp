// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"
#include "hdrdiff/autograd.hpp"
#include "hdrdiff/tensor.hpp"

namespace testutil {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("hdrdiff_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline hdrdiff::ImageBuffer random_image(int h, int w, hdrdiff::DynamicRange range, std::uint64_t seed,
                                         double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<float> d(static_cast<std::size_t>(h) * w * 3);
  for (auto& v : d) v = static_cast<float>(u(rng));
  return hdrdiff::ImageBuffer(h, w, range, std::move(d));
}

template <class T>
hdrdiff::nn::Tensor<T> random_tensor(hdrdiff::nn::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  hdrdiff::nn::Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

/// Contracts `y` with a fixed random tensor so any op output becomes a scalar loss.
inline hdrdiff::nn::Var<double> contract(const hdrdiff::nn::Var<double>& y, std::uint64_t seed) {
  auto r = random_tensor<double>(y->shape(), seed);
  double v = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) v += r[i] * y->value[i];
  return hdrdiff::nn::external_loss<double>(y, v, std::move(r));
}

/// Largest relative error between backprop gradients and central differences over
/// every element of every input (or a strided subset when `max_checks` is hit).
inline double gradcheck(const std::vector<hdrdiff::nn::Var<double>>& inputs,
                        const std::function<hdrdiff::nn::Var<double>()>& loss, double h = 1e-6,
                        std::size_t max_checks = 400) {
  for (auto& v : inputs) v->zero_grad();
  hdrdiff::nn::backward(loss());
  double worst = 0.0;
  for (auto& v : inputs) {
    const auto analytic = v->grad.empty() ? hdrdiff::nn::Tensor<double>(v->shape()) : v->grad;
    const std::size_t stride = std::max<std::size_t>(1, v->value.size() / max_checks);
    for (std::size_t i = 0; i < v->value.size(); i += stride) {
      const double keep = v->value[i];
      v->value[i] = keep + h;
      const double up = loss()->value[0];
      v->value[i] = keep - h;
      const double down = loss()->value[0];
      v->value[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(numeric) + std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testutil
