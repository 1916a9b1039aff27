// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"

namespace hdrdiff::nn {

/// NCHW extents. Vectors are carried as (N, D, 1, 1).
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t hw() const { return static_cast<std::size_t>(h) * w; }
  std::size_t per_sample() const { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Every buffer starts on a 64-byte boundary, so vectorised reductions split
// the same way on every run and results are bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}
  Tensor(Shape s, const std::vector<T>& values) : shape(s), data(values.begin(), values.end()) {
    if (data.size() != shape.numel()) throw Error("Tensor: data size does not match shape " + shape.str());
  }
  Tensor(Shape s, Buffer<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.numel()) throw Error("Tensor: data size does not match shape " + shape.str());
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(int n, int c, int y, int x) {
    return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }

  std::span<T> sample(int n) { return {data.data() + n * shape.per_sample(), shape.per_sample()}; }
  std::span<const T> sample(int n) const { return {data.data() + n * shape.per_sample(), shape.per_sample()}; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }
};

template <class T>
void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw Error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <class T, class Rng>
void fill_normal(Tensor<T>& t, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.data) v = static_cast<T>(nd(rng));
}

template <class T, class Rng>
Tensor<T> randn(Shape s, Rng& rng) {
  Tensor<T> t(s);
  fill_normal(t, rng);
  return t;
}

/// Copies sample `src_n` of `src` into sample `dst_n` of `dst`.
template <class T>
void copy_sample(const Tensor<T>& src, int src_n, Tensor<T>& dst, int dst_n) {
  auto s = src.sample(src_n);
  std::copy(s.begin(), s.end(), dst.sample(dst_n).begin());
}

/// Stacks HxWx3 interleaved images into an (N, 3, H, W) tensor.
template <class T>
Tensor<T> images_to_tensor(std::span<const ImageBuffer> images) {
  if (images.empty()) throw Error("images_to_tensor: empty batch");
  const int h = images[0].height(), w = images[0].width();
  Tensor<T> t({static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    require_same_shape(images[0], images[n], "images_to_tensor");
    auto d = images[n].data();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          t.at(static_cast<int>(n), c, y, x) = static_cast<T>(d[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  }
  return t;
}

template <class T>
ImageBuffer tensor_to_image(const Tensor<T>& t, int n, DynamicRange range) {
  if (t.shape.c != 3) throw Error("tensor_to_image: expected 3 channels");
  std::vector<float> d(static_cast<std::size_t>(t.shape.h) * t.shape.w * 3);
  for (int y = 0; y < t.shape.h; ++y)
    for (int x = 0; x < t.shape.w; ++x)
      for (int c = 0; c < 3; ++c)
        d[(static_cast<std::size_t>(y) * t.shape.w + x) * 3 + c] = static_cast<float>(t.at(n, c, y, x));
  return ImageBuffer(t.shape.h, t.shape.w, range, std::move(d));
}

}  // namespace hdrdiff::nn
