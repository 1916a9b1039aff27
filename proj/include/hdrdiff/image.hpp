// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hdrdiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated image/manifest/checkpoint file.
class FormatError : public Error {
 public:
  using Error::Error;
};

enum class DynamicRange { LdrNormalized, HdrLinear, LogHdr };

inline const char* to_string(DynamicRange r) {
  switch (r) {
    case DynamicRange::LdrNormalized: return "LDR_NORMALIZED";
    case DynamicRange::HdrLinear: return "HDR_LINEAR";
    case DynamicRange::LogHdr: return "LOG_HDR";
  }
  return "?";
}

/// Immutable H x W x 3 float image, row-major, channel-interleaved, top row first.
class ImageBuffer {
 public:
  static constexpr int kChannels = 3;

  ImageBuffer() = default;

  ImageBuffer(int height, int width, DynamicRange range, std::vector<float> data)
      : height_(height), width_(width), range_(range), data_(std::move(data)) {
    if (height_ < 1 || width_ < 1) throw Error("ImageBuffer: empty dimensions");
    if (data_.size() != static_cast<std::size_t>(height_) * width_ * kChannels)
      throw Error("ImageBuffer: data size does not match " + std::to_string(height_) + "x" +
                  std::to_string(width_) + "x3");
    validate();
  }

  static ImageBuffer filled(int height, int width, DynamicRange range, float value) {
    return ImageBuffer(height, width, range,
                       std::vector<float>(static_cast<std::size_t>(height) * width * kChannels, value));
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return kChannels; }
  DynamicRange range() const { return range_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  float at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }

  /// Same pixels, different tag. Re-validates against the new tag's invariants.
  ImageBuffer retagged(DynamicRange range) const { return ImageBuffer(height_, width_, range, data_); }

  bool same_shape(const ImageBuffer& o) const { return height_ == o.height_ && width_ == o.width_; }

  friend bool operator==(const ImageBuffer& a, const ImageBuffer& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.range_ == b.range_ &&
           a.data_ == b.data_;
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      float v = data_[i];
      bool ok = std::isfinite(v);
      if (ok && range_ == DynamicRange::LdrNormalized) ok = v >= 0.0f && v <= 1.0f;
      if (ok && range_ == DynamicRange::HdrLinear) ok = v >= 0.0f;
      if (!ok) {
        std::size_t px = i / kChannels;
        throw Error(std::string("ImageBuffer: value ") + std::to_string(v) + " invalid for " +
                    to_string(range_) + " at (y=" + std::to_string(px / width_) +
                    ", x=" + std::to_string(px % width_) + ", c=" + std::to_string(i % kChannels) + ")");
      }
    }
  }

  int height_ = 0;
  int width_ = 0;
  DynamicRange range_ = DynamicRange::HdrLinear;
  std::vector<float> data_;
};

inline void require_range(const ImageBuffer& img, DynamicRange expected, const char* op) {
  if (img.range() != expected)
    throw Error(std::string(op) + ": expected " + to_string(expected) + " input, got " +
                to_string(img.range()));
}

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* op) {
  if (!a.same_shape(b))
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                std::to_string(b.width()));
}

}  // namespace hdrdiff
