// SPDX-License-Identifier: Apache-2.0
//
// Image file formats (PFM, Radiance RGBE, binary PPM) and the pixel-domain
// conventions shared by the rest of the library: display tone mapping, log
// encoding and the affine log range used as the diffusion working domain.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"

namespace hdrdiff::imgio {

inline constexpr double kDefaultEpsilonLog = 1e-4;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const void* payload, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("write failed: " + path.string());
}

/// Netpbm-style header tokenizer: whitespace separated, '#' comments to end of line.
class HeaderCursor {
 public:
  HeaderCursor(const std::vector<unsigned char>& bytes, const char* what)
      : bytes_(bytes), what_(what) {}

  std::string token(bool allow_comments = true) {
    skip_space(allow_comments);
    std::string tok;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_])) tok.push_back(static_cast<char>(bytes_[pos_++]));
    if (tok.empty()) throw FormatError(std::string(what_) + ": truncated header");
    return tok;
  }

  long integer() {
    std::string tok = token();
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw FormatError(std::string(what_) + ": bad header field '" + tok + "'");
    return v;
  }

  /// Consumes the single whitespace byte that separates the header from the payload.
  std::size_t payload_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
      throw FormatError(std::string(what_) + ": missing separator before payload");
    return pos_ + 1;
  }

 private:
  void skip_space(bool allow_comments) {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (allow_comments && bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

inline float load_float(const unsigned char* p, bool little_endian) {
  std::array<unsigned char, 4> b{p[0], p[1], p[2], p[3]};
  if (little_endian != (std::endian::native == std::endian::little)) std::reverse(b.begin(), b.end());
  float f;
  std::memcpy(&f, b.data(), 4);
  return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PFM

inline ImageBuffer read_pfm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::HeaderCursor cur(bytes, "PFM");
  if (cur.token(false) != "PF") throw FormatError("PFM: magic is not 'PF' (only color PFM is supported)");
  const long w = cur.integer();
  const long h = cur.integer();
  if (w < 1 || h < 1 || w > (1 << 16) || h > (1 << 16)) throw FormatError("PFM: bad dimensions");
  const std::string scale_tok = cur.token(false);
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw FormatError("PFM: bad scale '" + scale_tok + "'");
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError("PFM: scale must be non-zero");
  const bool little = scale < 0.0;
  const std::size_t start = cur.payload_start();
  const std::size_t count = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - start < count * 4)
    throw FormatError("PFM: truncated payload (" + std::to_string(bytes.size() - start) + " of " +
                      std::to_string(count * 4) + " bytes)");

  std::vector<float> data(count);
  for (long fy = 0; fy < h; ++fy) {
    const long y = h - 1 - fy;  // first stored scanline is the bottom row
    for (long x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const std::size_t src = (static_cast<std::size_t>(fy) * w + x) * 3 + c;
        const float v = detail::load_float(bytes.data() + start + src * 4, little);
        if (!std::isfinite(v))
          throw FormatError("PFM: non-finite value at (y=" + std::to_string(y) + ", x=" + std::to_string(x) +
                            ", c=" + std::to_string(c) + ")");
        data[(static_cast<std::size_t>(y) * w + x) * 3 + c] = v;
      }
    }
  }
  return ImageBuffer(static_cast<int>(h), static_cast<int>(w), DynamicRange::HdrLinear, std::move(data));
}

inline void write_pfm(const ImageBuffer& img, const std::filesystem::path& path) {
  require_range(img, DynamicRange::HdrLinear, "write_pfm");
  const int w = img.width(), h = img.height();
  std::vector<unsigned char> payload(img.size() * 4);
  auto src = img.data();
  for (int fy = 0; fy < h; ++fy) {
    const int y = h - 1 - fy;
    for (int i = 0; i < w * 3; ++i) {
      float v = src[static_cast<std::size_t>(y) * w * 3 + i];
      if (!std::isfinite(v)) throw Error("write_pfm: non-finite value");
      std::array<unsigned char, 4> b;
      std::memcpy(b.data(), &v, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
      std::memcpy(payload.data() + (static_cast<std::size_t>(fy) * w * 3 + i) * 4, b.data(), 4);
    }
  }
  const std::string header = "PF\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  detail::write_file(path, header, payload.data(), payload.size());
}

// ---------------------------------------------------------------------------
// Radiance RGBE

using Rgbe = std::array<std::uint8_t, 4>;

/// channel = (byte / 256) * 2^(E - 128); E == 0 encodes black.
inline std::array<float, 3> rgbe_to_float(const Rgbe& p) {
  if (p[3] == 0) return {0.0f, 0.0f, 0.0f};
  const int shift = static_cast<int>(p[3]) - (128 + 8);
  return {std::ldexp(static_cast<float>(p[0]), shift), std::ldexp(static_cast<float>(p[1]), shift),
          std::ldexp(static_cast<float>(p[2]), shift)};
}

/// Shared-exponent encode with round-to-nearest mantissas.
inline Rgbe float_to_rgbe(float r, float g, float b) {
  const double m = std::max({static_cast<double>(r), static_cast<double>(g), static_cast<double>(b)});
  if (!(m > 0.0)) return {0, 0, 0, 0};
  int e = 0;
  std::frexp(m, &e);
  auto quant = [&](float v, int exp) {
    return static_cast<long>(std::lround(std::max(0.0, static_cast<double>(v)) * 256.0 / std::ldexp(1.0, exp)));
  };
  // rounding the largest mantissa up to 256 bumps the exponent
  if (quant(static_cast<float>(m), e) > 255) ++e;
  if (e + 128 < 1) return {0, 0, 0, 0};
  if (e + 128 > 255) throw Error("RGBE: value " + std::to_string(m) + " exceeds exponent range");
  return {static_cast<std::uint8_t>(quant(r, e)), static_cast<std::uint8_t>(quant(g, e)),
          static_cast<std::uint8_t>(quant(b, e)), static_cast<std::uint8_t>(e + 128)};
}

inline ImageBuffer read_rgbe(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto line = [&]() {
    std::string s;
    while (pos < bytes.size() && bytes[pos] != '\n') s.push_back(static_cast<char>(bytes[pos++]));
    if (pos >= bytes.size()) throw FormatError("RGBE: truncated header");
    ++pos;
    return s;
  };
  if (line().rfind("#?RADIANCE", 0) != 0) throw FormatError("RGBE: bad magic (expected #?RADIANCE)");
  bool have_format = false;
  for (std::string s = line(); !s.empty(); s = line()) {
    if (s.rfind("FORMAT=", 0) == 0) {
      if (s != "FORMAT=32-bit_rle_rgbe") throw FormatError("RGBE: unsupported " + s);
      have_format = true;
    }
  }
  if (!have_format) throw FormatError("RGBE: missing FORMAT=32-bit_rle_rgbe");
  const std::string res = line();
  std::istringstream rs(res);
  std::string ytag, xtag, rest;
  long h = 0, w = 0;
  if (!(rs >> ytag >> h >> xtag >> w) || ytag != "-Y" || xtag != "+X" || (rs >> rest) || h < 1 || w < 1 ||
      h > (1 << 16) || w > (1 << 16))
    throw FormatError("RGBE: bad resolution line '" + res + "'");

  std::vector<float> data(static_cast<std::size_t>(w) * h * 3);
  std::vector<std::uint8_t> scan(static_cast<std::size_t>(w) * 4);
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError("RGBE: truncated pixel data");
  };
  for (long y = 0; y < h; ++y) {
    const bool rle = w >= 8 && w < 32768 && bytes.size() - pos >= 4 && bytes[pos] == 2 && bytes[pos + 1] == 2 &&
                     (bytes[pos + 2] & 0x80) == 0;
    if (rle) {
      if (((bytes[pos + 2] << 8) | bytes[pos + 3]) != w) throw FormatError("RGBE: RLE scanline width mismatch");
      pos += 4;
      for (int c = 0; c < 4; ++c) {
        long x = 0;
        while (x < w) {
          need(1);
          int count = bytes[pos++];
          if (count > 128) {
            count -= 128;
            if (x + count > w) throw FormatError("RGBE: RLE run overflow at scanline " + std::to_string(y));
            need(1);
            const std::uint8_t v = bytes[pos++];
            for (int k = 0; k < count; ++k) scan[(x++) * 4 + c] = v;
          } else {
            if (count == 0 || x + count > w)
              throw FormatError("RGBE: RLE run overflow at scanline " + std::to_string(y));
            need(count);
            for (int k = 0; k < count; ++k) scan[(x++) * 4 + c] = bytes[pos++];
          }
        }
      }
    } else {
      need(scan.size());
      std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), scan.size(), scan.begin());
      pos += scan.size();
    }
    for (long x = 0; x < w; ++x) {
      const auto f = rgbe_to_float({scan[x * 4], scan[x * 4 + 1], scan[x * 4 + 2], scan[x * 4 + 3]});
      std::copy(f.begin(), f.end(), data.begin() + (y * w + x) * 3);
    }
  }
  return ImageBuffer(static_cast<int>(h), static_cast<int>(w), DynamicRange::HdrLinear, std::move(data));
}

/// Flat (non run-length) scanlines.
inline void write_rgbe(const ImageBuffer& img, const std::filesystem::path& path) {
  require_range(img, DynamicRange::HdrLinear, "write_rgbe");
  std::vector<std::uint8_t> payload(static_cast<std::size_t>(img.width()) * img.height() * 4);
  auto d = img.data();
  for (std::size_t i = 0; i < payload.size() / 4; ++i) {
    const Rgbe p = float_to_rgbe(d[i * 3], d[i * 3 + 1], d[i * 3 + 2]);
    std::copy(p.begin(), p.end(), payload.begin() + static_cast<std::ptrdiff_t>(i * 4));
  }
  const std::string header = "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y " + std::to_string(img.height()) + " +X " +
                             std::to_string(img.width()) + "\n";
  detail::write_file(path, header, payload.data(), payload.size());
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

inline std::uint8_t quantize_byte(float v) {
  const double q = std::floor(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(q);
}

inline ImageBuffer read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::HeaderCursor cur(bytes, "PPM");
  if (cur.token(false) != "P6") throw FormatError("PPM: only binary P6 is supported");
  const long w = cur.integer();
  const long h = cur.integer();
  const long maxval = cur.integer();
  if (w < 1 || h < 1 || w > (1 << 16) || h > (1 << 16)) throw FormatError("PPM: bad dimensions");
  if (maxval != 255) throw FormatError("PPM: maxval must be 255, got " + std::to_string(maxval));
  const std::size_t start = cur.payload_start();
  const std::size_t count = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - start < count) throw FormatError("PPM: truncated payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<float>(bytes[start + i]) / 255.0f;
  return ImageBuffer(static_cast<int>(h), static_cast<int>(w), DynamicRange::LdrNormalized, std::move(data));
}

inline void write_ppm(const ImageBuffer& img, const std::filesystem::path& path) {
  require_range(img, DynamicRange::LdrNormalized, "write_ppm");
  std::vector<std::uint8_t> payload(img.size());
  std::transform(img.data().begin(), img.data().end(), payload.begin(), quantize_byte);
  const std::string header = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  detail::write_file(path, header, payload.data(), payload.size());
}

// ---------------------------------------------------------------------------
// Pixel-domain conventions

inline double tonemap_value(double v, double gamma) { return std::pow(v / (1.0 + v), 1.0 / gamma); }

/// v -> (v / (1 + v))^(1/gamma); maps [0, inf) into [0, 1).
inline ImageBuffer tonemap(const ImageBuffer& hdr, double gamma) {
  require_range(hdr, DynamicRange::HdrLinear, "tonemap");
  if (!(gamma > 0.0)) throw Error("tonemap: gamma must be positive");
  std::vector<float> out(hdr.size());
  std::transform(hdr.data().begin(), hdr.data().end(), out.begin(),
                 [gamma](float v) { return static_cast<float>(tonemap_value(v, gamma)); });
  return ImageBuffer(hdr.height(), hdr.width(), DynamicRange::LdrNormalized, std::move(out));
}

inline ImageBuffer log_encode(const ImageBuffer& hdr, double epsilon_log = kDefaultEpsilonLog) {
  require_range(hdr, DynamicRange::HdrLinear, "log_encode");
  if (!(epsilon_log > 0.0)) throw Error("log_encode: epsilon_log must be positive");
  std::vector<float> out(hdr.size());
  std::transform(hdr.data().begin(), hdr.data().end(), out.begin(), [epsilon_log](float v) {
    return static_cast<float>(std::log(static_cast<double>(v) + epsilon_log));
  });
  return ImageBuffer(hdr.height(), hdr.width(), DynamicRange::LogHdr, std::move(out));
}

inline ImageBuffer log_decode(const ImageBuffer& logimg, double epsilon_log = kDefaultEpsilonLog) {
  require_range(logimg, DynamicRange::LogHdr, "log_decode");
  if (!(epsilon_log > 0.0)) throw Error("log_decode: epsilon_log must be positive");
  std::vector<float> out(logimg.size());
  std::transform(logimg.data().begin(), logimg.data().end(), out.begin(), [epsilon_log](float v) {
    return static_cast<float>(std::max(0.0, std::exp(static_cast<double>(v)) - epsilon_log));
  });
  return ImageBuffer(logimg.height(), logimg.width(), DynamicRange::HdrLinear, std::move(out));
}

/// Affine map between log-HDR values in [log_min, log_max] and the diffusion
/// working domain [-1, 1].
struct LogRange {
  double log_min = std::log(1.0 / 64.0);
  double log_max = std::log(64.0);
  double epsilon_log = kDefaultEpsilonLog;

  double to_model(double hdr) const {
    const double l = std::log(std::max(hdr, 0.0) + epsilon_log);
    return std::clamp(2.0 * (l - log_min) / (log_max - log_min) - 1.0, -1.0, 1.0);
  }
  double from_model(double m) const {
    const double l = log_min + (std::clamp(m, -1.0, 1.0) + 1.0) * 0.5 * (log_max - log_min);
    return std::max(0.0, std::exp(l) - epsilon_log);
  }
  /// d from_model / dm, ignoring the clamps.
  double from_model_slope(double m) const {
    const double l = log_min + (m + 1.0) * 0.5 * (log_max - log_min);
    return std::exp(l) * 0.5 * (log_max - log_min);
  }
};

/// HDR image -> model-domain values (tagged LOG_HDR; values in [-1, 1]).
inline ImageBuffer to_model_domain(const ImageBuffer& hdr, const LogRange& r) {
  require_range(hdr, DynamicRange::HdrLinear, "to_model_domain");
  std::vector<float> out(hdr.size());
  std::transform(hdr.data().begin(), hdr.data().end(), out.begin(),
                 [&](float v) { return static_cast<float>(r.to_model(v)); });
  return ImageBuffer(hdr.height(), hdr.width(), DynamicRange::LogHdr, std::move(out));
}

inline ImageBuffer from_model_domain(const ImageBuffer& model, const LogRange& r) {
  require_range(model, DynamicRange::LogHdr, "from_model_domain");
  std::vector<float> out(model.size());
  std::transform(model.data().begin(), model.data().end(), out.begin(),
                 [&](float v) { return static_cast<float>(r.from_model(v)); });
  return ImageBuffer(model.height(), model.width(), DynamicRange::HdrLinear, std::move(out));
}

}  // namespace hdrdiff::imgio
