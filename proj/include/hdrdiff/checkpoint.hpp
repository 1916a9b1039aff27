// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary archive: magic, version, config text, step, RNG state and
// a list of named float arrays. Written to a temp file and renamed into place.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hdrdiff/image.hpp"

namespace hdrdiff::checkpoint {

inline constexpr char kMagic[8] = {'H', 'D', 'R', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Archive {
  std::string config_text;
  std::uint64_t step = 0;
  std::string rng_state;
  std::map<std::string, std::vector<float>> arrays;

  const std::vector<float>& array(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("checkpoint: missing array '" + name + "'");
    return it->second;
  }
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::string get_string(std::istream& in, std::uint64_t limit) {
  const std::uint64_t n = get_u64(in);
  if (n > limit) throw FormatError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void save(const Archive& a, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    detail::put_u64(out, kVersion);
    detail::put_string(out, a.config_text);
    detail::put_u64(out, a.step);
    detail::put_string(out, a.rng_state);
    detail::put_u64(out, a.arrays.size());
    for (const auto& [name, data] : a.arrays) {
      detail::put_string(out, name);
      detail::put_u64(out, data.size());
      static_assert(sizeof(float) == 4);
      for (float f : data) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                    static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
      }
    }
    out.flush();
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Archive load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic in " + path.string());
  const std::uint64_t version = detail::get_u64(in);
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto file_size = std::filesystem::file_size(path);
  Archive a;
  a.config_text = detail::get_string(in, file_size);
  a.step = detail::get_u64(in);
  a.rng_state = detail::get_string(in, file_size);
  const std::uint64_t n = detail::get_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = detail::get_string(in, file_size);
    const std::uint64_t len = detail::get_u64(in);
    if (len * 4 > file_size) throw FormatError("checkpoint: implausible array length for " + name);
    std::vector<float> data(len);
    for (auto& f : data) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated file");
      const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                              (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      std::memcpy(&f, &u, 4);
    }
    a.arrays.emplace(std::move(name), std::move(data));
  }
  return a;
}

}  // namespace hdrdiff::checkpoint
