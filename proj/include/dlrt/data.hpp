// Copyright 2026 The dlrt Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#pragma once

//
// IDX reader/writer (MNIST's file format) and seeded mini-batching.
//
// Files may be raw or gzip-compressed; gzip is recognized by its two magic
// bytes, not by the file name.
//

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlrt/errors.hpp"
#include "dlrt/matrix.hpp"

namespace dlrt {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kNumClasses = 10;

struct Dataset {
  Matrix images;                     // N×(rows·cols), values in [0, 1]
  std::vector<std::uint8_t> labels;  // N entries in [0, 10)

  std::size_t size() const noexcept { return labels.size(); }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failed: " + path.string());
  return bytes;
}

inline std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in,
                                         const std::string& name) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw io_error("zlib init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw format_error(name + ": corrupt or truncated gzip stream");
    }
    out.insert(out.end(), buf, buf + (sizeof buf - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw format_error(name + ": truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

inline std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B)
    return gunzip(bytes, path.string());
  return bytes;
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string name)
      : bytes_(b), name_(std::move(name)) {}

  std::uint32_t u32_be() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::span<const unsigned char> take(std::size_t n) {
    need(n);
    std::span<const unsigned char> s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw format_error(name_ + ": truncated (need " + std::to_string(n) + " more bytes at offset " +
                         std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()) + ")");
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline void check_magic(std::uint32_t got, std::uint32_t want, const std::string& name) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad magic 0x%08X (expected 0x%08X)", got, want);
    throw format_error(name + buf);
  }
}

inline void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& b,
                        bool gzip) {
  if (gzip) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw io_error("cannot create " + path.string());
    const int n = gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
    gzclose(f);
    if (n != static_cast<int>(b.size())) throw io_error("write failed: " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw io_error("write failed: " + path.string());
}

}  // namespace detail

/// Images as an N×(rows·cols) matrix scaled by 1/255.
inline Matrix load_idx_images(const std::filesystem::path& path) {
  const auto bytes = detail::read_maybe_gzip(path);
  const std::string name = path.string();
  detail::ByteReader rd(bytes, name);
  detail::check_magic(rd.u32_be(), kIdxImageMagic, name);
  const std::uint64_t count = rd.u32_be();
  const std::uint64_t rows = rd.u32_be();
  const std::uint64_t cols = rd.u32_be();
  const std::uint64_t pixels = rows * cols;
  // 2^40 bytes is far past anything sensible and keeps count·pixels in range.
  if (pixels == 0 && count > 0) throw format_error(name + ": zero-sized images");
  if (pixels > 0 && count > (std::uint64_t{1} << 40) / pixels)
    throw format_error(name + ": dimensions overflow");
  auto payload = rd.take(static_cast<std::size_t>(count * pixels));
  Matrix out(static_cast<std::size_t>(count), static_cast<std::size_t>(pixels));
  auto dst = out.data();
  for (std::size_t i = 0; i < payload.size(); ++i) dst[i] = payload[i] / 255.0;
  return out;
}

inline std::vector<std::uint8_t> load_idx_labels(const std::filesystem::path& path,
                                                 std::size_t num_classes = kNumClasses) {
  const auto bytes = detail::read_maybe_gzip(path);
  const std::string name = path.string();
  detail::ByteReader rd(bytes, name);
  detail::check_magic(rd.u32_be(), kIdxLabelMagic, name);
  const std::uint32_t count = rd.u32_be();
  auto payload = rd.take(count);
  std::vector<std::uint8_t> labels(payload.begin(), payload.end());
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw format_error(name + ": label " + std::to_string(labels[i]) + " at index " +
                         std::to_string(i) + " is out of range");
  return labels;
}

/// Writes pixels as round(255·x); values are clamped to [0, 1] first.
inline void write_idx_images(const std::filesystem::path& path, const Matrix& images,
                             std::size_t rows, std::size_t cols, bool gzip = false) {
  if (rows * cols != images.cols())
    throw dimension_error("write_idx_images: " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " does not match row width " + std::to_string(images.cols()));
  std::vector<unsigned char> b;
  b.reserve(16 + images.data().size());
  detail::put_u32_be(b, kIdxImageMagic);
  detail::put_u32_be(b, static_cast<std::uint32_t>(images.rows()));
  detail::put_u32_be(b, static_cast<std::uint32_t>(rows));
  detail::put_u32_be(b, static_cast<std::uint32_t>(cols));
  for (double v : images.data())
    b.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::write_bytes(path, b, gzip);
}

inline void write_idx_labels(const std::filesystem::path& path,
                             std::span<const std::uint8_t> labels, bool gzip = false) {
  std::vector<unsigned char> b;
  detail::put_u32_be(b, kIdxLabelMagic);
  detail::put_u32_be(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  detail::write_bytes(path, b, gzip);
}

/// A permutation of 0..n−1 seeded with seed ⊕ epoch, cut into consecutive
/// batches. The last batch may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw config_error("batch size must be at least 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ epoch);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

inline std::vector<std::uint8_t> gather_labels(std::span<const std::uint8_t> labels,
                                               std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

/// Keeps the first `limit` samples.
inline void truncate_dataset(Dataset& d, std::size_t limit) {
  if (limit >= d.size()) return;
  std::vector<double> head(d.images.data().begin(),
                           d.images.data().begin() + static_cast<std::ptrdiff_t>(limit * d.images.cols()));
  d.images = Matrix(limit, d.images.cols(), std::move(head));
  d.labels.resize(limit);
}

inline Dataset load_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                            std::optional<std::size_t> limit = std::nullopt) {
  Dataset d{load_idx_images(images), load_idx_labels(labels)};
  if (d.images.rows() != d.labels.size())
    throw format_error(images.string() + " has " + std::to_string(d.images.rows()) + " images but " +
                       labels.string() + " has " + std::to_string(d.labels.size()) + " labels");
  if (limit) truncate_dataset(d, *limit);
  return d;
}

struct MnistSplits {
  Dataset train;
  Dataset test;
};

/// Finds `stem` or `stem.gz` in dir; also accepts the dotted variant
/// (train-images.idx3-ubyte) some mirrors use.
inline std::filesystem::path find_idx_file(const std::filesystem::path& dir, const std::string& stem) {
  std::string dotted = stem;
  if (auto p = dotted.rfind("-idx"); p != std::string::npos) dotted[p] = '.';
  for (const auto& name : {stem, stem + ".gz", dotted, dotted + ".gz"}) {
    const auto p = dir / name;
    if (std::filesystem::is_regular_file(p)) return p;
  }
  throw io_error("missing " + stem + "[.gz] in " + dir.string());
}

inline MnistSplits load_mnist(const std::filesystem::path& dir,
                              std::optional<std::size_t> train_limit = std::nullopt) {
  if (!std::filesystem::is_directory(dir)) throw io_error("data directory not found: " + dir.string());
  MnistSplits s;
  s.train = load_dataset(find_idx_file(dir, "train-images-idx3-ubyte"),
                         find_idx_file(dir, "train-labels-idx1-ubyte"), train_limit);
  s.test = load_dataset(find_idx_file(dir, "t10k-images-idx3-ubyte"),
                        find_idx_file(dir, "t10k-labels-idx1-ubyte"));
  return s;
}

}  // namespace dlrt
