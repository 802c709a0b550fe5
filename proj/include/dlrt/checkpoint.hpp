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
// Binary checkpoints. All integers are u32 little-endian, all reals are
// IEEE-754 binary64 little-endian, matrices are row-major.
//
//   "DLRT" | version | layer count | layers...
//
// Version 1 (factored layers only), per layer:
//   m n r | U (m×r) | S (r×r) | V (n×r)
//
// Version 2 (networks), per layer:
//   kind (0 dense, 1 factored) | activation (0 relu, 1 identity)
//   dense:    m n | W (m×n)
//   factored: m n r | U | S | V
//   then the bias: m reals
//
// Values round-trip bit for bit, NaN payloads included.
//

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "dlrt/errors.hpp"
#include "dlrt/lowrank.hpp"
#include "dlrt/nn.hpp"

namespace dlrt {

inline constexpr char kCheckpointMagic[4] = {'D', 'L', 'R', 'T'};
inline constexpr std::uint32_t kCheckpointStates = 1;
inline constexpr std::uint32_t kCheckpointNetwork = 2;

namespace detail {

class LeWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void size(std::size_t v, const char* what) {
    if (v > 0xFFFFFFFFu) throw dimension_error(std::string("checkpoint: ") + what + " exceeds u32");
    u32(static_cast<std::uint32_t>(v));
  }
  void matrix(const Matrix& m) {
    for (double d : m.data()) f64(d);
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class LeReader {
 public:
  LeReader(std::vector<char> b, std::string name) : buf_(std::move(b)), name_(std::move(name)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    need(rows * cols * 8);  // also rejects absurd sizes before allocating
    Matrix m(rows, cols);
    for (double& d : m.data()) d = f64();
    return m;
  }
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n)
      throw format_error(name_ + ": truncated checkpoint at offset " + std::to_string(pos_));
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }
  const char* at(std::size_t n) {
    need(n);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::string& name() const { return name_; }

 private:
  std::vector<char> buf_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline void write_state(LeWriter& w, const LowRankState& y) {
  validate_shapes(y);
  w.size(y.rows(), "m");
  w.size(y.cols(), "n");
  w.size(y.rank(), "r");
  w.matrix(y.u);
  w.matrix(y.s);
  w.matrix(y.v);
}

inline LowRankState read_state(LeReader& r) {
  const std::size_t m = r.u32(), n = r.u32(), k = r.u32();
  LowRankState y;
  y.u = r.matrix(m, k);
  y.s = r.matrix(k, k);
  y.v = r.matrix(n, k);
  return y;
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failed: " + path.string());
}

inline LeReader open_checkpoint(const std::filesystem::path& path, std::uint32_t want_version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LeReader r(std::move(bytes), path.string());
  if (std::memcmp(r.at(4), kCheckpointMagic, 4) != 0)
    throw format_error(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != want_version)
    throw format_error(path.string() + ": checkpoint version " + std::to_string(version) +
                       ", expected " + std::to_string(want_version));
  return r;
}

inline void expect_end(const LeReader& r) {
  if (r.pos() != r.size())
    throw format_error(r.name() + ": " + std::to_string(r.size() - r.pos()) +
                       " trailing bytes after checkpoint");
}

}  // namespace detail

inline std::vector<char> encode_states(std::span<const LowRankState> layers) {
  detail::LeWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointStates);
  w.size(layers.size(), "layer count");
  for (const auto& y : layers) detail::write_state(w, y);
  return w.bytes();
}

inline void save_states(const std::filesystem::path& path, std::span<const LowRankState> layers) {
  detail::write_file(path, encode_states(layers));
}

inline std::vector<LowRankState> load_states(const std::filesystem::path& path) {
  auto r = detail::open_checkpoint(path, kCheckpointStates);
  const std::uint32_t count = r.u32();
  std::vector<LowRankState> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(detail::read_state(r));
  detail::expect_end(r);
  return out;
}

inline std::vector<char> encode_network(const Network& net) {
  detail::LeWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointNetwork);
  w.size(net.layers.size(), "layer count");
  for (const auto& l : net.layers) {
    w.u32(l.kind == LayerKind::dense ? 0u : 1u);
    w.u32(l.activation == Activation::relu ? 0u : 1u);
    if (l.kind == LayerKind::dense) {
      w.size(l.weight.rows(), "m");
      w.size(l.weight.cols(), "n");
      w.matrix(l.weight);
    } else {
      detail::write_state(w, l.factors);
    }
    if (l.bias.size() != l.out_dim()) throw dimension_error("checkpoint: bias length mismatch");
    for (double b : l.bias) w.f64(b);
  }
  return w.bytes();
}

inline void save_network(const std::filesystem::path& path, const Network& net) {
  detail::write_file(path, encode_network(net));
}

inline Network load_network(const std::filesystem::path& path) {
  auto r = detail::open_checkpoint(path, kCheckpointNetwork);
  const std::uint32_t count = r.u32();
  Network net;
  for (std::uint32_t i = 0; i < count; ++i) {
    Layer l;
    const std::uint32_t kind = r.u32(), act = r.u32();
    if (kind > 1 || act > 1)
      throw format_error(path.string() + ": layer " + std::to_string(i) + " has unknown kind/activation");
    l.kind = kind == 0 ? LayerKind::dense : LayerKind::lowrank;
    l.activation = act == 0 ? Activation::relu : Activation::identity;
    if (l.kind == LayerKind::dense) {
      const std::size_t m = r.u32(), n = r.u32();
      l.weight = r.matrix(m, n);
    } else {
      l.factors = detail::read_state(r);
    }
    r.need(l.out_dim() * 8);
    l.bias.resize(l.out_dim());
    for (double& b : l.bias) b = r.f64();
    if (!net.layers.empty() && net.layers.back().out_dim() != l.in_dim())
      throw format_error(path.string() + ": layer " + std::to_string(i) + " does not chain");
    net.layers.push_back(std::move(l));
  }
  detail::expect_end(r);
  return net;
}

}  // namespace dlrt
