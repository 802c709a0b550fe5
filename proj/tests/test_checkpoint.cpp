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

#include <gtest/gtest.h>

#include <bit>
#include <fstream>
#include <limits>

#include "dlrt/checkpoint.hpp"
#include "helpers.hpp"

namespace dlrt {
namespace {

using testing::scratch_dir;

bool bit_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) return false;
  return true;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

TEST(StatesCheckpoint, BitExactRoundTrip) {
  const auto dir = scratch_dir("states");
  std::vector<LowRankState> layers{init_lowrank(7, 5, 3, 1), init_lowrank(4, 9, 1, 2)};
  layers[0].s(0, 1) = -0.0;
  layers[0].s(1, 0) = std::numeric_limits<double>::denorm_min();
  layers[1].s(0, 0) = std::bit_cast<double>(std::uint64_t{0x7FF8000000000123});
  save_states(dir / "a.ckpt", layers);
  const auto back = load_states(dir / "a.ckpt");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(bit_equal(back[i].u, layers[i].u));
    EXPECT_TRUE(bit_equal(back[i].s, layers[i].s));
    EXPECT_TRUE(bit_equal(back[i].v, layers[i].v));
  }
  EXPECT_EQ(slurp(dir / "a.ckpt"), encode_states(layers));
}

TEST(StatesCheckpoint, HeaderLayout) {
  const std::vector<LowRankState> one{init_lowrank(2, 2, 1, 3)};
  const auto b = encode_states(one);
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 12 + 8 * (2 + 1 + 2));
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "DLRT");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[12], 2);
  EXPECT_EQ(b[20], 1);
}

TEST(StatesCheckpoint, RejectsCorruptFiles) {
  const auto dir = scratch_dir("bad");
  const std::vector<LowRankState> one{init_lowrank(6, 4, 2, 3)};
  auto bytes = encode_states(one);

  auto magic = bytes;
  magic[0] = 'X';
  spit(dir / "magic", magic);
  EXPECT_THROW(load_states(dir / "magic"), format_error);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
    spit(dir / "cut", std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
    EXPECT_THROW(load_states(dir / "cut"), format_error) << cut;
  }

  auto extra = bytes;
  extra.push_back(0);
  spit(dir / "extra", extra);
  EXPECT_THROW(load_states(dir / "extra"), format_error);

  auto huge = bytes;
  huge[12] = huge[13] = huge[14] = huge[15] = static_cast<char>(0xFF);
  spit(dir / "huge", huge);
  EXPECT_THROW(load_states(dir / "huge"), format_error);

  EXPECT_THROW(load_states(dir / "absent"), io_error);
  save_network(dir / "net", Network{});
  EXPECT_THROW(load_states(dir / "net"), format_error);
}

TEST(NetworkCheckpoint, BitExactRoundTrip) {
  const auto dir = scratch_dir("net");
  const std::vector<std::size_t> w{12, 8, 6, 3};
  Network net = init_network(mlp_specs(w, 3, true), 4, InitScheme::random);
  net.layers[1].bias = {0.5, -1e-300, 3, 4, 5, 6};
  save_network(dir / "n.ckpt", net);
  const Network back = load_network(dir / "n.ckpt");
  ASSERT_EQ(back.layers.size(), net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto &a = net.layers[l], &b = back.layers[l];
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.activation, b.activation);
    EXPECT_TRUE(bit_equal(a.weight, b.weight));
    EXPECT_TRUE(bit_equal(a.factors.u, b.factors.u));
    EXPECT_TRUE(bit_equal(a.factors.s, b.factors.s));
    EXPECT_TRUE(bit_equal(a.factors.v, b.factors.v));
    EXPECT_EQ(a.bias, b.bias);
  }
  const Matrix x = testing::random_matrix(3, 12, 1);
  EXPECT_EQ(forward(back, x), forward(net, x));
}

TEST(NetworkCheckpoint, RejectsBrokenChainsAndKinds) {
  const auto dir = scratch_dir("chain");
  Network net;
  Layer a, b;
  a.weight = Matrix(3, 2);
  a.bias.assign(3, 0.0);
  b.weight = Matrix(1, 4);
  b.bias.assign(1, 0.0);
  net.layers = {a, b};
  save_network(dir / "c", net);
  EXPECT_THROW(load_network(dir / "c"), format_error);

  net.layers = {a};
  auto bytes = encode_network(net);
  bytes[12] = 7;
  spit(dir / "k", bytes);
  EXPECT_THROW(load_network(dir / "k"), format_error);

  net.layers[0].bias.pop_back();
  EXPECT_THROW(encode_network(net), dimension_error);
}

}  // namespace
}  // namespace dlrt
