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

// Independent reference routines for the tests. The numeric helpers never
// call into the library's kernels, so agreement is a real cross-check.
// write_fake_mnist is only a fixture generator.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "dlrt/data.hpp"
#include "dlrt/matrix.hpp"

namespace dlrt::testing {

inline Matrix random_matrix(std::size_t m, std::size_t n, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return Matrix::gaussian(m, n, rng, stddev);
}

/// Textbook triple loop in the naive (i, j, k) order.
inline Matrix naive_mul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

inline Matrix naive_t(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double naive_norm(const Matrix& a) {
  long double s = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s += static_cast<long double>(a(i, j)) * a(i, j);
  return static_cast<double>(std::sqrt(s));
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  EXPECT_EQ(a.rows(), b.rows());
  EXPECT_EQ(a.cols(), b.cols());
  double d = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

inline double diff_norm(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d(i, j) = a(i, j) - b(i, j);
  return naive_norm(d);
}

/// ‖QᵀQ − I‖_F with the naive product.
inline double ortho_defect(const Matrix& q) {
  Matrix g = naive_mul(naive_t(q), q);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return naive_norm(g);
}

/// ‖(I − QQᵀ)X‖_F
inline double residual_outside(const Matrix& q, const Matrix& x) {
  Matrix p = naive_mul(q, naive_mul(naive_t(q), x));
  return diff_norm(x, p);
}

/// Fresh per-test scratch directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path base;
  if (const char* env = std::getenv("DLRT_TEST_TMP"); env && *env)
    base = env;
  else
    base = std::filesystem::temp_directory_path() / "dlrt-tests";
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = base / (std::string(info ? info->test_suite_name() : "x") + "." +
                     (info ? info->name() : "y") + "." + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}


/// A tiny MNIST-shaped directory: side×side images whose class is encoded by
/// which pixel block is bright, plus noise. Files are written gzip-compressed
/// when `gzip` is set.
inline void write_fake_mnist(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_test,
                             std::size_t side = 4, bool gzip = false, std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  auto make = [&](std::size_t n, const std::string& img, const std::string& lab) {
    Matrix x(n, side * side);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<std::uint8_t>(rng() % 10);
      for (std::size_t j = 0; j < side * side; ++j)
        x(i, j) = std::uniform_real_distribution<double>(0.0, 0.2)(rng);
      x(i, y[i] % (side * side)) = 1.0;
    }
    const std::string ext = gzip ? ".gz" : "";
    write_idx_images(dir / (img + ext), x, side, side, gzip);
    write_idx_labels(dir / (lab + ext), y, gzip);
  };
  make(n_train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
  make(n_test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

}  // namespace dlrt::testing
