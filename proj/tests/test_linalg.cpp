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

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "dlrt/linalg.hpp"
#include "helpers.hpp"

namespace dlrt {
namespace {

using testing::diff_norm;
using testing::max_abs_diff;
using testing::naive_mul;
using testing::naive_t;
using testing::ortho_defect;
using testing::random_matrix;
using testing::residual_outside;

// ---------------------------------------------------------------- kernels

TEST(Kernels, TimesIdentityIsUnchanged) {
  const Matrix a = random_matrix(5, 3, 1);
  EXPECT_EQ(matmul(a, Matrix::identity(3)), a);
  EXPECT_EQ(matmul(Matrix::identity(5), a), a);
}

TEST(Kernels, DoubleTransposeIsUnchanged) {
  const Matrix a = random_matrix(4, 7, 2);
  EXPECT_EQ(transpose(transpose(a)), a);
  EXPECT_EQ(transpose(a), naive_t(a));
}

TEST(Kernels, HandTwoByTwo) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Matrix{{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul_tn(a, b), (Matrix{{26, 30}, {38, 44}}));
  EXPECT_EQ(matmul_nt(a, b), (Matrix{{17, 23}, {39, 53}}));
}

TEST(Kernels, ProductsMatchTripleLoop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dim(1, 17);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    const Matrix a = random_matrix(m, k, seed + 100);
    const Matrix b = random_matrix(k, n, seed + 200);
    const Matrix at = random_matrix(k, m, seed + 300);
    const Matrix bt = random_matrix(n, k, seed + 400);
    EXPECT_LT(max_abs_diff(matmul(a, b), naive_mul(a, b)), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_tn(at, b), naive_mul(naive_t(at), b)), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_nt(a, bt), naive_mul(a, naive_t(bt))), 1e-12);
  }
}

TEST(Kernels, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), dimension_error);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), dimension_error);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 2)), dimension_error);
  Matrix y(2, 2);
  EXPECT_THROW(axpy(1.0, Matrix(2, 3), y), dimension_error);
  EXPECT_THROW(hcat(Matrix(2, 1), Matrix(3, 1)), dimension_error);
}

TEST(Kernels, Axpy) {
  Matrix y{{1, 1}, {1, 1}};
  axpy(2.0, Matrix{{1, 2}, {3, 4}}, y);
  EXPECT_EQ(y, (Matrix{{3, 5}, {7, 9}}));
}

TEST(Kernels, FrobeniusNorm) {
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix::identity(3)), std::sqrt(3.0));
  EXPECT_EQ(frobenius_norm(Matrix(4, 5)), 0.0);
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{1, 2}, {3, 4}}), std::sqrt(30.0));
}

TEST(Kernels, RaggedLiteralAndBadLengthThrow) {
  EXPECT_THROW((Matrix{{1, 2}, {3}}), dimension_error);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), dimension_error);
}

TEST(Kernels, FiniteCheck) {
  Matrix a{{1, 2}, {3, 4}};
  EXPECT_TRUE(a.all_finite());
  a(1, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(a.all_finite());
}

// ---------------------------------------------------------------- QR

void expect_qr_contract(const Matrix& a, const QrResult& qr) {
  const std::size_t k = a.cols();
  ASSERT_EQ(qr.q.rows(), a.rows());
  ASSERT_EQ(qr.q.cols(), k);
  ASSERT_EQ(qr.r.rows(), k);
  ASSERT_EQ(qr.r.cols(), k);
  EXPECT_LE(ortho_defect(qr.q), 1e-12 * std::sqrt(static_cast<double>(k)));
  EXPECT_LE(diff_norm(naive_mul(qr.q, qr.r), a), 1e-12 * std::max(1.0, testing::naive_norm(a)));
  for (std::size_t i = 0; i < k; ++i) {
    EXPECT_GE(qr.r(i, i), 0.0);
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(qr.r(i, j), 0.0);
  }
}

TEST(HouseholderQr, Identity) {
  const auto qr = householder_qr(Matrix::identity(3));
  EXPECT_LT(max_abs_diff(qr.q, Matrix::identity(3)), 1e-15);
  EXPECT_LT(max_abs_diff(qr.r, Matrix::identity(3)), 1e-15);
}

TEST(HouseholderQr, ThreeFourColumn) {
  const auto qr = householder_qr(Matrix{{3}, {4}});
  EXPECT_NEAR(qr.q(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(qr.q(1, 0), 0.8, 1e-15);
  EXPECT_NEAR(qr.r(0, 0), 5.0, 1e-14);
  expect_qr_contract(Matrix{{3}, {4}}, qr);
}

TEST(HouseholderQr, RandomEightByThree) {
  const Matrix a = random_matrix(8, 3, 42);
  expect_qr_contract(a, householder_qr(a));
}

TEST(HouseholderQr, ThousandRandomShapes) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> kdist(1, 64);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = kdist(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(k, 512)(rng);
    const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-3, 3)(rng));
    const Matrix a = random_matrix(m, k, 1000 + t, scale);
    const auto qr = householder_qr(a);
    const std::size_t kk = a.cols();
    ASSERT_LE(orthonormality_defect(qr.q), 1e-12 * std::sqrt(static_cast<double>(kk))) << m << "x" << k;
    ASSERT_LE(frobenius_norm(matmul(qr.q, qr.r) - a), 1e-12 * std::max(1.0, frobenius_norm(a)))
        << m << "x" << k;
    for (std::size_t i = 0; i < kk; ++i) ASSERT_GE(qr.r(i, i), 0.0);
  }
}

TEST(HouseholderQr, RankDeficientInputStillFactors) {
  Matrix a = random_matrix(6, 3, 3);
  for (std::size_t i = 0; i < 6; ++i) a(i, 2) = 2.0 * a(i, 0) - a(i, 1);
  expect_qr_contract(a, householder_qr(a));
  expect_qr_contract(Matrix(5, 2), householder_qr(Matrix(5, 2)));
}

TEST(HouseholderQr, Deterministic) {
  const Matrix a = random_matrix(30, 7, 9);
  const auto x = householder_qr(a), y = householder_qr(a);
  EXPECT_EQ(x.q, y.q);
  EXPECT_EQ(x.r, y.r);
}

TEST(HouseholderQr, Errors) {
  EXPECT_THROW(householder_qr(Matrix(2, 3)), dimension_error);
  Matrix a = random_matrix(4, 2, 1);
  a(3, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(householder_qr(a), numeric_error);
}

// ---------------------------------------------------------------- augmentation

Matrix orthonormal(std::size_t m, std::size_t r, std::uint64_t seed) {
  return householder_qr(random_matrix(m, r, seed)).q;
}

TEST(OrthoAugment, SameSpanAddsNothing) {
  const Matrix u0 = orthonormal(12, 3, 1);
  const Matrix u = ortho_augment(u0, u0);
  EXPECT_EQ(u.cols(), 3u);
  EXPECT_LE(diff_norm(naive_mul(u, naive_t(u)), naive_mul(u0, naive_t(u0))), 1e-10);
}

TEST(OrthoAugment, OrthogonalDirection) {
  Matrix e1(4, 1), e2(4, 1);
  e1(0, 0) = 1;
  e2(1, 0) = 1;
  const Matrix u = ortho_augment(e1, e2);
  ASSERT_EQ(u.cols(), 2u);
  EXPECT_NEAR(std::abs(u(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(u(1, 1)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(u(0, 1)) + std::abs(u(2, 1)) + std::abs(u(3, 1)), 0.0, 1e-15);
}

TEST(OrthoAugment, RandomContainsBothSpans) {
  const Matrix u0 = orthonormal(20, 3, 11);
  const Matrix k1 = random_matrix(20, 3, 12);
  const Matrix u = ortho_augment(u0, k1);
  EXPECT_EQ(u.cols(), 6u);
  EXPECT_LE(residual_outside(u, u0), 1e-10);
  EXPECT_LE(residual_outside(u, k1), 1e-10);
  EXPECT_LE(ortho_defect(u), 1e-12 * std::sqrt(6.0));
}

TEST(OrthoAugment, KeepsU0AsLeadingColumns) {
  const Matrix u0 = orthonormal(15, 4, 21);
  const Matrix u = ortho_augment(u0, random_matrix(15, 4, 22));
  EXPECT_EQ(columns(u, 0, 4), u0);
}

TEST(OrthoAugment, DropsDependentColumns) {
  const Matrix u0 = orthonormal(10, 3, 31);
  // Two columns of K lie in span(U0) and the other two are parallel.
  Matrix k1 = matmul(u0, random_matrix(3, 4, 32));
  const Matrix w = random_matrix(10, 1, 33);
  for (std::size_t i = 0; i < 10; ++i) {
    k1(i, 2) += w(i, 0);
    k1(i, 3) += -3.0 * w(i, 0);
  }
  const Matrix u = ortho_augment(u0, k1);
  EXPECT_EQ(u.cols(), 4u);
  EXPECT_LE(residual_outside(u, k1), 1e-10);
  EXPECT_LE(ortho_defect(u), 1e-12 * 2.0);
}

TEST(OrthoAugment, ZeroKAndFullSpace) {
  const Matrix u0 = orthonormal(5, 2, 41);
  EXPECT_EQ(ortho_augment(u0, Matrix(5, 2)).cols(), 2u);
  // Column count can never exceed the ambient dimension.
  const Matrix u = ortho_augment(u0, random_matrix(5, 4, 42));
  EXPECT_EQ(u.cols(), 5u);
  EXPECT_LE(ortho_defect(u), 1e-12 * std::sqrt(5.0));
}

TEST(OrthoAugment, ShapeMismatchThrows) {
  EXPECT_THROW(ortho_augment(orthonormal(5, 2, 1), Matrix(6, 2)), dimension_error);
}

TEST(OrthoAugment, RandomPropertySweep) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(2 * r, 60)(rng);
    const Matrix u0 = orthonormal(m, r, 500 + t);
    const Matrix k1 = random_matrix(m, r, 900 + t, std::pow(10.0, (t % 7) - 3.0));
    const Matrix u = ortho_augment(u0, k1);
    ASSERT_LE(u.cols(), 2 * r);
    ASSERT_LE(residual_outside(u, u0), 1e-10);
    ASSERT_LE(residual_outside(u, k1), 1e-10 * std::max(1.0, testing::naive_norm(k1)));
    ASSERT_LE(ortho_defect(u), 1e-10 * std::sqrt(static_cast<double>(u.cols())));
  }
}

// ---------------------------------------------------------------- SVD

void expect_svd_contract(const Matrix& l, const SvdResult& s) {
  const std::size_t q = l.cols();
  ASSERT_EQ(s.sigma.size(), q);
  ASSERT_EQ(s.p.rows(), l.rows());
  ASSERT_EQ(s.p.cols(), q);
  ASSERT_EQ(s.qmat.rows(), q);
  ASSERT_EQ(s.qmat.cols(), q);
  for (std::size_t i = 0; i < q; ++i) {
    EXPECT_GE(s.sigma[i], 0.0);
    if (i > 0) {
      EXPECT_LE(s.sigma[i], s.sigma[i - 1]);
    }
  }
  const Matrix rec = naive_mul(naive_mul(s.p, Matrix::diagonal(s.sigma)), naive_t(s.qmat));
  EXPECT_LE(diff_norm(rec, l), 1e-10 * std::max(1.0, testing::naive_norm(l)));
  EXPECT_LE(ortho_defect(s.p), 1e-10 * std::sqrt(static_cast<double>(q)));
  EXPECT_LE(ortho_defect(s.qmat), 1e-10 * std::sqrt(static_cast<double>(q)));
}

TEST(SvdThin, DiagonalStacked) {
  Matrix l(4, 2);
  l(0, 0) = 3;
  l(1, 1) = 1;
  const auto s = svd_thin(l);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 1.0, 1e-14);
  expect_svd_contract(l, s);
}

TEST(SvdThin, AscendingDiagonalIsSorted) {
  Matrix l(3, 3);
  l(0, 0) = 1;
  l(1, 1) = 5;
  l(2, 2) = 2;
  const auto s = svd_thin(l);
  EXPECT_NEAR(s.sigma[0], 5.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
  expect_svd_contract(l, s);
}

TEST(SvdThin, RankOneOuterProduct) {
  // ‖u‖ = 2, ‖v‖ = 5
  const Matrix u{{2}, {0}, {0}, {0}, {0}, {0}};
  const Matrix v{{3}, {4}, {0}, {0}};
  const Matrix l = matmul_nt(u, v);
  const auto s = svd_thin(l);
  EXPECT_NEAR(s.sigma[0], 10.0, 1e-13);
  for (std::size_t i = 1; i < s.sigma.size(); ++i) EXPECT_NEAR(s.sigma[i], 0.0, 1e-13);
  expect_svd_contract(l, s);
}

std::vector<double> gram_oracle(const Matrix& l) {
  Eigen::MatrixXd e(l.rows(), l.cols());
  for (std::size_t i = 0; i < l.rows(); ++i)
    for (std::size_t j = 0; j < l.cols(); ++j) e(i, j) = l(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e);
  std::vector<double> out;
  for (Eigen::Index i = es.eigenvalues().size(); i-- > 0;)
    out.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  return out;
}

TEST(SvdThin, RandomThirtyByEightAgainstGramEigenvalues) {
  const Matrix l = random_matrix(30, 8, 5);
  const auto s = svd_thin(l);
  expect_svd_contract(l, s);
  const auto ref = gram_oracle(l);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(s.sigma[i], ref[i], 1e-8 * ref[i]);
}

TEST(SvdThin, RandomPropertySweep) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 200; ++t) {
    const std::size_t q = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(q, 120)(rng);
    const Matrix l = random_matrix(n, q, 3000 + t, std::pow(10.0, (t % 5) - 2.0));
    const auto s = svd_thin(l);
    expect_svd_contract(l, s);
    if (HasFailure()) FAIL() << "shape " << n << "x" << q;
    const auto ref = gram_oracle(l);
    // Well-separated leading values agree tightly with the Gram route.
    EXPECT_NEAR(s.sigma[0], ref[0], 1e-8 * ref[0]);
  }
}

TEST(SvdThin, RankDeficientAndZero) {
  const Matrix l = matmul(random_matrix(20, 3, 61), random_matrix(3, 7, 62));
  const auto s = svd_thin(l);
  expect_svd_contract(l, s);
  for (std::size_t i = 3; i < 7; ++i) EXPECT_LT(s.sigma[i], 1e-12 * s.sigma[0]);
  const auto z = svd_thin(Matrix(6, 3));
  expect_svd_contract(Matrix(6, 3), z);
  EXPECT_EQ(z.sigma[0], 0.0);
}

TEST(SvdThin, WideInputThrows) { EXPECT_THROW(svd_thin(Matrix(2, 3)), dimension_error); }

TEST(SvdThin, NonFiniteThrows) {
  Matrix l = random_matrix(5, 2, 1);
  l(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svd_thin(l), numeric_error);
}

}  // namespace
}  // namespace dlrt
