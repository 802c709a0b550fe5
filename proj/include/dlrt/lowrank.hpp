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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlrt/linalg.hpp"

namespace dlrt {

/// Y = U·S·Vᵀ with orthonormal U (m×r) and V (n×r).
struct LowRankState {
  Matrix u;
  Matrix s;
  Matrix v;

  std::size_t rank() const noexcept { return s.rows(); }
  std::size_t rows() const noexcept { return u.rows(); }
  std::size_t cols() const noexcept { return v.rows(); }

  /// U·S, the K factor.
  Matrix k() const { return matmul(u, s); }

  /// The dense m×n matrix. Tests and small problems only.
  Matrix dense() const { return matmul_nt(matmul(u, s), v); }

  friend bool operator==(const LowRankState&, const LowRankState&) = default;
};

/// Throws dimension_error if the factors do not fit together.
inline void validate_shapes(const LowRankState& y) {
  const std::size_t r = y.s.rows();
  if (y.s.cols() != r || y.u.cols() != r || y.v.cols() != r)
    throw dimension_error("LowRankState: inconsistent rank (U " + detail::shape(y.u) + ", S " +
                          detail::shape(y.s) + ", V " + detail::shape(y.v) + ")");
  if (r < 1 || r > std::min(y.u.rows(), y.v.rows()))
    throw dimension_error("LowRankState: rank " + std::to_string(r) + " outside [1, min(m,n)]");
}

/// Orthonormality defect of both bases, max(‖UᵀU − I‖, ‖VᵀV − I‖).
inline double basis_defect(const LowRankState& y) {
  return std::max(orthonormality_defect(y.u), orthonormality_defect(y.v));
}

/// Seeded random state: U, V from QR of Gaussian draws, S = sigma·I.
/// sigma defaults to 1/√r so that ‖Y‖_F = 1.
inline LowRankState init_lowrank(std::size_t m, std::size_t n, std::size_t r, std::uint64_t seed,
                                 std::optional<double> sigma = std::nullopt) {
  if (r < 1 || r > std::min(m, n))
    throw dimension_error("init_lowrank: rank " + std::to_string(r) + " invalid for " +
                          std::to_string(m) + "x" + std::to_string(n));
  std::mt19937_64 rng(seed);
  Matrix gu = Matrix::gaussian(m, r, rng);
  Matrix gv = Matrix::gaussian(n, r, rng);
  const double s0 = sigma.value_or(1.0 / std::sqrt(static_cast<double>(r)));
  Matrix s(r, r);
  for (std::size_t i = 0; i < r; ++i) s(i, i) = s0;
  return {householder_qr(gu).q, std::move(s), householder_qr(gv).q};
}

/// P(Y)G = UUᵀG − UUᵀGVVᵀ + GVVᵀ, evaluated through the r-dimensional
/// contractions so no m×m or n×n projector is formed.
inline Matrix tangent_project(const LowRankState& y, const Matrix& g) {
  if (g.rows() != y.rows() || g.cols() != y.cols())
    throw dimension_error("tangent_project: gradient " + detail::shape(g) + " vs state " +
                          std::to_string(y.rows()) + "x" + std::to_string(y.cols()));
  const Matrix utg = matmul_tn(y.u, g);    // r×n
  const Matrix gv = matmul(g, y.v);        // m×r
  const Matrix utgv = matmul(utg, y.v);    // r×r
  Matrix out = matmul(y.u, utg);           // UUᵀG
  out += matmul_nt(gv, y.v);               // + GVVᵀ
  out -= matmul_nt(matmul(y.u, utgv), y.v);  // − UUᵀGVVᵀ
  return out;
}

enum class TruncationCriterion {
  /// smallest r with ‖σ_{r+1:}‖ ≤ τ·‖σ‖ (the algorithm-box rule, default)
  norm_ratio,
  /// smallest r with Σ_{i>r} σ_i² < τ·‖σ‖ (the prose variant)
  squared_tail,
};

struct TruncationPolicy {
  double tau = 0.1;
  std::size_t r_min = 2;
  std::size_t r_max = std::numeric_limits<std::size_t>::max();
  TruncationCriterion criterion = TruncationCriterion::norm_ratio;
};

/// Rank retained after truncating the descending spectrum sigma under policy,
/// clamped to [r_min, min(r_max, q)].
inline std::size_t truncation_rank(std::span<const double> sigma, const TruncationPolicy& policy) {
  const std::size_t q = sigma.size();
  if (q == 0) throw dimension_error("truncation_rank: empty spectrum");

  // tail[r] = Σ_{i ≥ r} σ_i² (0-based), accumulated from the small end.
  std::vector<double> tail(q + 1, 0.0);
  for (std::size_t i = q; i-- > 0;) tail[i] = tail[i + 1] + sigma[i] * sigma[i];
  const double total = std::sqrt(tail[0]);

  std::size_t r = q;
  for (std::size_t cand = 1; cand <= q; ++cand) {
    const bool ok = policy.criterion == TruncationCriterion::norm_ratio
                        ? std::sqrt(tail[cand]) <= policy.tau * total
                        : tail[cand] < policy.tau * total;
    if (ok) {
      r = cand;
      break;
    }
  }
  const std::size_t upper = std::min(policy.r_max, q);
  return std::clamp(r, std::min(policy.r_min, upper), upper);
}

struct TruncatedFactors {
  Matrix k_star;  // m×r1 = Û·Q_{:,1:r1}·diag(σ_1..σ_r1)
  Matrix v_star;  // n×r1 = P_{:,1:r1}
  std::vector<double> sigma;  // full spectrum of l1
  std::size_t rank = 0;
};

/// Truncated re-factorization of Ŷ = Û·L1ᵀ through the SVD of L1.
inline TruncatedFactors truncate_state(const Matrix& u_hat, const Matrix& l1,
                                       const TruncationPolicy& policy) {
  if (u_hat.cols() != l1.cols())
    throw dimension_error("truncate_state: Û " + detail::shape(u_hat) + " vs L " +
                          detail::shape(l1));
  SvdResult svd;
  if (l1.rows() >= l1.cols()) {
    svd = svd_thin(l1);
  } else {
    // Wide L1 (n < q): factor L1ᵀ = Q·Σ·Pᵀ and swap the roles.
    SvdResult t = svd_thin(transpose(l1));
    svd = {std::move(t.qmat), std::move(t.sigma), std::move(t.p)};
  }
  const std::size_t r1 = truncation_rank(svd.sigma, policy);
  Matrix q_lead = columns(svd.qmat, 0, r1);
  std::span<const double> lead(svd.sigma.data(), r1);
  return {scale_columns(matmul(u_hat, q_lead), lead), columns(svd.p, 0, r1),
          std::move(svd.sigma), r1};
}

struct LayerShape {
  std::size_t in_dim;
  std::size_t out_dim;
  std::size_t rank;
};

/// (1 − Σ(i+o)·r / Σ i·o)·100. Negative when the factors outgrow the dense layer.
inline double compression_rate(std::span<const LayerShape> layers) {
  double factored = 0.0;
  double dense = 0.0;
  for (const auto& l : layers) {
    factored += static_cast<double>(l.in_dim + l.out_dim) * static_cast<double>(l.rank);
    dense += static_cast<double>(l.in_dim) * static_cast<double>(l.out_dim);
  }
  return (1.0 - factored / dense) * 100.0;
}

/// Σ m·r + n·r + r².
inline std::size_t param_count(std::span<const LayerShape> layers) {
  std::size_t total = 0;
  for (const auto& l : layers) total += (l.in_dim + l.out_dim) * l.rank + l.rank * l.rank;
  return total;
}

}  // namespace dlrt
