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
// Deterministic matrix-problem harnesses: error vs. a fine full-rank
// reference, the per-step descent inequality of abc-PSI, and the projected
// gradient trend under a decaying step size.
//

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dlrt/integrators.hpp"

namespace dlrt {

/// Matrix gradient flow Ẇ = −∇ℓ(W) started from a low-rank point.
struct OdeProblem {
  std::function<Matrix(const Matrix&)> gradient;
  LowRankState initial;  // Y0 = W0, so the initial gap δ is 0
};

/// ℓ(Y) = ½‖Y − A‖² with A = A_r + eps·E. A_r shares the (random) bases of
/// the initial state with its own random spectrum, so for eps = 0 the
/// gradient stays in the tangent space; E is a unit-norm Gaussian matrix.
struct QuadraticOdeSetup {
  QuadraticLoss loss;
  LowRankState initial;
};

inline QuadraticOdeSetup make_quadratic_ode_problem(std::size_t m, std::size_t n, std::size_t r,
                                                    double eps, std::uint64_t seed) {
  LowRankState y0 = init_lowrank(m, n, r, seed);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> sv(0.5, 2.0);
  Matrix s_target(r, r);
  for (std::size_t i = 0; i < r; ++i) s_target(i, i) = sv(rng);
  // Non-diagonal initial core so the flow rotates within the subspace.
  Matrix s0 = Matrix::gaussian(r, r, rng, 1.0 / std::sqrt(static_cast<double>(r)));
  for (std::size_t i = 0; i < r; ++i) s0(i, i) += 1.0;
  y0.s = s0;
  Matrix a = matmul_nt(matmul(y0.u, s_target), y0.v);
  Matrix e = Matrix::gaussian(m, n, rng);
  e *= 1.0 / frobenius_norm(e);
  axpy(eps, e, a);
  return {QuadraticLoss(std::move(a)), std::move(y0)};
}

struct OdeStudyRow {
  double h = 0;
  std::size_t steps = 0;
  double error = 0;                // ‖Y(t_end) − W_ref(t_end)‖_F
  std::optional<double> order;     // log(e_prev/e) / log(h_prev/h)
  std::size_t final_rank = 0;
};

namespace detail {
inline std::size_t step_count(double t_end, double h) {
  const double n = std::round(t_end / h);
  if (n < 1 || std::abs(n * h - t_end) > 1e-9 * std::max(1.0, t_end))
    throw config_error("t_end must be an integer multiple of every step size");
  return static_cast<std::size_t>(n);
}
}  // namespace detail

/// Integrates the problem to t_end with each h in h_list and compares with
/// explicit Euler on the full matrix at step ref_h.
inline std::vector<OdeStudyRow> ode_error_study(const OdeProblem& problem, Integrator integrator,
                                                std::span<const double> h_list, double t_end,
                                                double ref_h, const TruncationPolicy& policy,
                                                int substeps = 1) {
  if (h_list.empty()) throw config_error("ode_error_study: empty h list");
  if (!(t_end > 0) || !(ref_h > 0)) throw config_error("ode_error_study: t_end, ref_h must be > 0");
  validate_shapes(problem.initial);

  const Matrix w0 = problem.initial.dense();
  Matrix reference = w0;
  for (std::size_t i = 0, n = detail::step_count(t_end, ref_h); i < n; ++i)
    reference = euler_full_step(reference, problem.gradient, ref_h);

  MatrixOracle oracle(problem.gradient);
  std::vector<OdeStudyRow> rows;
  for (double h : h_list) {
    if (!(h > 0)) throw config_error("ode_error_study: step sizes must be > 0");
    const std::size_t n = detail::step_count(t_end, h);
    OdeStudyRow row{h, n, 0.0, std::nullopt, 0};
    Matrix final_y;
    if (integrator == Integrator::full) {
      final_y = w0;
      for (std::size_t i = 0; i < n; ++i) final_y = euler_full_step(final_y, problem.gradient, h);
      row.final_rank = std::min(w0.rows(), w0.cols());
    } else {
      StepConfig cfg{h, substeps, policy};
      LowRankState y = problem.initial;
      for (std::size_t i = 0; i < n; ++i) y = lowrank_step(integrator, y, oracle, cfg);
      final_y = y.dense();
      row.final_rank = y.rank();
    }
    row.error = frobenius_norm(final_y - reference);
    if (!rows.empty() && rows.back().error > 0 && row.error > 0)
      row.order = std::log(rows.back().error / row.error) / std::log(rows.back().h / h);
    rows.push_back(row);
  }
  return rows;
}

/// Both sides of ℓ(Ŷ1) ≤ ℓ(Y0) − (1 − h·c_l/2)·h·‖P_Û∇ℓ(Y0)‖² for one step.
struct DescentRecord {
  double loss_before = 0;  // ℓ(Y0)
  double loss_hat = 0;     // ℓ(Ŷ1), before truncation
  double bound = 0;        // right-hand side
  double loss_after = 0;   // ℓ(Y1), after truncation
  double projected_grad_norm = 0;  // ‖P_Û∇ℓ(Y0)‖
  std::size_t rank = 0;
  std::vector<double> sigma;

  double slack() const { return loss_hat - bound; }  // ≤ 0 when the inequality holds
};

/// One abc-PSI step on a dense-gradient problem, recording the descent data.
template <class Loss>
std::pair<LowRankState, DescentRecord> audited_abc_step(const LowRankState& y0, const Loss& loss,
                                                        const StepConfig& cfg,
                                                        double lipschitz) {
  MatrixOracle oracle([&loss](const Matrix& y) { return loss.gradient(y); });
  AbcPsiTrace trace;
  LowRankState y1 = abc_psi_step(y0, oracle, cfg, &trace);

  const Matrix dense0 = y0.dense();
  const Matrix g0 = loss.gradient(dense0);
  const Matrix pg = matmul(trace.u_hat, matmul_tn(trace.u_hat, g0));
  const double pnorm = frobenius_norm(pg);

  DescentRecord rec;
  rec.loss_before = loss.value(dense0);
  rec.loss_hat = loss.value(matmul_nt(trace.u_hat, trace.l1));
  rec.bound = rec.loss_before - (1.0 - cfg.h * lipschitz / 2.0) * cfg.h * pnorm * pnorm;
  rec.loss_after = loss.value(y1.dense());
  rec.projected_grad_norm = pnorm;
  rec.rank = y1.rank();
  rec.sigma = std::move(trace.sigma);
  return {std::move(y1), std::move(rec)};
}

/// Target A = U diag(r, r-1, ..., 1) Vᵀ + noise·E with ‖E‖_F = 1, and a
/// start point whose bases are drawn independently of A's. The gap between
/// σ_r(A) and the noise keeps the rank-r critical point well separated.
inline QuadraticOdeSetup make_gapped_quadratic(std::size_t m, std::size_t n, std::size_t r,
                                               double noise, std::uint64_t seed) {
  LowRankState target = init_lowrank(m, n, r, seed ^ 0xA5A5A5A5ULL);
  std::vector<double> d(r);
  for (std::size_t i = 0; i < r; ++i) d[i] = static_cast<double>(r - i);
  target.s = Matrix::diagonal(d);
  Matrix a = target.dense();
  std::mt19937_64 rng(seed);
  Matrix e = Matrix::gaussian(m, n, rng);
  e *= 1.0 / frobenius_norm(e);
  axpy(noise, e, a);
  return {QuadraticLoss(std::move(a)), init_lowrank(m, n, r, seed + 1)};
}

/// ‖P(Y)∇ℓ(Y)‖ along abc-PSI iterates with h_t = h0 / t, t = 1..steps.
/// Entry 0 is the value at the initial state.
template <class Loss>
std::vector<double> projected_gradient_trend(LowRankState y, const Loss& loss, double h0,
                                             std::size_t steps, const TruncationPolicy& policy) {
  MatrixOracle oracle([&loss](const Matrix& m) { return loss.gradient(m); });
  std::vector<double> out;
  out.reserve(steps + 1);
  out.push_back(frobenius_norm(tangent_project(y, loss.gradient(y.dense()))));
  for (std::size_t t = 1; t <= steps; ++t) {
    StepConfig cfg{h0 / static_cast<double>(t), 1, policy};
    y = abc_psi_step(y, oracle, cfg);
    out.push_back(frobenius_norm(tangent_project(y, loss.gradient(y.dense()))));
  }
  return out;
}

}  // namespace dlrt
