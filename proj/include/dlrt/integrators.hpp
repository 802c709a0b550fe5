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
// One time step of each low-rank integrator for the gradient flow
// Ẏ = −P(Y)∇ℓ(Y), with every sub-flow discretized by explicit Euler.
//
// All steps take a list of states (one per low-rank layer) and query the
// oracle for all layers at once, so a multi-layer network moves through the
// K, S and L phases in lockstep. The first oracle call of every step is at
// the unmodified input point; network training relies on this to read off
// the pre-step loss and the dense/bias gradients.
//

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlrt/linalg.hpp"
#include "dlrt/lowrank.hpp"
#include "dlrt/oracle.hpp"

namespace dlrt {

enum class Integrator { full, psi, bc_psi, bug, abc_psi };

inline std::string_view to_string(Integrator i) {
  switch (i) {
    case Integrator::full: return "full";
    case Integrator::psi: return "psi";
    case Integrator::bc_psi: return "bc-psi";
    case Integrator::bug: return "bug";
    case Integrator::abc_psi: return "abc-psi";
  }
  return "?";
}

inline std::optional<Integrator> parse_integrator(std::string_view s) {
  for (auto i : {Integrator::full, Integrator::psi, Integrator::bc_psi, Integrator::bug,
                 Integrator::abc_psi})
    if (to_string(i) == s) return i;
  return std::nullopt;
}

struct StepConfig {
  double h = 0.01;
  int substeps = 1;
  TruncationPolicy policy{};  // abc-PSI only
};

inline void validate(const StepConfig& cfg) {
  if (!(cfg.h > 0.0)) throw config_error("step size h must be > 0");
  if (cfg.substeps < 1) throw config_error("substeps must be >= 1");
}

/// W − h·∇ℓ(W).
template <class GradFn>
Matrix euler_full_step(const Matrix& w, GradFn&& gradient, double h) {
  Matrix g = gradient(w);
  if (g.rows() != w.rows() || g.cols() != w.cols())
    throw dimension_error("euler_full_step: gradient " + detail::shape(g) + " vs " +
                          detail::shape(w));
  if (!g.all_finite()) throw numeric_error("euler_full_step: non-finite gradient");
  Matrix out = w;
  axpy(-h, g, out);
  return out;
}

// Per-layer intermediates, for tests and audits.

struct PsiTrace {
  Matrix k1;       // after the K-step
  Matrix u1;       // Q of K1
  Matrix s_tilde;  // R of K1 (S-step initial value)
  Matrix s1;       // after the S-step
};

struct BcPsiTrace {
  Matrix k1;
  Matrix u1;
  Matrix s_bar;  // U1ᵀU0S0
};

struct BugTrace {
  Matrix u1;
  Matrix v1;
  Matrix s_start;  // U1ᵀU0S0V0ᵀV1
};

struct AbcPsiTrace {
  Matrix k0;
  Matrix k1;
  Matrix u_hat;  // augmented basis, m×q
  Matrix l0;     // V0·K0ᵀ·Û
  Matrix l1;     // after the L-step; Ŷ1 = Û·L1ᵀ
  std::vector<double> sigma;  // spectrum of L1
  std::size_t rank_before = 0;
  std::size_t rank_after = 0;
};

namespace detail {

template <GradientOracle O>
std::vector<Gradient> query(O& oracle, const std::vector<FactoredPoint>& pts) {
  std::vector<Gradient> g = oracle.evaluate(std::span<const FactoredPoint>(pts));
  if (g.size() != pts.size())
    throw dimension_error("oracle returned " + std::to_string(g.size()) + " gradients for " +
                          std::to_string(pts.size()) + " points");
  return g;
}

// K ← K − h·∇ℓ(K·V0ᵀ)·V0, repeated `substeps` times for every layer.
template <GradientOracle O>
void k_step(std::vector<Matrix>& k, std::span<const LowRankState> y0, O& oracle,
            const StepConfig& cfg) {
  for (int s = 0; s < cfg.substeps; ++s) {
    std::vector<FactoredPoint> pts;
    pts.reserve(k.size());
    for (std::size_t l = 0; l < k.size(); ++l) pts.push_back({k[l], y0[l].v});
    auto g = query(oracle, pts);
    for (std::size_t l = 0; l < k.size(); ++l) axpy(-cfg.h, g[l].times(y0[l].v), k[l]);
  }
}

// L ← L − h·∇ℓ(U·Lᵀ)ᵀ·U with U fixed per layer.
template <GradientOracle O>
void l_step(std::vector<Matrix>& lmat, const std::vector<Matrix>& u, O& oracle,
            const StepConfig& cfg, int substeps) {
  for (int s = 0; s < substeps; ++s) {
    std::vector<FactoredPoint> pts;
    pts.reserve(lmat.size());
    for (std::size_t l = 0; l < lmat.size(); ++l) pts.push_back({u[l], lmat[l]});
    auto g = query(oracle, pts);
    for (std::size_t l = 0; l < lmat.size(); ++l)
      axpy(-cfg.h, g[l].transposed_times(u[l]), lmat[l]);
  }
}

inline std::vector<Matrix> initial_k(std::span<const LowRankState> y0) {
  std::vector<Matrix> k;
  k.reserve(y0.size());
  for (const auto& y : y0) {
    validate_shapes(y);
    k.push_back(y.k());
  }
  return k;
}

// (U1, Sᵀ-factor, V1) from QR of L1: L1 = V1·R  ⇒  S1 = Rᵀ.
inline LowRankState from_l_factor(Matrix u1, const Matrix& l1) {
  QrResult qr = householder_qr(l1);
  return {std::move(u1), transpose(qr.r), std::move(qr.q)};
}

template <class Fn>
auto single(const LowRankState& y, Fn&& fn) {
  std::vector<LowRankState> in{y};
  return fn(std::span<const LowRankState>(in));
}

}  // namespace detail

/// Projector-splitting step: K-step, S-step along +∇ (backwards in time),
/// L-step, then QR of L1. Fixed rank.
template <GradientOracle O>
std::vector<LowRankState> psi_step(std::span<const LowRankState> y0, O& oracle,
                                   const StepConfig& cfg, std::vector<PsiTrace>* trace = nullptr) {
  validate(cfg);
  const std::size_t nl = y0.size();
  std::vector<Matrix> k = detail::initial_k(y0);
  detail::k_step(k, y0, oracle, cfg);

  std::vector<Matrix> u1(nl), s(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    QrResult qr = householder_qr(k[l]);
    u1[l] = std::move(qr.q);
    s[l] = std::move(qr.r);
  }
  if (trace) {
    trace->assign(nl, {});
    for (std::size_t l = 0; l < nl; ++l) (*trace)[l] = {k[l], u1[l], s[l], {}};
  }

  // S ← S + h·U1ᵀ∇ℓ(U1·S·V0ᵀ)V0
  for (int sub = 0; sub < cfg.substeps; ++sub) {
    std::vector<FactoredPoint> pts;
    for (std::size_t l = 0; l < nl; ++l) pts.push_back({matmul(u1[l], s[l]), y0[l].v});
    auto g = detail::query(oracle, pts);
    for (std::size_t l = 0; l < nl; ++l)
      axpy(cfg.h, matmul_tn(u1[l], g[l].times(y0[l].v)), s[l]);
  }
  if (trace)
    for (std::size_t l = 0; l < nl; ++l) (*trace)[l].s1 = s[l];

  std::vector<Matrix> lmat(nl);
  for (std::size_t l = 0; l < nl; ++l) lmat[l] = matmul_nt(y0[l].v, s[l]);
  detail::l_step(lmat, u1, oracle, cfg, cfg.substeps);

  std::vector<LowRankState> out;
  out.reserve(nl);
  for (std::size_t l = 0; l < nl; ++l) out.push_back(detail::from_l_factor(u1[l], lmat[l]));
  return out;
}

/// Backward-corrected PSI: the S-step is replaced by the projection
/// S̄1 = U1ᵀU0S0. Fixed rank.
template <GradientOracle O>
std::vector<LowRankState> bc_psi_step(std::span<const LowRankState> y0, O& oracle,
                                      const StepConfig& cfg,
                                      std::vector<BcPsiTrace>* trace = nullptr) {
  validate(cfg);
  const std::size_t nl = y0.size();
  std::vector<Matrix> k0 = detail::initial_k(y0);
  std::vector<Matrix> k = k0;
  detail::k_step(k, y0, oracle, cfg);

  std::vector<Matrix> u1(nl), lmat(nl);
  if (trace) trace->assign(nl, {});
  for (std::size_t l = 0; l < nl; ++l) {
    u1[l] = householder_qr(k[l]).q;
    Matrix s_bar = matmul_tn(u1[l], k0[l]);
    lmat[l] = matmul_nt(y0[l].v, s_bar);
    if (trace) (*trace)[l] = {k[l], u1[l], std::move(s_bar)};
  }
  detail::l_step(lmat, u1, oracle, cfg, cfg.substeps);

  std::vector<LowRankState> out;
  out.reserve(nl);
  for (std::size_t l = 0; l < nl; ++l) out.push_back(detail::from_l_factor(u1[l], lmat[l]));
  return out;
}

/// Fixed-rank basis-update & Galerkin step: K and L evolve in parallel from
/// Y0, then a Galerkin S-step in the new bases.
template <GradientOracle O>
std::vector<LowRankState> bug_fixed_step(std::span<const LowRankState> y0, O& oracle,
                                         const StepConfig& cfg,
                                         std::vector<BugTrace>* trace = nullptr) {
  validate(cfg);
  const std::size_t nl = y0.size();
  std::vector<Matrix> k = detail::initial_k(y0);
  std::vector<Matrix> lmat(nl), u0(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    lmat[l] = matmul_nt(y0[l].v, y0[l].s);
    u0[l] = y0[l].u;
  }

  // Both sub-flows start at Y0, so their first Euler step shares one query.
  {
    std::vector<FactoredPoint> pts;
    for (std::size_t l = 0; l < nl; ++l) pts.push_back({k[l], y0[l].v});
    auto g = detail::query(oracle, pts);
    for (std::size_t l = 0; l < nl; ++l) {
      axpy(-cfg.h, g[l].times(y0[l].v), k[l]);
      axpy(-cfg.h, g[l].transposed_times(u0[l]), lmat[l]);
    }
  }
  if (cfg.substeps > 1) {
    StepConfig rest = cfg;
    rest.substeps = cfg.substeps - 1;
    detail::k_step(k, y0, oracle, rest);
    detail::l_step(lmat, u0, oracle, cfg, cfg.substeps - 1);
  }

  std::vector<Matrix> u1(nl), v1(nl), s(nl);
  if (trace) trace->assign(nl, {});
  for (std::size_t l = 0; l < nl; ++l) {
    u1[l] = householder_qr(k[l]).q;
    v1[l] = householder_qr(lmat[l]).q;
    s[l] = matmul(matmul(matmul_tn(u1[l], y0[l].u), y0[l].s), matmul_tn(y0[l].v, v1[l]));
    if (trace) (*trace)[l] = {u1[l], v1[l], s[l]};
  }

  // S ← S − h·U1ᵀ∇ℓ(U1·S·V1ᵀ)V1
  for (int sub = 0; sub < cfg.substeps; ++sub) {
    std::vector<FactoredPoint> pts;
    for (std::size_t l = 0; l < nl; ++l) pts.push_back({matmul(u1[l], s[l]), v1[l]});
    auto g = detail::query(oracle, pts);
    for (std::size_t l = 0; l < nl; ++l)
      axpy(-cfg.h, matmul_tn(u1[l], g[l].times(v1[l])), s[l]);
  }

  std::vector<LowRankState> out;
  out.reserve(nl);
  for (std::size_t l = 0; l < nl; ++l)
    out.push_back({std::move(u1[l]), std::move(s[l]), std::move(v1[l])});
  return out;
}

/// Augmented backward-corrected PSI, rank adaptive:
///   1. K1 = K0 − h·∇ℓ(K0V0ᵀ)V0,              K0 = U0S0
///   2. Û = orthonormal basis of [U0 | K1]      (q ≤ 2r columns)
///   3. L0 = V0·K0ᵀ·Û                           (so Û·L0ᵀ = Y0)
///   4. L1 = L0 − h·∇ℓ(Û·L0ᵀ)ᵀÛ
///   5. SVD of L1, keep r1 directions per the truncation policy, and
///      re-factor K* = U_new·S_new by QR.
template <GradientOracle O>
std::vector<LowRankState> abc_psi_step(std::span<const LowRankState> y0, O& oracle,
                                       const StepConfig& cfg,
                                       std::vector<AbcPsiTrace>* trace = nullptr) {
  validate(cfg);
  const std::size_t nl = y0.size();
  std::vector<Matrix> k0 = detail::initial_k(y0);
  std::vector<Matrix> k = k0;
  detail::k_step(k, y0, oracle, cfg);

  std::vector<Matrix> u_hat(nl), lmat(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    u_hat[l] = ortho_augment(y0[l].u, k[l]);
    lmat[l] = matmul(y0[l].v, matmul_tn(k0[l], u_hat[l]));
  }
  if (trace) {
    trace->assign(nl, {});
    for (std::size_t l = 0; l < nl; ++l) {
      auto& t = (*trace)[l];
      t.k0 = k0[l];
      t.k1 = k[l];
      t.u_hat = u_hat[l];
      t.l0 = lmat[l];
      t.rank_before = y0[l].rank();
    }
  }
  detail::l_step(lmat, u_hat, oracle, cfg, cfg.substeps);

  std::vector<LowRankState> out;
  out.reserve(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    TruncatedFactors tf = truncate_state(u_hat[l], lmat[l], cfg.policy);
    QrResult qr = householder_qr(tf.k_star);
    if (trace) {
      auto& t = (*trace)[l];
      t.l1 = lmat[l];
      t.sigma = tf.sigma;
      t.rank_after = tf.rank;
    }
    out.push_back({std::move(qr.q), std::move(qr.r), std::move(tf.v_star)});
  }
  return out;
}

// Single-layer conveniences.

template <GradientOracle O>
LowRankState psi_step(const LowRankState& y0, O& oracle, const StepConfig& cfg,
                      PsiTrace* trace = nullptr) {
  std::vector<PsiTrace> t;
  auto out = detail::single(y0, [&](auto ys) { return psi_step(ys, oracle, cfg, &t); });
  if (trace) *trace = std::move(t.front());
  return std::move(out.front());
}

template <GradientOracle O>
LowRankState bc_psi_step(const LowRankState& y0, O& oracle, const StepConfig& cfg,
                         BcPsiTrace* trace = nullptr) {
  std::vector<BcPsiTrace> t;
  auto out = detail::single(y0, [&](auto ys) { return bc_psi_step(ys, oracle, cfg, &t); });
  if (trace) *trace = std::move(t.front());
  return std::move(out.front());
}

template <GradientOracle O>
LowRankState bug_fixed_step(const LowRankState& y0, O& oracle, const StepConfig& cfg,
                            BugTrace* trace = nullptr) {
  std::vector<BugTrace> t;
  auto out = detail::single(y0, [&](auto ys) { return bug_fixed_step(ys, oracle, cfg, &t); });
  if (trace) *trace = std::move(t.front());
  return std::move(out.front());
}

template <GradientOracle O>
LowRankState abc_psi_step(const LowRankState& y0, O& oracle, const StepConfig& cfg,
                          AbcPsiTrace* trace = nullptr) {
  std::vector<AbcPsiTrace> t;
  auto out = detail::single(y0, [&](auto ys) { return abc_psi_step(ys, oracle, cfg, &t); });
  if (trace) *trace = std::move(t.front());
  return std::move(out.front());
}

/// Dispatch over the four low-rank integrators.
template <GradientOracle O>
std::vector<LowRankState> lowrank_step(Integrator which, std::span<const LowRankState> y0,
                                       O& oracle, const StepConfig& cfg) {
  switch (which) {
    case Integrator::psi: return psi_step(y0, oracle, cfg);
    case Integrator::bc_psi: return bc_psi_step(y0, oracle, cfg);
    case Integrator::bug: return bug_fixed_step(y0, oracle, cfg);
    case Integrator::abc_psi: return abc_psi_step(y0, oracle, cfg);
    case Integrator::full: break;
  }
  throw config_error("lowrank_step: integrator 'full' has no low-rank step");
}

template <GradientOracle O>
LowRankState lowrank_step(Integrator which, const LowRankState& y0, O& oracle,
                          const StepConfig& cfg) {
  return std::move(
      detail::single(y0, [&](auto ys) { return lowrank_step(which, ys, oracle, cfg); }).front());
}

struct SStepLossDelta {
  double loss_before;  // ℓ(U1·S̃0·V0ᵀ) = ℓ(K1·V0ᵀ)
  double loss_after;   // ℓ(U1·S1·V0ᵀ)
  double delta() const { return loss_after - loss_before; }
};

/// Runs only the PSI K-step and S-step of a single-matrix problem and reports
/// the loss around the S-step. `loss` needs value(Matrix) and gradient(Matrix).
template <class Loss>
SStepLossDelta s_step_loss_delta_psi(const LowRankState& y0, const Loss& loss,
                                     const StepConfig& cfg) {
  validate(cfg);
  validate_shapes(y0);
  Matrix k = y0.k();
  for (int s = 0; s < cfg.substeps; ++s)
    axpy(-cfg.h, matmul(loss.gradient(matmul_nt(k, y0.v)), y0.v), k);
  QrResult qr = householder_qr(k);
  const Matrix& u1 = qr.q;
  Matrix s = qr.r;
  const double before = loss.value(matmul_nt(matmul(u1, s), y0.v));
  for (int sub = 0; sub < cfg.substeps; ++sub) {
    Matrix g = loss.gradient(matmul_nt(matmul(u1, s), y0.v));
    axpy(cfg.h, matmul_tn(u1, matmul(g, y0.v)), s);
  }
  return {before, loss.value(matmul_nt(matmul(u1, s), y0.v))};
}

}  // namespace dlrt
