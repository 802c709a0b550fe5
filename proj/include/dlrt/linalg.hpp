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
// The factorizations every integrator step needs: Householder QR, the
// orthonormal basis augmentation [U | K] -> Û, and a thin SVD for tall
// matrices (QR followed by one-sided Jacobi on the small triangular factor).
//

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dlrt/matrix.hpp"

namespace dlrt {

struct QrResult {
  Matrix q;  // m×k, orthonormal columns
  Matrix r;  // k×k, upper triangular, diag ≥ 0
};

struct SvdResult {
  Matrix p;                   // n×q, orthonormal columns
  std::vector<double> sigma;  // descending, ≥ 0
  Matrix qmat;                // q×q, orthogonal
};

namespace detail {

// Householder reflector stored as H = I − beta·v·vᵀ acting on rows [offset, m).
struct Reflector {
  std::size_t offset = 0;
  double beta = 0.0;
  std::vector<double> v;
};

// Builds the reflector annihilating a(offset+1:, col) and applies it to the
// columns [col, a.cols()). Returns the new diagonal entry.
inline double reflect_column(Matrix& a, std::size_t col, std::size_t offset, Reflector& h) {
  const std::size_t m = a.rows();
  const std::size_t len = m - offset;
  h.offset = offset;
  h.v.assign(len, 0.0);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    h.v[i] = a(offset + i, col);
    norm2 += h.v[i] * h.v[i];
  }
  const double alpha = std::sqrt(norm2);
  if (alpha == 0.0) {
    h.beta = 0.0;
    return 0.0;
  }
  const double x0 = h.v[0];
  const double diag = x0 >= 0.0 ? -alpha : alpha;
  h.v[0] = x0 - diag;
  const double vtv = norm2 - x0 * x0 + h.v[0] * h.v[0];
  h.beta = 2.0 / vtv;

  // w = vᵀ A(offset:, col:), then A -= beta·v·wᵀ; row-wise for locality.
  const std::size_t ncols = a.cols() - col;
  std::vector<double> w(ncols, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    const double vi = h.v[i];
    if (vi == 0.0) continue;
    const double* ar = a.row(offset + i).data() + col;
    for (std::size_t c = 0; c < ncols; ++c) w[c] += vi * ar[c];
  }
  for (std::size_t i = 0; i < len; ++i) {
    const double f = h.beta * h.v[i];
    if (f == 0.0) continue;
    double* ar = a.row(offset + i).data() + col;
    for (std::size_t c = 0; c < ncols; ++c) ar[c] -= f * w[c];
  }
  a(offset, col) = diag;
  for (std::size_t i = 1; i < len; ++i) a(offset + i, col) = 0.0;
  return diag;
}

// Thin Q (m×k) from the first k reflectors, accumulated backwards.
inline Matrix accumulate_q(std::size_t m, std::size_t k, const std::vector<Reflector>& hs) {
  Matrix q(m, k);
  for (std::size_t j = 0; j < k; ++j) q(j, j) = 1.0;
  std::vector<double> w(k);
  for (std::size_t jj = hs.size(); jj-- > 0;) {
    const Reflector& h = hs[jj];
    if (h.beta == 0.0) continue;
    // Columns < offset of Q are still unit vectors with zeros below row offset.
    const std::size_t c0 = h.offset;
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < h.v.size(); ++i) {
      const double vi = h.v[i];
      if (vi == 0.0) continue;
      const double* qr = q.row(h.offset + i).data();
      for (std::size_t c = c0; c < k; ++c) w[c] += vi * qr[c];
    }
    for (std::size_t i = 0; i < h.v.size(); ++i) {
      const double f = h.beta * h.v[i];
      if (f == 0.0) continue;
      double* qr = q.row(h.offset + i).data();
      for (std::size_t c = c0; c < k; ++c) qr[c] -= f * w[c];
    }
  }
  return q;
}

inline void require_finite(const Matrix& a, const char* what) {
  if (!a.all_finite()) throw numeric_error(std::string(what) + ": non-finite entries");
}

}  // namespace detail

/// Thin Householder QR of a tall matrix (m ≥ k). The diagonal of R is made
/// non-negative so the factorization is unique for full-rank input.
inline QrResult householder_qr(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  if (m < k)
    throw dimension_error("householder_qr: need rows >= cols, got " + detail::shape(a));
  detail::require_finite(a, "householder_qr input");

  Matrix work = a;
  std::vector<detail::Reflector> hs(k);
  for (std::size_t j = 0; j < k; ++j) detail::reflect_column(work, j, j, hs[j]);

  QrResult out{detail::accumulate_q(m, k, hs), Matrix(k, k)};
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) out.r(i, j) = work(i, j);

  for (std::size_t j = 0; j < k; ++j) {
    if (out.r(j, j) >= 0.0) continue;
    for (std::size_t c = j; c < k; ++c) out.r(j, c) = -out.r(j, c);
    for (std::size_t i = 0; i < m; ++i) out.q(i, j) = -out.q(i, j);
  }
  detail::require_finite(out.q, "householder_qr");
  detail::require_finite(out.r, "householder_qr");
  return out;
}

/// Relative threshold below which an augmentation column counts as dependent.
inline constexpr double kAugmentDropTolerance = 1e-12;

/// Orthonormal basis Û = [u0 | extra] whose span contains span(u0) and span(k1).
///
/// k1 is projected off u0 twice, then the residual goes through a
/// column-pivoted Householder QR; directions whose pivot falls to
/// kAugmentDropTolerance × max(1, largest column norm of k1) or below are
/// dropped, so Û has between u0.cols() and u0.cols() + k1.cols() columns.
inline Matrix ortho_augment(const Matrix& u0, const Matrix& k1) {
  if (u0.rows() != k1.rows())
    throw dimension_error("ortho_augment: " + detail::shape(u0) + " vs " + detail::shape(k1));
  detail::require_finite(k1, "ortho_augment input");

  const std::size_t m = u0.rows();
  double leading = 1.0;
  for (std::size_t c = 0; c < k1.cols(); ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += k1(i, c) * k1(i, c);
    leading = std::max(leading, std::sqrt(s));
  }
  const double tol = kAugmentDropTolerance * leading;

  Matrix w = k1;
  for (int pass = 0; pass < 2; ++pass) w -= matmul(u0, matmul_tn(u0, w));

  // Pivoted Householder on the residual; stops at the first negligible pivot.
  const std::size_t maxk = std::min(m - std::min(m, u0.cols()), w.cols());
  std::vector<detail::Reflector> hs;
  std::vector<double> colnorm(w.cols());
  for (std::size_t j = 0; j < maxk; ++j) {
    std::size_t best = j;
    double best_norm = -1.0;
    for (std::size_t c = j; c < w.cols(); ++c) {
      double s = 0.0;
      for (std::size_t i = j; i < m; ++i) s += w(i, c) * w(i, c);
      colnorm[c] = std::sqrt(s);
      if (colnorm[c] > best_norm) {
        best_norm = colnorm[c];
        best = c;
      }
    }
    if (best_norm <= tol) break;
    if (best != j)
      for (std::size_t i = 0; i < m; ++i) std::swap(w(i, j), w(i, best));
    hs.emplace_back();
    detail::reflect_column(w, j, j, hs.back());
  }

  if (hs.empty()) return u0;
  Matrix extra = detail::accumulate_q(m, hs.size(), hs);
  // Re-project once more: the reflectors only see the residual up to rounding.
  extra -= matmul(u0, matmul_tn(u0, extra));
  QrResult cleaned = householder_qr(extra);
  return hcat(u0, cleaned.q);
}

/// Maximum number of one-sided Jacobi sweeps before svd_thin reports failure.
inline constexpr int kJacobiMaxSweeps = 80;

/// Thin SVD L = P·diag(σ)·Qᵀ for n ≥ q: QR of L, then one-sided Jacobi on R.
inline SvdResult svd_thin(const Matrix& l) {
  const std::size_t n = l.rows();
  const std::size_t q = l.cols();
  if (n < q) throw dimension_error("svd_thin: need rows >= cols, got " + detail::shape(l));
  if (q == 0) return {Matrix(n, 0), {}, Matrix(0, 0)};

  QrResult qr = householder_qr(l);
  // Work on columns of B = R; store them transposed for contiguous access.
  Matrix bt = transpose(qr.r);  // row j = column j of B
  Matrix vt = Matrix::identity(q);  // row j = column j of V

  constexpr double eps = 1e-15;
  int sweep = 0;
  for (;; ++sweep) {
    if (sweep >= kJacobiMaxSweeps)
      throw numeric_error("svd_thin: Jacobi did not converge after " + std::to_string(sweep) +
                          " sweeps");
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < q; ++i) {
      for (std::size_t j = i + 1; j < q; ++j) {
        double* bi = bt.row(i).data();
        double* bj = bt.row(j).data();
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < q; ++k) {
          alpha += bi[k] * bi[k];
          beta += bj[k] * bj[k];
          gamma += bi[k] * bj[k];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < q; ++k) {
          const double x = bi[k], y = bj[k];
          bi[k] = c * x - s * y;
          bj[k] = s * x + c * y;
        }
        double* vi = vt.row(i).data();
        double* vj = vt.row(j).data();
        for (std::size_t k = 0; k < q; ++k) {
          const double x = vi[k], y = vj[k];
          vi[k] = c * x - s * y;
          vj[k] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(q);
  for (std::size_t j = 0; j < q; ++j) {
    double s = 0.0;
    for (double x : bt.row(j)) s += x * x;
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(q);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  SvdResult out{Matrix(), std::vector<double>(q), Matrix(q, q)};
  Matrix ur(q, q);  // left singular vectors of R
  std::vector<bool> filled(q, false);
  const double smax = norms[order[0]];
  for (std::size_t jj = 0; jj < q; ++jj) {
    const std::size_t j = order[jj];
    out.sigma[jj] = norms[j];
    for (std::size_t k = 0; k < q; ++k) out.qmat(k, jj) = vt(j, k);
    if (norms[j] > 0.0 && norms[j] > smax * 1e-13) {
      for (std::size_t k = 0; k < q; ++k) ur(k, jj) = bt(j, k) / norms[j];
      filled[jj] = true;
    }
  }
  // Null (or numerically null) directions of R: complete Ur with unit vectors
  // orthogonalized against the columns already present.
  for (std::size_t jj = 0; jj < q; ++jj) {
    if (filled[jj]) continue;
    for (std::size_t e = 0; e < q && !filled[jj]; ++e) {
      std::vector<double> cand(q, 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t c = 0; c < q; ++c) {
          if (!filled[c]) continue;
          double d = 0.0;
          for (std::size_t k = 0; k < q; ++k) d += ur(k, c) * cand[k];
          for (std::size_t k = 0; k < q; ++k) cand[k] -= d * ur(k, c);
        }
      double nrm = 0.0;
      for (double x : cand) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm < 0.5) continue;
      for (std::size_t k = 0; k < q; ++k) ur(k, jj) = cand[k] / nrm;
      filled[jj] = true;
    }
  }
  out.p = matmul(qr.q, ur);
  detail::require_finite(out.p, "svd_thin");
  return out;
}

}  // namespace dlrt
