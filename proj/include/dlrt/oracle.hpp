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
// Gradient oracles. An integrator asks for ∇ℓ at one factored point per
// low-rank layer and only ever consumes the contractions G·V and Gᵀ·U, so a
// gradient may be stored densely or as the outer product δᵀ·a that
// backpropagation produces.
//

#include <concepts>
#include <functional>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "dlrt/matrix.hpp"

namespace dlrt {

/// The point Y = left·rightᵀ at which a layer's gradient is requested.
struct FactoredPoint {
  Matrix left;   // m×k
  Matrix right;  // n×k

  Matrix dense() const { return matmul_nt(left, right); }
};

class Gradient {
 public:
  /// G stored as an m×n matrix.
  static Gradient dense(Matrix g) { return Gradient(std::move(g)); }

  /// G = deltaᵀ·input with delta b×m and input b×n (a batch of outer products).
  static Gradient outer(Matrix delta, Matrix input) {
    if (delta.rows() != input.rows())
      throw dimension_error("Gradient::outer: batch sizes differ");
    return Gradient(Outer{std::move(delta), std::move(input)});
  }

  std::size_t rows() const {
    return std::visit([](const auto& g) { return rows_of(g); }, rep_);
  }
  std::size_t cols() const {
    return std::visit([](const auto& g) { return cols_of(g); }, rep_);
  }

  /// G·V
  Matrix times(const Matrix& v) const {
    if (const auto* d = std::get_if<Matrix>(&rep_)) return matmul(*d, v);
    const auto& o = std::get<Outer>(rep_);
    return matmul_tn(o.delta, matmul(o.input, v));
  }

  /// Gᵀ·U
  Matrix transposed_times(const Matrix& u) const {
    if (const auto* d = std::get_if<Matrix>(&rep_)) return matmul_tn(*d, u);
    const auto& o = std::get<Outer>(rep_);
    return matmul_tn(o.input, matmul(o.delta, u));
  }

  Matrix to_dense() const {
    if (const auto* d = std::get_if<Matrix>(&rep_)) return *d;
    const auto& o = std::get<Outer>(rep_);
    return matmul_tn(o.delta, o.input);
  }

 private:
  struct Outer {
    Matrix delta;
    Matrix input;
  };
  static std::size_t rows_of(const Matrix& m) { return m.rows(); }
  static std::size_t cols_of(const Matrix& m) { return m.cols(); }
  static std::size_t rows_of(const Outer& o) { return o.delta.cols(); }
  static std::size_t cols_of(const Outer& o) { return o.input.cols(); }

  explicit Gradient(std::variant<Matrix, Outer> rep) : rep_(std::move(rep)) {}

  std::variant<Matrix, Outer> rep_;
};

/// Anything that returns one gradient per requested point, in order. All
/// points of one call are evaluated jointly (one forward/backward pass for a
/// network), so layers advance through the integrator phases in lockstep.
template <class O>
concept GradientOracle = requires(O& o, std::span<const FactoredPoint> pts) {
  { o.evaluate(pts) } -> std::same_as<std::vector<Gradient>>;
};

/// Oracle for a single matrix-valued problem with a dense gradient.
/// Optional contracted callables may skip materializing ∇ℓ; they must agree
/// with the dense route.
class MatrixOracle {
 public:
  using FullFn = std::function<Matrix(const Matrix&)>;
  using ContractFn = std::function<Matrix(const Matrix&, const Matrix&)>;

  explicit MatrixOracle(FullFn full, ContractFn kgrad = {}, ContractFn lgrad = {})
      : full_(std::move(full)), kgrad_(std::move(kgrad)), lgrad_(std::move(lgrad)) {}

  /// ∇ℓ(y)
  Matrix eval_full(const Matrix& y) const { return full_(y); }

  /// ∇ℓ(K·Vᵀ)·V
  Matrix eval_kgrad(const Matrix& k, const Matrix& v) const {
    if (kgrad_) return kgrad_(k, v);
    return matmul(full_(matmul_nt(k, v)), v);
  }

  /// ∇ℓ(U·Lᵀ)ᵀ·U
  Matrix eval_lgrad(const Matrix& u, const Matrix& l) const {
    if (lgrad_) return lgrad_(u, l);
    return matmul_tn(full_(matmul_nt(u, l)), u);
  }

  std::vector<Gradient> evaluate(std::span<const FactoredPoint> pts) {
    std::vector<Gradient> out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(Gradient::dense(full_(p.dense())));
    calls_ += 1;
    return out;
  }

  std::size_t calls() const noexcept { return calls_; }

 private:
  FullFn full_;
  ContractFn kgrad_;
  ContractFn lgrad_;
  std::size_t calls_ = 0;
};

/// ℓ(Y) = ½‖Y − A‖², gradient Y − A, Lipschitz constant 1.
class QuadraticLoss {
 public:
  explicit QuadraticLoss(Matrix target) : target_(std::move(target)) {}

  const Matrix& target() const noexcept { return target_; }
  static constexpr double lipschitz() noexcept { return 1.0; }

  double value(const Matrix& y) const {
    const double d = frobenius_norm(y - target_);
    return 0.5 * d * d;
  }
  Matrix gradient(const Matrix& y) const { return y - target_; }

  /// Oracle with contracted forms: ∇ℓ(KVᵀ)V = K(VᵀV) − AV, ∇ℓ(ULᵀ)ᵀU = L(UᵀU) − AᵀU.
  MatrixOracle oracle() const {
    const Matrix a = target_;
    return MatrixOracle([a](const Matrix& y) { return y - a; },
                        [a](const Matrix& k, const Matrix& v) {
                          return matmul(k, matmul_tn(v, v)) - matmul(a, v);
                        },
                        [a](const Matrix& u, const Matrix& l) {
                          return matmul(l, matmul_tn(u, u)) - matmul_tn(a, u);
                        });
  }

 private:
  Matrix target_;
};

}  // namespace dlrt
