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
// Feed-forward network with dense and factored layers, hand-written
// forward/backward and softmax cross-entropy.
//
// Activations are stored batch-major: a batch of b samples with n features
// is a b×n matrix, and a layer with weight W (out×in) maps A to A·Wᵀ + 1·biasᵀ.
// Factored layers never form W: A·(left·rightᵀ)ᵀ = (A·right)·leftᵀ.
//

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlrt/integrators.hpp"
#include "dlrt/lowrank.hpp"
#include "dlrt/oracle.hpp"

namespace dlrt {

enum class Activation { relu, identity };
enum class LayerKind { dense, lowrank };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::relu;
  std::size_t initial_rank = 0;  // lowrank only
};

struct Layer {
  LayerKind kind = LayerKind::dense;
  Activation activation = Activation::relu;
  Matrix weight;         // dense: out×in
  LowRankState factors;  // lowrank: U out×r, S r×r, V in×r
  std::vector<double> bias;

  std::size_t in_dim() const { return kind == LayerKind::dense ? weight.cols() : factors.cols(); }
  std::size_t out_dim() const { return kind == LayerKind::dense ? weight.rows() : factors.rows(); }
  std::size_t rank() const { return kind == LayerKind::dense ? 0 : factors.rank(); }
};

struct Network {
  std::vector<Layer> layers;
  /// Bumped on every parameter update; forward caches remember it.
  std::uint64_t version = 0;

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  std::size_t lowrank_count() const {
    return static_cast<std::size_t>(std::count_if(
        layers.begin(), layers.end(), [](const Layer& l) { return l.kind == LayerKind::lowrank; }));
  }

  std::vector<LowRankState> lowrank_states() const {
    std::vector<LowRankState> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::lowrank) out.push_back(l.factors);
    return out;
  }

  /// The current weights of the factored layers as (U·S, V) points.
  std::vector<FactoredPoint> current_points() const {
    std::vector<FactoredPoint> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::lowrank) out.push_back({l.factors.k(), l.factors.v});
    return out;
  }
};

/// Checks chaining and rank bounds of an architecture.
inline void validate(std::span<const LayerSpec> specs) {
  if (specs.empty()) throw config_error("network needs at least one layer");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.in_dim == 0 || s.out_dim == 0)
      throw config_error("layer " + std::to_string(i) + ": dimensions must be positive");
    if (i > 0 && specs[i - 1].out_dim != s.in_dim)
      throw config_error("layer " + std::to_string(i) + ": input width " +
                         std::to_string(s.in_dim) + " does not match previous output " +
                         std::to_string(specs[i - 1].out_dim));
    if (s.kind == LayerKind::lowrank &&
        (s.initial_rank < 1 || s.initial_rank > std::min(s.in_dim, s.out_dim)))
      throw config_error("layer " + std::to_string(i) + ": initial rank " +
                         std::to_string(s.initial_rank) + " outside [1, min(in, out)]");
  }
}

/// Hidden layers factored with ReLU, output layer dense with identity.
inline std::vector<LayerSpec> mlp_specs(std::span<const std::size_t> widths, std::size_t rank,
                                        bool factored) {
  if (widths.size() < 2) throw config_error("architecture needs at least two widths");
  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    LayerSpec s;
    s.in_dim = widths[i];
    s.out_dim = widths[i + 1];
    s.activation = last ? Activation::identity : Activation::relu;
    s.kind = factored && !last ? LayerKind::lowrank : LayerKind::dense;
    if (s.kind == LayerKind::lowrank) s.initial_rank = std::min({rank, s.in_dim, s.out_dim});
    specs.push_back(s);
  }
  return specs;
}

enum class InitScheme { aligned, random };

namespace detail {

/// Orthonormal basis of the dominant r-dimensional right subspace of x
/// (uncentered principal directions), by seeded subspace iteration.
inline Matrix principal_directions(const Matrix& x, std::size_t r, std::mt19937_64& rng,
                                   int iterations = 6) {
  Matrix q = householder_qr(Matrix::gaussian(x.cols(), r, rng)).q;
  for (int it = 0; it < iterations; ++it) q = householder_qr(matmul_tn(x, matmul(x, q))).q;
  return q;
}

}  // namespace detail

/// Seeded initialization. Dense layers: N(0, g/in) entries with g = 2 for
/// ReLU and 1 otherwise. Factored layers: S = σ·I with σ = √(g·out/(4r)) and
/// random orthonormal U. Under InitScheme::random V is random orthonormal too.
/// Under InitScheme::aligned V points where the layer's input actually lives:
/// the first layer takes the top principal directions of `input_sample`
/// (when given) and a layer fed by a factored layer reuses that layer's U,
/// padded with random directions if the ranks differ. Random bases catch
/// only about r/in of the input energy, which slows training considerably.
/// Biases start at zero.
inline Network init_network(std::span<const LayerSpec> specs, std::uint64_t seed,
                            InitScheme scheme = InitScheme::aligned,
                            const Matrix* input_sample = nullptr) {
  validate(specs);
  if (input_sample && input_sample->cols() != specs.front().in_dim)
    throw dimension_error("init_network: sample width " + std::to_string(input_sample->cols()) +
                          " != input width " + std::to_string(specs.front().in_dim));
  Network net;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    Layer layer;
    layer.kind = s.kind;
    layer.activation = s.activation;
    layer.bias.assign(s.out_dim, 0.0);
    const double gain = s.activation == Activation::relu ? 2.0 : 1.0;
    if (s.kind == LayerKind::dense) {
      layer.weight = Matrix::gaussian(s.out_dim, s.in_dim, rng,
                                      std::sqrt(gain / static_cast<double>(s.in_dim)));
      net.layers.push_back(std::move(layer));
      continue;
    }
    const std::size_t r = s.initial_rank;
    const double sigma =
        std::sqrt(gain * static_cast<double>(s.out_dim) / (4.0 * static_cast<double>(r)));
    layer.factors = init_lowrank(s.out_dim, s.in_dim, r, rng(), sigma);
    if (scheme == InitScheme::aligned) {
      if (i == 0 && input_sample && input_sample->rows() >= r) {
        layer.factors.v = detail::principal_directions(*input_sample, r, rng);
      } else if (i > 0 && net.layers.back().kind == LayerKind::lowrank) {
        const Matrix& prev_u = net.layers.back().factors.u;
        layer.factors.v =
            prev_u.cols() >= r
                ? columns(prev_u, 0, r)
                : householder_qr(hcat(prev_u, Matrix::gaussian(s.in_dim, r - prev_u.cols(), rng))).q;
      }
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

struct ForwardCache {
  std::uint64_t version = 0;
  std::vector<Matrix> inputs;           // per layer, b×in
  std::vector<Matrix> preactivations;   // per layer, b×out
  std::vector<FactoredPoint> points;    // weights used for the factored layers
};

/// Logits for a batch (b×in). `points`, when given, replace the factored
/// layers' weights (one per factored layer, in order).
inline Matrix forward(const Network& net, const Matrix& x, ForwardCache* cache = nullptr,
                      std::span<const FactoredPoint> points = {}) {
  if (net.layers.empty()) throw config_error("forward: empty network");
  if (x.cols() != net.in_dim())
    throw dimension_error("forward: input width " + std::to_string(x.cols()) + " != " +
                          std::to_string(net.in_dim()));
  std::vector<FactoredPoint> own;
  if (points.empty() && net.lowrank_count() > 0) {
    own = net.current_points();
    points = own;
  }
  if (points.size() != net.lowrank_count())
    throw dimension_error("forward: " + std::to_string(points.size()) + " points for " +
                          std::to_string(net.lowrank_count()) + " factored layers");
  if (cache) {
    cache->version = net.version;
    cache->inputs.clear();
    cache->preactivations.clear();
    cache->points.assign(points.begin(), points.end());
  }

  Matrix a = x;
  std::size_t p = 0;
  for (const auto& layer : net.layers) {
    Matrix z = layer.kind == LayerKind::dense
                   ? matmul_nt(a, layer.weight)
                   : matmul_nt(matmul(a, points[p].right), points[p].left);
    if (layer.kind == LayerKind::lowrank) ++p;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto row = z.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
    }
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->preactivations.push_back(z);
    }
    if (layer.activation == Activation::relu)
      for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
    a = std::move(z);
  }
  if (!a.all_finite()) throw numeric_error("forward: non-finite activations");
  return a;
}

struct LossAndGrad {
  double loss = 0;
  Matrix dlogits;  // (softmax − onehot) / b
};

/// Mean softmax cross-entropy over the batch, max-shifted for stability.
inline LossAndGrad softmax_cross_entropy(const Matrix& logits, std::span<const std::uint8_t> labels) {
  const std::size_t b = logits.rows();
  const std::size_t c = logits.cols();
  if (labels.size() != b) throw dimension_error("softmax_cross_entropy: label count mismatch");
  LossAndGrad out{0.0, Matrix(b, c)};
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                              " >= " + std::to_string(c));
    auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double log_sum = std::log(sum);
    out.loss += (log_sum - (z[labels[i]] - zmax)) * inv_b;
    auto d = out.dlogits.row(i);
    for (std::size_t j = 0; j < c; ++j) d[j] = std::exp(z[j] - zmax - log_sum) * inv_b;
    d[labels[i]] -= inv_b;
  }
  return out;
}

struct BatchGrad {
  std::vector<Gradient> weights;             // one per layer (dense layers hold G densely)
  std::vector<std::vector<double>> biases;   // one per layer
};

/// Exact gradients of the batch loss for the weights used in `cache`.
/// Factored layers get G = δᵀ·a in outer-product form, never materialized.
inline BatchGrad backward(const Network& net, const ForwardCache& cache, const Matrix& dlogits) {
  if (cache.version != net.version || cache.inputs.size() != net.layers.size())
    throw stale_cache_error("backward: cache does not belong to the current network");
  const std::size_t nl = net.layers.size();
  BatchGrad out;
  out.weights.reserve(nl);
  out.biases.resize(nl);
  std::vector<std::optional<Gradient>> w(nl);

  Matrix delta = dlogits;
  std::size_t p = cache.points.size();
  for (std::size_t l = nl; l-- > 0;) {
    const Layer& layer = net.layers[l];
    const Matrix& z = cache.preactivations[l];
    if (delta.rows() != z.rows() || delta.cols() != z.cols())
      throw dimension_error("backward: upstream gradient " + detail::shape(delta) + " vs " +
                            detail::shape(z));
    if (layer.activation == Activation::relu) {
      auto d = delta.data();
      auto zz = z.data();
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(zz[i] > 0.0)) d[i] = 0.0;
    }
    auto& gb = out.biases[l];
    gb.assign(delta.cols(), 0.0);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      auto r = delta.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
    }

    const Matrix& a = cache.inputs[l];
    Matrix next;
    if (layer.kind == LayerKind::dense) {
      if (l > 0) next = matmul(delta, layer.weight);
      w[l] = Gradient::dense(matmul_tn(delta, a));
    } else {
      const FactoredPoint& pt = cache.points[--p];
      if (l > 0) next = matmul_nt(matmul(delta, pt.left), pt.right);
      w[l] = Gradient::outer(delta, a);
    }
    delta = std::move(next);
  }
  for (auto& g : w) out.weights.push_back(std::move(*g));
  return out;
}

/// Gradient oracle over one frozen batch. Dense layers and biases stay at
/// their current values; the factored layers take the requested points.
/// The first evaluation (made by every integrator at the unmodified point)
/// is kept for the dense/bias update and the reported loss.
class NetworkOracle {
 public:
  NetworkOracle(const Network& net, const Matrix& x, std::span<const std::uint8_t> labels)
      : net_(net), x_(x), labels_(labels) {}

  std::vector<Gradient> evaluate(std::span<const FactoredPoint> points) {
    ForwardCache cache;
    Matrix logits = forward(net_, x_, &cache, points);
    LossAndGrad lg = softmax_cross_entropy(logits, labels_);
    BatchGrad g = backward(net_, cache, lg.dlogits);
    std::vector<Gradient> out;
    for (std::size_t l = 0; l < net_.layers.size(); ++l)
      if (net_.layers[l].kind == LayerKind::lowrank) out.push_back(g.weights[l]);
    if (!first_) first_ = First{lg.loss, std::move(g)};
    ++calls_;
    return out;
  }

  /// Loss and full gradient set from the first evaluation.
  double initial_loss() const { return first_.value().loss; }
  const BatchGrad& initial_grad() const { return first_.value().grad; }
  bool evaluated() const noexcept { return first_.has_value(); }
  std::size_t calls() const noexcept { return calls_; }

 private:
  struct First {
    double loss;
    BatchGrad grad;
  };
  const Network& net_;
  const Matrix& x_;
  std::span<const std::uint8_t> labels_;
  std::optional<First> first_;
  std::size_t calls_ = 0;
};

/// One optimization step on a batch. Factored layers advance with the chosen
/// integrator; dense weights and all biases take a plain SGD step with the
/// gradient at the pre-step point. Returns the pre-step batch loss.
inline double train_step(Network& net, const Matrix& x, std::span<const std::uint8_t> labels,
                         Integrator integrator, const StepConfig& cfg) {
  validate(cfg);
  const std::size_t nlr = net.lowrank_count();
  if (integrator == Integrator::full && nlr > 0)
    throw config_error("train_step: integrator 'full' needs an all-dense network");

  NetworkOracle oracle(net, x, labels);
  std::vector<LowRankState> next;
  if (nlr > 0) {
    const std::vector<LowRankState> states = net.lowrank_states();
    next = lowrank_step(integrator, std::span<const LowRankState>(states), oracle, cfg);
  } else {
    oracle.evaluate({});
  }
  const BatchGrad& g = oracle.initial_grad();
  const double loss = oracle.initial_loss();

  std::size_t p = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Layer& layer = net.layers[l];
    if (layer.kind == LayerKind::dense)
      axpy(-cfg.h, g.weights[l].to_dense(), layer.weight);
    else
      layer.factors = std::move(next[p++]);
    for (std::size_t j = 0; j < layer.bias.size(); ++j) layer.bias[j] -= cfg.h * g.biases[l][j];
  }
  ++net.version;
  return loss;
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double accuracy_from_logits(const Matrix& logits, std::span<const std::uint8_t> labels) {
  if (labels.size() != logits.rows()) throw dimension_error("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    hits += best == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Gathers rows `idx` of x.
inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
  return out;
}

struct EvalResult {
  double accuracy = 0;
  double loss = 0;  // mean cross-entropy
};

/// Accuracy and mean loss over a whole dataset, in chunks.
inline EvalResult evaluate(const Network& net, const Matrix& images,
                           std::span<const std::uint8_t> labels, std::size_t chunk = 1000) {
  if (labels.size() != images.rows()) throw dimension_error("evaluate: label count mismatch");
  EvalResult res;
  if (labels.empty()) return res;
  std::size_t hits = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.rows(); start += chunk) {
    const std::size_t end = std::min(images.rows(), start + chunk);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    Matrix logits = forward(net, gather_rows(images, idx));
    auto lab = labels.subspan(start, end - start);
    hits += static_cast<std::size_t>(
        std::llround(accuracy_from_logits(logits, lab) * static_cast<double>(lab.size())));
    loss_sum += softmax_cross_entropy(logits, lab).loss * static_cast<double>(lab.size());
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
  res.loss = loss_sum / static_cast<double>(labels.size());
  return res;
}

/// (in, out, rank) per layer; dense layers report rank 0.
inline std::vector<LayerShape> layer_shapes(const Network& net) {
  std::vector<LayerShape> out;
  for (const auto& l : net.layers) out.push_back({l.in_dim(), l.out_dim(), l.rank()});
  return out;
}

/// Stored parameter count: (m+n)·r + r² per factored layer, m·n per dense
/// layer, plus all biases.
inline std::size_t network_param_count(const Network& net) {
  std::size_t total = 0;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::dense) {
      total += l.in_dim() * l.out_dim();
    } else {
      const LayerShape s{l.in_dim(), l.out_dim(), l.rank()};
      total += param_count(std::span<const LayerShape>(&s, 1));
    }
    total += l.bias.size();
  }
  return total;
}

/// Compression rate of the weight matrices; a dense layer counts as
/// uncompressed (its full i·o entries in the numerator).
inline double network_compression_rate(const Network& net) {
  double stored = 0.0, dense = 0.0;
  for (const auto& l : net.layers) {
    const double io = static_cast<double>(l.in_dim()) * static_cast<double>(l.out_dim());
    dense += io;
    stored += l.kind == LayerKind::dense
                  ? io
                  : static_cast<double>(l.in_dim() + l.out_dim()) * static_cast<double>(l.rank());
  }
  return (1.0 - stored / dense) * 100.0;
}

/// Largest ‖S‖_F over factored layers (∞ if any entry is non-finite).
inline double max_core_norm(const Network& net) {
  double m = 0.0;
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::lowrank) continue;
    if (!l.factors.s.all_finite()) return std::numeric_limits<double>::infinity();
    m = std::max(m, frobenius_norm(l.factors.s));
  }
  return m;
}

}  // namespace dlrt
