#pragma once

// Pointwise and head layers, each with an explicit backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ctsev/error.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/tensor.hpp"

namespace ctsev::nn {

enum class Mode { train, infer };

// --- ReLU ------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return y;
}

/// Gradient passes where the forward input was strictly positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (x.shape() != grad_out.shape()) {
    throw CacheError("relu backward: cached input " + shape_string(x.shape()) +
                     " vs grad " + shape_string(grad_out.shape()));
  }
  Tensor<T> g = grad_out;
  auto xs = x.data();
  auto gs = g.data();
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (!(xs[i] > T{0})) gs[i] = T{0};
  }
  return g;
}

// --- Dropout ---------------------------------------------------------------

/// Counter-based dropout randomness: the keep decision for element i is
/// hash(seed, layer_id, step, i), independent of evaluation order.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t layer_id = 0;
  std::uint64_t step = 0;
};

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // 0 or 1/(1-rate) per element
};

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate " + std::to_string(rate) + " outside [0,1)");
  }
}

/// Inverted dropout; identity (mask of ones) in infer mode.
template <typename T>
DropoutResult<T> dropout_forward(const Tensor<T>& x, double rate, const DropoutKey& key, Mode mode) {
  check_dropout_rate(rate);
  if (mode == Mode::infer || rate == 0.0) return {x, Tensor<T>(x.shape(), T{1})};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = bits_to_unit(hash_words({key.seed, key.layer_id, key.step, i}));
    mask[i] = u >= rate ? keep_scale : T{0};
    y[i] = x[i] * mask[i];
  }
  return {std::move(y), std::move(mask)};
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_out) {
  if (mask.shape() != grad_out.shape()) {
    throw CacheError("dropout backward: mask " + shape_string(mask.shape()) + " vs grad " +
                     shape_string(grad_out.shape()));
  }
  return mul(grad_out, mask);
}

// --- Global average pooling --------------------------------------------------

/// [B, C, D, H, W] -> [B, C]
template <typename T>
Tensor<T> global_avg_pool3d(const Tensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("global_avg_pool3d expects [B,C,D,H,W], got " + shape_string(x.shape()));
  const std::size_t B = x.extent(0), C = x.extent(1);
  const std::size_t n = x.extent(2) * x.extent(3) * x.extent(4);
  Tensor<T> y({B, C});
  const T* src = x.data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T acc{};
    for (std::size_t i = 0; i < n; ++i) acc += src[bc * n + i];
    y[bc] = acc / static_cast<T>(n);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool3d_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  if (input_shape.size() != 5 || grad_out.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw CacheError("pool backward: grad " + shape_string(grad_out.shape()) +
                     " does not match input " + shape_string(input_shape));
  }
  const std::size_t n = input_shape[2] * input_shape[3] * input_shape[4];
  Tensor<T> g(input_shape);
  T* dst = g.data().data();
  for (std::size_t bc = 0; bc < grad_out.size(); ++bc) {
    const T v = grad_out[bc] / static_cast<T>(n);
    std::fill(dst + bc * n, dst + (bc + 1) * n, v);
  }
  return g;
}

// --- Dense -----------------------------------------------------------------

template <typename T>
struct Dense {
  Tensor<T> weights;  // [n_out, n_in]
  Tensor<T> bias;     // [n_out]

  static Dense make(std::size_t n_in, std::size_t n_out) {
    return Dense{Tensor<T>({n_out, n_in}), Tensor<T>({n_out})};
  }
  std::size_t n_in() const { return weights.extent(1); }
  std::size_t n_out() const { return weights.extent(0); }
};

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// [B, n_in] -> [B, n_out]
template <typename T>
Tensor<T> dense_forward(const Dense<T>& layer, const Tensor<T>& x) {
  if (x.rank() != 2 || x.extent(1) != layer.n_in()) {
    throw ShapeError("dense expects [B," + std::to_string(layer.n_in()) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t B = x.extent(0), I = layer.n_in(), O = layer.n_out();
  Tensor<T> y({B, O});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      T acc = layer.bias[o];
      for (std::size_t i = 0; i < I; ++i) acc += layer.weights[o * I + i] * x[b * I + i];
      y[b * O + o] = acc;
    }
  }
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Dense<T>& layer, const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (x.rank() != 2 || x.extent(1) != layer.n_in() ||
      grad_out.shape() != Shape{x.extent(0), layer.n_out()}) {
    throw CacheError("dense backward: cached input " + shape_string(x.shape()) + " and grad " +
                     shape_string(grad_out.shape()) + " do not fit the layer");
  }
  const std::size_t B = x.extent(0), I = layer.n_in(), O = layer.n_out();
  DenseGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(layer.weights),
                  Tensor<T>::zeros_like(layer.bias)};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      const T go = grad_out[b * O + o];
      g.bias[o] += go;
      for (std::size_t i = 0; i < I; ++i) {
        g.weights[o * I + i] += go * x[b * I + i];
        g.input[b * I + i] += go * layer.weights[o * I + i];
      }
    }
  }
  return g;
}

// --- Softmax cross-entropy ---------------------------------------------------

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [B,K], got " + shape_string(logits.shape()));
  const std::size_t B = logits.extent(0), K = logits.extent(1);
  Tensor<T> p(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * K;
    const T mx = *std::max_element(row, row + K);
    T z{};
    for (std::size_t k = 0; k < K; ++k) {
      p[b * K + k] = std::exp(row[k] - mx);
      z += p[b * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) p[b * K + k] /= z;
  }
  return p;
}

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad_logits;
};

/// Mean over the batch of -log softmax(logits)[label]; the gradient is
/// (softmax - onehot) / B.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_string(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.extent(0), K = logits.extent(1);
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw LabelError("label " + std::to_string(l) + " outside [0," + std::to_string(K) + ")");
    }
  }
  Tensor<T> grad(logits.shape());
  T total{};
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * K;
    const T mx = *std::max_element(row, row + K);
    T z{};
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const T log_z = std::log(z);
    const auto label = static_cast<std::size_t>(labels[b]);
    total += log_z - (row[label] - mx);
    for (std::size_t k = 0; k < K; ++k) {
      const T p = std::exp(row[k] - mx - log_z);
      grad[b * K + k] = (p - (k == label ? T{1} : T{0})) / static_cast<T>(B);
    }
  }
  return {total / static_cast<T>(B), std::move(grad)};
}

}  // namespace ctsev::nn
