#pragma once

// Residual blocks, network presets, whole-network forward/backward.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctsev/error.hpp"
#include "ctsev/nn/conv3d.hpp"
#include "ctsev/nn/layers.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/tensor.hpp"

namespace ctsev::nn {

inline constexpr std::size_t kNumLogits = 3;
inline constexpr std::uint64_t kHeadDropoutLayerId = 1;
/// Classifier weights start at N(0, 0.01^2) so the untrained softmax is near
/// uniform; without normalization layers the trunk's features are O(1).
inline constexpr double kHeadInitStd = 0.01;

// --- Presets ---------------------------------------------------------------

enum class PresetName { nano, s50, s100, s152 };

inline std::string to_string(PresetName p) {
  switch (p) {
    case PresetName::nano: return "nano";
    case PresetName::s50: return "s50";
    case PresetName::s100: return "s100";
    case PresetName::s152: return "s152";
  }
  return "?";
}

inline PresetName preset_from_string(const std::string& s) {
  if (s == "nano") return PresetName::nano;
  if (s == "s50") return PresetName::s50;
  if (s == "s100") return PresetName::s100;
  if (s == "s152") return PresetName::s152;
  throw ConfigError("unknown network preset '" + s + "' (expected nano|s50|s100|s152)");
}

struct NetworkPreset {
  PresetName name = PresetName::nano;
  std::array<std::size_t, 4> blocks_per_stage{1, 1, 1, 1};
  std::size_t base_channels = 8;
  double dropout_rate = 0.5;

  /// Block layouts: s50 -> 16, s100 -> 33, s152 -> 50 basic blocks.
  static NetworkPreset named(PresetName name) {
    switch (name) {
      case PresetName::nano: return {name, {1, 1, 1, 1}, 8, 0.5};
      case PresetName::s50: return {name, {2, 4, 6, 4}, 16, 0.5};
      case PresetName::s100: return {name, {3, 8, 14, 8}, 16, 0.5};
      case PresetName::s152: return {name, {6, 12, 20, 12}, 16, 0.5};
    }
    throw ConfigError("unknown preset");
  }

  std::size_t total_blocks() const {
    return blocks_per_stage[0] + blocks_per_stage[1] + blocks_per_stage[2] + blocks_per_stage[3];
  }

  void validate() const {
    for (auto b : blocks_per_stage) {
      if (b == 0) throw ConfigError("blocks_per_stage entries must be positive");
    }
    if (base_channels == 0) throw ConfigError("base_channels must be positive");
    check_dropout_rate(dropout_rate);
  }
};

/// Kernel geometry: volumetric (3x3x3, stride 2 on every axis) or planar
/// (1x3x3, depth untouched) for the slice baseline.
struct Geometry {
  bool planar = false;

  Triple kernel() const { return planar ? Triple{1, 3, 3} : Triple{3, 3, 3}; }
  Triple padding() const { return planar ? Triple{0, 1, 1} : Triple{1, 1, 1}; }
  Triple stride(std::size_t s) const { return planar ? Triple{1, s, s} : Triple{s, s, s}; }
};

// --- Residual block ----------------------------------------------------------

template <typename T>
struct ResidualBlock {
  Conv3d<T> conv1;
  Conv3d<T> conv2;
  std::optional<Conv3d<T>> projection;  // 1x1x1, when channels or stride change

  static ResidualBlock make(std::size_t c_in, std::size_t c_out, std::size_t stride, Geometry g) {
    ResidualBlock b{Conv3d<T>::make(c_in, c_out, g.kernel(), g.stride(stride), g.padding()),
                    Conv3d<T>::make(c_out, c_out, g.kernel(), g.stride(1), g.padding()),
                    std::nullopt};
    if (c_in != c_out || stride != 1) {
      b.projection = Conv3d<T>::make(c_in, c_out, {1, 1, 1}, g.stride(stride), {0, 0, 0});
    }
    return b;
  }
};

template <typename T>
struct BlockCache {
  Tensor<T> x;    // block input
  Tensor<T> h1;   // conv1(x)
  Tensor<T> a1;   // relu(h1)
  Tensor<T> pre;  // conv2(a1) + skip(x)
};

template <typename T>
struct BlockGrads {
  Tensor<T> input;
  Conv3dGrads<T> conv1;
  Conv3dGrads<T> conv2;
  std::optional<Conv3dGrads<T>> projection;
};

/// y = relu(conv2(relu(conv1(x))) + skip(x))
template <typename T>
Tensor<T> residual_block_forward(const ResidualBlock<T>& block, const Tensor<T>& x,
                                 BlockCache<T>* cache = nullptr) {
  Tensor<T> h1 = conv3d_forward(block.conv1, x);
  Tensor<T> a1 = relu_forward(h1);
  Tensor<T> pre = conv3d_forward(block.conv2, a1);
  if (block.projection) {
    const Tensor<T> skip = conv3d_forward(*block.projection, x);
    if (skip.shape() != pre.shape()) {
      throw ConfigError("residual block paths disagree: " + shape_string(pre.shape()) + " vs " +
                        shape_string(skip.shape()));
    }
    add_inplace(pre, skip);
  } else {
    if (x.shape() != pre.shape()) {
      throw ConfigError("identity skip needs matching shapes: " + shape_string(x.shape()) +
                        " vs " + shape_string(pre.shape()));
    }
    add_inplace(pre, x);
  }
  Tensor<T> y = relu_forward(pre);
  if (cache) *cache = {x, std::move(h1), std::move(a1), std::move(pre)};
  return y;
}

template <typename T>
BlockGrads<T> residual_block_backward(const ResidualBlock<T>& block, const BlockCache<T>& cache,
                                      const Tensor<T>& grad_out) {
  const Tensor<T> g_pre = relu_backward(cache.pre, grad_out);
  BlockGrads<T> g;
  g.conv2 = conv3d_backward(block.conv2, cache.a1, g_pre);
  const Tensor<T> g_h1 = relu_backward(cache.h1, g.conv2.input);
  g.conv1 = conv3d_backward(block.conv1, cache.x, g_h1);
  g.input = g.conv1.input;
  if (block.projection) {
    g.projection = conv3d_backward(*block.projection, cache.x, g_pre);
    add_inplace(g.input, g.projection->input);
  } else {
    add_inplace(g.input, g_pre);
  }
  return g;
}

// --- Network -----------------------------------------------------------------

/// stem conv (stride 2) + ReLU -> residual stages -> global average pool ->
/// ReLU -> dropout -> dense (3 logits).
template <typename T>
struct Network {
  NetworkPreset preset;
  Geometry geometry;
  Conv3d<T> stem;
  std::vector<ResidualBlock<T>> blocks;
  Dense<T> head;

  std::size_t residual_block_count() const { return blocks.size(); }

  /// Parameter tensors in checkpoint order: stem (w, b), then per block
  /// conv1 (w, b), conv2 (w, b), projection (w, b) if present, then head (w, b).
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> p{&stem.weights, &stem.bias};
    for (auto& b : blocks) {
      p.insert(p.end(), {&b.conv1.weights, &b.conv1.bias, &b.conv2.weights, &b.conv2.bias});
      if (b.projection) p.insert(p.end(), {&b.projection->weights, &b.projection->bias});
    }
    p.insert(p.end(), {&head.weights, &head.bias});
    return p;
  }

  std::vector<const Tensor<T>*> parameters() const {
    auto p = const_cast<Network*>(this)->parameters();
    return {p.begin(), p.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : parameters()) n += t->size();
    return n;
  }
};

template <typename T>
using Gradients = std::vector<Tensor<T>>;

/// Deterministic construction; conv weights ~ N(0, 2 / fan_in), head
/// weights ~ N(0, kHeadInitStd^2), biases zero. The second conv of each
/// residual branch is further scaled by 1/sqrt(blocks): with no
/// normalization layers, 16 plain He blocks grow the pooled features ~100x
/// and the first SGD steps diverge.
template <typename T>
Network<T> build_network(const NetworkPreset& preset, std::uint64_t seed, Geometry geometry = {}) {
  preset.validate();
  Network<T> net{preset, geometry, {}, {}, {}};
  const std::size_t base = preset.base_channels;
  net.stem = Conv3d<T>::make(1, base, geometry.kernel(), geometry.stride(2), geometry.padding());
  std::size_t channels = base;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = base << s;
    for (std::size_t i = 0; i < preset.blocks_per_stage[s]; ++i) {
      net.blocks.push_back(ResidualBlock<T>::make(channels, out, i == 0 ? 2 : 1, geometry));
      channels = out;
    }
  }
  net.head = Dense<T>::make(channels, kNumLogits);

  auto init = [&](Tensor<T>& w, std::size_t fan_in, std::uint64_t index, double scale = 1.0) {
    Rng rng(hash_words({seed, 0x1417u, index}));
    const double std_dev = scale * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(std_dev * rng.normal());
  };
  const double branch_scale = 1.0 / std::sqrt(static_cast<double>(net.blocks.size()));
  std::uint64_t index = 0;
  init(net.stem.weights, net.stem.fan_in(), index++);
  for (auto& b : net.blocks) {
    init(b.conv1.weights, b.conv1.fan_in(), index++);
    init(b.conv2.weights, b.conv2.fan_in(), index++, branch_scale);
    if (b.projection) init(b.projection->weights, b.projection->fan_in(), index++);
  }
  {
    Rng rng(hash_words({seed, 0x1417u, index++}));
    for (auto& v : net.head.weights.data()) v = static_cast<T>(kHeadInitStd * rng.normal());
  }
  return net;
}

template <typename T>
struct ForwardCache {
  Mode mode = Mode::infer;
  Tensor<T> input;
  Tensor<T> stem_pre;
  std::vector<BlockCache<T>> blocks;
  Shape pool_input_shape;
  Tensor<T> pooled;        // head ReLU input
  Tensor<T> dropout_mask;
  Tensor<T> dense_input;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ForwardCache<T> cache;
};

/// batch: [B, 1, D, H, W] -> logits [B, 3]. Infer mode bypasses dropout.
template <typename T>
ForwardResult<T> network_forward(const Network<T>& net, const Tensor<T>& batch, Mode mode,
                                 const DropoutKey& key = {}) {
  if (batch.rank() != 5 || batch.extent(1) != 1) {
    throw ShapeError("network input must be [B,1,D,H,W], got " + shape_string(batch.shape()));
  }
  ForwardCache<T> cache;
  cache.mode = mode;
  cache.input = batch;
  cache.stem_pre = conv3d_forward(net.stem, batch);
  Tensor<T> x = relu_forward(cache.stem_pre);
  cache.blocks.resize(net.blocks.size());
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    x = residual_block_forward(net.blocks[i], x, &cache.blocks[i]);
  }
  cache.pool_input_shape = x.shape();
  cache.pooled = global_avg_pool3d(x);
  const Tensor<T> activated = relu_forward(cache.pooled);
  DropoutKey head_key = key;
  head_key.layer_id = kHeadDropoutLayerId;
  auto dropped = dropout_forward(activated, net.preset.dropout_rate, head_key, mode);
  cache.dropout_mask = std::move(dropped.mask);
  cache.dense_input = std::move(dropped.output);
  Tensor<T> logits = dense_forward(net.head, cache.dense_input);
  return {std::move(logits), std::move(cache)};
}

/// Parameter gradients aligned with Network::parameters().
template <typename T>
Gradients<T> network_backward(const Network<T>& net, const ForwardCache<T>& cache,
                              const Tensor<T>& grad_logits) {
  if (cache.blocks.size() != net.blocks.size()) {
    throw CacheError("forward cache was produced by a different network");
  }
  auto head = dense_backward(net.head, cache.dense_input, grad_logits);
  Tensor<T> g = dropout_backward(cache.dropout_mask, head.input);
  g = relu_backward(cache.pooled, g);
  g = global_avg_pool3d_backward(cache.pool_input_shape, g);

  std::vector<BlockGrads<T>> block_grads(net.blocks.size());
  for (std::size_t i = net.blocks.size(); i-- > 0;) {
    block_grads[i] = residual_block_backward(net.blocks[i], cache.blocks[i], g);
    g = std::move(block_grads[i].input);
  }
  g = relu_backward(cache.stem_pre, g);
  auto stem = conv3d_backward(net.stem, cache.input, g);

  Gradients<T> out;
  out.push_back(std::move(stem.weights));
  out.push_back(std::move(stem.bias));
  for (auto& bg : block_grads) {
    out.push_back(std::move(bg.conv1.weights));
    out.push_back(std::move(bg.conv1.bias));
    out.push_back(std::move(bg.conv2.weights));
    out.push_back(std::move(bg.conv2.bias));
    if (bg.projection) {
      out.push_back(std::move(bg.projection->weights));
      out.push_back(std::move(bg.projection->bias));
    }
  }
  out.push_back(std::move(head.weights));
  out.push_back(std::move(head.bias));
  return out;
}

}  // namespace ctsev::nn
