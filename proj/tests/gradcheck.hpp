#pragma once

// Finite-difference checks for every layer type and the whole network.
// Analytic gradients come from the precision under test (T); objectives are
// evaluated on double-precision replicas holding exactly the same values.

#include <map>
#include <string>

#include "support.hpp"

namespace ctsev::testkit {

using GradReports = std::map<std::string, GradCheckReport>;

template <typename T>
nn::Conv3d<double> to_double(const nn::Conv3d<T>& c) {
  return {c.weights.template cast<double>(), c.bias.template cast<double>(), c.stride, c.padding};
}

template <typename T>
nn::Dense<double> to_double(const nn::Dense<T>& d) {
  return {d.weights.template cast<double>(), d.bias.template cast<double>()};
}

template <typename T>
nn::ResidualBlock<double> to_double(const nn::ResidualBlock<T>& b) {
  nn::ResidualBlock<double> out{to_double(b.conv1), to_double(b.conv2), std::nullopt};
  if (b.projection) out.projection = to_double(*b.projection);
  return out;
}

template <typename T>
nn::Network<double> to_double(const nn::Network<T>& net) {
  auto out = nn::build_network<double>(net.preset, 0, net.geometry);
  auto dst = out.parameters();
  const auto src = net.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<double>();
  return out;
}

template <typename T>
GradCheckReport check_conv(std::size_t samples, std::uint64_t seed) {
  const FdPolicy pol = fd_policy<T>();
  Rng rng(seed);
  GradCheckReport total;
  const std::array<nn::Triple, 3> kernels{nn::Triple{3, 3, 3}, nn::Triple{1, 1, 1}, nn::Triple{3, 1, 3}};
  const std::size_t per_tensor = samples / 3 / kernels.size() + 1;
  for (std::size_t k = 0; k < kernels.size(); ++k) {
    const std::size_t s = 1 + k % 2;
    auto layer = nn::Conv3d<T>::make(2, 3, kernels[k], {s, s, s}, {1, k == 1 ? 0u : 1u, 1});
    randomize(layer, rng);
    const Tensor<T> x = random_tensor<T>({2, 2, 4, 5, 4}, rng);
    const Tensor<T> y0 = nn::conv3d_forward(layer, x);
    const auto w = projection_weights(y0.size(), rng);
    const auto g = nn::conv3d_backward(layer, x, as_tensor<T>(w, y0.shape()));

    auto layer_d = to_double(layer);
    auto x_d = x.template cast<double>();
    auto objective = [&] { return Probe{project(nn::conv3d_forward(layer_d, x_d), w), 0}; };
    merge(total, check_gradient(x_d, g.input, objective, per_tensor, pol, rng, "conv.input"));
    merge(total, check_gradient(layer_d.weights, g.weights, objective, per_tensor, pol, rng, "conv.weights"));
    merge(total, check_gradient(layer_d.bias, g.bias, objective, per_tensor, pol, rng, "conv.bias"));
  }
  return total;
}

template <typename T>
GradCheckReport check_relu(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor<T> x = random_tensor<T>({4, 64}, rng);
  const auto w = projection_weights(x.size(), rng);
  const auto g = nn::relu_backward(x, as_tensor<T>(w, x.shape()));
  auto x_d = x.template cast<double>();
  auto objective = [&] { return Probe{project(nn::relu_forward(x_d), w), sign_fingerprint(x_d)}; };
  return check_gradient(x_d, g, objective, samples, fd_policy<T>(), rng, "relu");
}

template <typename T>
GradCheckReport check_dropout(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor<T> x = random_tensor<T>({4, 64}, rng);
  const nn::DropoutKey key{seed, 1, 7};
  const auto fwd = nn::dropout_forward(x, 0.5, key, nn::Mode::train);
  const auto w = projection_weights(x.size(), rng);
  const auto g = nn::dropout_backward(fwd.mask, as_tensor<T>(w, x.shape()));
  auto x_d = x.template cast<double>();
  auto objective = [&] {
    return Probe{project(nn::dropout_forward(x_d, 0.5, key, nn::Mode::train).output, w), 0};
  };
  return check_gradient(x_d, g, objective, samples, fd_policy<T>(), rng, "dropout");
}

template <typename T>
GradCheckReport check_pool(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor<T> x = random_tensor<T>({2, 3, 3, 4, 2}, rng);
  const auto w = projection_weights(6, rng);
  const auto g = nn::global_avg_pool3d_backward(x.shape(), as_tensor<T>(w, {2, 3}));
  auto x_d = x.template cast<double>();
  auto objective = [&] { return Probe{project(nn::global_avg_pool3d(x_d), w), 0}; };
  return check_gradient(x_d, g, objective, samples, fd_policy<T>(), rng, "pool");
}

template <typename T>
GradCheckReport check_dense(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  auto layer = nn::Dense<T>::make(16, 3);
  layer.weights = random_tensor<T>(layer.weights.shape(), rng);
  layer.bias = random_tensor<T>(layer.bias.shape(), rng);
  const Tensor<T> x = random_tensor<T>({4, 16}, rng);
  const auto w = projection_weights(12, rng);
  const auto g = nn::dense_backward(layer, x, as_tensor<T>(w, {4, 3}));
  auto layer_d = to_double(layer);
  auto x_d = x.template cast<double>();
  auto objective = [&] { return Probe{project(nn::dense_forward(layer_d, x_d), w), 0}; };
  GradCheckReport r;
  const std::size_t per = samples / 3 + 1;
  merge(r, check_gradient(x_d, g.input, objective, per, fd_policy<T>(), rng, "dense.input"));
  merge(r, check_gradient(layer_d.weights, g.weights, objective, per, fd_policy<T>(), rng, "dense.weights"));
  merge(r, check_gradient(layer_d.bias, g.bias, objective, per, fd_policy<T>(), rng, "dense.bias"));
  return r;
}

template <typename T>
GradCheckReport check_softmax_ce(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor<T> logits = random_tensor<T>({8, 3}, rng, -3.0, 3.0);
  std::vector<std::int64_t> labels(8);
  for (auto& l : labels) l = static_cast<std::int64_t>(rng.below(3));
  const auto g = nn::softmax_cross_entropy(logits, labels).grad_logits;
  auto logits_d = logits.template cast<double>();
  auto objective = [&] { return Probe{nn::softmax_cross_entropy(logits_d, labels).loss, 0}; };
  return check_gradient(logits_d, g, objective, samples, fd_policy<T>(), rng, "softmax_ce");
}

template <typename T>
GradCheckReport check_residual_block(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  GradCheckReport total;
  struct Case {
    std::size_t c_in, c_out, stride;
  };
  const std::array<Case, 2> cases{Case{3, 3, 1}, Case{2, 4, 2}};
  const std::size_t per = samples / 8 + 1;
  for (const auto& c : cases) {
    auto block = nn::ResidualBlock<T>::make(c.c_in, c.c_out, c.stride, nn::Geometry{});
    randomize(block.conv1, rng);
    randomize(block.conv2, rng);
    if (block.projection) randomize(*block.projection, rng);
    const Tensor<T> x = random_tensor<T>({1, c.c_in, 4, 4, 4}, rng);
    nn::BlockCache<T> cache;
    const Tensor<T> y0 = nn::residual_block_forward(block, x, &cache);
    const auto w = projection_weights(y0.size(), rng);
    const auto g = nn::residual_block_backward(block, cache, as_tensor<T>(w, y0.shape()));

    auto block_d = to_double(block);
    auto x_d = x.template cast<double>();
    auto objective = [&] {
      nn::BlockCache<double> c2;
      const double v = project(nn::residual_block_forward(block_d, x_d, &c2), w);
      return Probe{v, sign_fingerprint(c2.pre, sign_fingerprint(c2.h1))};
    };
    const auto pol = fd_policy<T>();
    merge(total, check_gradient(x_d, g.input, objective, per, pol, rng, "block.input"));
    merge(total, check_gradient(block_d.conv1.weights, g.conv1.weights, objective, per, pol, rng, "block.conv1.w"));
    merge(total, check_gradient(block_d.conv1.bias, g.conv1.bias, objective, per, pol, rng, "block.conv1.b"));
    merge(total, check_gradient(block_d.conv2.weights, g.conv2.weights, objective, per, pol, rng, "block.conv2.w"));
    if (block.projection) {
      merge(total, check_gradient(block_d.projection->weights, g.projection->weights, objective, per, pol, rng,
                                  "block.projection.w"));
    }
  }
  return total;
}

/// Spot check of random parameters of a nano network on [3,1,8,8,8]; the
/// objective is the training loss under a fixed dropout key.
template <typename T>
GradCheckReport check_network(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  auto net = nn::build_network<T>(nn::NetworkPreset::named(nn::PresetName::nano), seed);
  // An O(1) head keeps trunk gradients well above the relative-error floor.
  net.head.weights = random_tensor<T>(net.head.weights.shape(), rng);
  net.head.bias = random_tensor<T>(net.head.bias.shape(), rng);
  const Tensor<T> x = random_tensor<T>({3, 1, 8, 8, 8}, rng, 0.0, 1.0);
  const std::vector<std::int64_t> labels{0, 1, 2};
  const nn::DropoutKey key{seed, 0, 3};
  const auto fwd = nn::network_forward(net, x, nn::Mode::train, key);
  const auto loss = nn::softmax_cross_entropy(fwd.logits, labels);
  const auto grads = nn::network_backward(net, fwd.cache, loss.grad_logits);

  auto net_d = to_double(net);
  const auto x_d = x.template cast<double>();
  auto objective = [&] {
    const auto f = nn::network_forward(net_d, x_d, nn::Mode::train, key);
    std::uint64_t h = sign_fingerprint(f.cache.stem_pre);
    for (const auto& b : f.cache.blocks) h = sign_fingerprint(b.pre, sign_fingerprint(b.h1, h));
    h = sign_fingerprint(f.cache.pooled, h);
    return Probe{nn::softmax_cross_entropy(f.logits, labels).loss, h};
  };
  // Samples are spread over tensors in proportion to sqrt(size) so that
  // biases and the head are visited too.
  auto params = net_d.parameters();
  std::vector<double> weight(params.size());
  double wsum = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) wsum += weight[i] = std::sqrt(double(params[i]->size()));
  GradCheckReport r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<std::size_t>(std::ceil(double(samples) * weight[i] / wsum));
    merge(r, check_gradient(*params[i], grads[i], objective, n, fd_policy<T>(), rng, "param" + std::to_string(i)));
  }
  return r;
}

template <typename T>
GradReports check_all_layers(std::size_t samples, std::uint64_t seed) {
  GradReports out;
  out["conv3d"] = check_conv<T>(samples, seed + 1);
  out["relu"] = check_relu<T>(samples, seed + 2);
  out["dropout"] = check_dropout<T>(samples, seed + 3);
  out["global_avg_pool3d"] = check_pool<T>(samples, seed + 4);
  out["dense"] = check_dense<T>(samples, seed + 5);
  out["softmax_cross_entropy"] = check_softmax_ce<T>(samples, seed + 6);
  out["residual_block"] = check_residual_block<T>(samples, seed + 7);
  out["network_nano"] = check_network<T>(samples, seed + 8);
  return out;
}

}  // namespace ctsev::testkit
