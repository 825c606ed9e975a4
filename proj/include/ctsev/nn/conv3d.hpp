#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "ctsev/error.hpp"
#include "ctsev/tensor.hpp"

namespace ctsev::nn {

/// Per-axis (depth, height, width) integer triple.
using Triple = std::array<std::size_t, 3>;

inline std::string triple_string(const Triple& t) {
  return "(" + std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]) + ")";
}

/// 3D cross-correlation layer with zero padding.
template <typename T>
struct Conv3d {
  Tensor<T> weights;  // [C_out, C_in, kd, kh, kw]
  Tensor<T> bias;     // [C_out]
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  static Conv3d make(std::size_t c_in, std::size_t c_out, Triple kernel, Triple stride,
                     Triple padding) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (stride[a] == 0) throw ConfigError("conv stride must be positive");
    }
    return Conv3d{Tensor<T>({c_out, c_in, kernel[0], kernel[1], kernel[2]}),
                  Tensor<T>({c_out}), stride, padding};
  }

  std::size_t in_channels() const { return weights.extent(1); }
  std::size_t out_channels() const { return weights.extent(0); }
  Triple kernel() const { return {weights.extent(2), weights.extent(3), weights.extent(4)}; }
  std::size_t fan_in() const { return in_channels() * weights.extent(2) * weights.extent(3) * weights.extent(4); }

  /// Output extents for an input of extents (d, h, w); ShapeError when any
  /// axis would be empty.
  Triple output_extents(const Triple& in) const {
    const Triple k = kernel();
    Triple out{};
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t padded = in[a] + 2 * padding[a];
      if (padded < k[a]) {
        throw ShapeError("conv input extents " + triple_string(in) + " too small for kernel " +
                         triple_string(k) + " with padding " + triple_string(padding));
      }
      out[a] = (padded - k[a]) / stride[a] + 1;
    }
    return out;
  }

  Shape output_shape(const Shape& input) const {
    check_input(input);
    const Triple o = output_extents({input[2], input[3], input[4]});
    return {input[0], out_channels(), o[0], o[1], o[2]};
  }

  void check_input(const Shape& input) const {
    if (input.size() != 5) {
      throw ShapeError("conv input must be [B,C,D,H,W], got " + shape_string(input));
    }
    if (input[1] != in_channels()) {
      throw ShapeError("conv expects " + std::to_string(in_channels()) + " input channels, got " +
                       std::to_string(input[1]));
    }
  }
};

template <typename T>
struct Conv3dGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

namespace detail {

/// Output index range [lo, hi) along one axis whose input coordinate
/// o*s + k - p lands inside [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t out_n,
                                                       std::size_t s, std::size_t k,
                                                       std::size_t p) {
  // o*s + k >= p  and  o*s + k - p <= n - 1
  std::size_t lo = 0;
  if (k < p) lo = (p - k + s - 1) / s;
  if (k >= n + p) return {0, 0};
  const std::size_t max_o = (n - 1 + p - k) / s;  // largest valid o
  std::size_t hi = std::min(out_n, max_o + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace detail

/// out[b,o,z,y,x] = bias[o] + sum_{c,i,j,k} w[o,c,i,j,k] * in_pad[b,c,z*s+i,y*s+j,x*s+k]
template <typename T>
Tensor<T> conv3d_forward(const Conv3d<T>& layer, const Tensor<T>& input) {
  const Shape out_shape = layer.output_shape(input.shape());
  const std::size_t B = input.extent(0), Ci = input.extent(1);
  const std::size_t D = input.extent(2), H = input.extent(3), W = input.extent(4);
  const std::size_t Co = out_shape[1], OD = out_shape[2], OH = out_shape[3], OW = out_shape[4];
  const auto [KD, KH, KW] = layer.kernel();
  const auto [sd, sh, sw] = layer.stride;
  const auto [pd, ph, pw] = layer.padding;

  Tensor<T> out(out_shape);
  const T* in = input.data().data();
  const T* wt = layer.weights.data().data();
  T* dst = out.data().data();
  const std::size_t in_vol = D * H * W, out_vol = OD * OH * OW;

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      T* op = dst + (b * Co + o) * out_vol;
      std::fill(op, op + out_vol, layer.bias[o]);
      for (std::size_t c = 0; c < Ci; ++c) {
        const T* ip = in + (b * Ci + c) * in_vol;
        const T* wp = wt + (o * Ci + c) * KD * KH * KW;
        for (std::size_t kz = 0; kz < KD; ++kz) {
          const auto [z0, z1] = detail::valid_range(D, OD, sd, kz, pd);
          for (std::size_t ky = 0; ky < KH; ++ky) {
            const auto [y0, y1] = detail::valid_range(H, OH, sh, ky, ph);
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const auto [x0, x1] = detail::valid_range(W, OW, sw, kx, pw);
              if (x0 >= x1) continue;
              const T w = wp[(kz * KH + ky) * KW + kx];
              for (std::size_t z = z0; z < z1; ++z) {
                const std::size_t iz = z * sd + kz - pd;
                for (std::size_t y = y0; y < y1; ++y) {
                  const std::size_t iy = y * sh + ky - ph;
                  const T* irow = ip + (iz * H + iy) * W;
                  T* orow = op + (z * OH + y) * OW;
                  if (sw == 1) {
                    const T* src = irow + (x0 + kx - pw);
                    T* dst_row = orow + x0;
                    const std::size_t n = x1 - x0;
                    for (std::size_t x = 0; x < n; ++x) dst_row[x] += w * src[x];
                  } else {
                    for (std::size_t x = x0; x < x1; ++x) orow[x] += w * irow[x * sw + kx - pw];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Exact gradients of conv3d_forward at `input` (the cached forward input).
template <typename T>
Conv3dGrads<T> conv3d_backward(const Conv3d<T>& layer, const Tensor<T>& input,
                               const Tensor<T>& grad_out) {
  Shape expected;
  try {
    expected = layer.output_shape(input.shape());
  } catch (const ShapeError& e) {
    throw CacheError(std::string("cached conv input is inconsistent with the layer: ") + e.what());
  }
  if (grad_out.shape() != expected) {
    throw CacheError("conv backward: grad_out shape " + shape_string(grad_out.shape()) +
                     " does not match the cached forward output " + shape_string(expected));
  }
  const std::size_t B = input.extent(0), Ci = input.extent(1);
  const std::size_t D = input.extent(2), H = input.extent(3), W = input.extent(4);
  const std::size_t Co = expected[1], OD = expected[2], OH = expected[3], OW = expected[4];
  const auto [KD, KH, KW] = layer.kernel();
  const auto [sd, sh, sw] = layer.stride;
  const auto [pd, ph, pw] = layer.padding;

  Conv3dGrads<T> g{Tensor<T>::zeros_like(input), Tensor<T>::zeros_like(layer.weights),
                   Tensor<T>::zeros_like(layer.bias)};
  const T* in = input.data().data();
  const T* go = grad_out.data().data();
  const T* wt = layer.weights.data().data();
  T* gi = g.input.data().data();
  T* gw = g.weights.data().data();
  const std::size_t in_vol = D * H * W, out_vol = OD * OH * OW;

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < Co; ++o) {
      const T* gp = go + (b * Co + o) * out_vol;
      T bsum{};
      for (std::size_t i = 0; i < out_vol; ++i) bsum += gp[i];
      g.bias[o] += bsum;
      for (std::size_t c = 0; c < Ci; ++c) {
        const T* ip = in + (b * Ci + c) * in_vol;
        T* gip = gi + (b * Ci + c) * in_vol;
        const std::size_t wbase = (o * Ci + c) * KD * KH * KW;
        for (std::size_t kz = 0; kz < KD; ++kz) {
          const auto [z0, z1] = detail::valid_range(D, OD, sd, kz, pd);
          for (std::size_t ky = 0; ky < KH; ++ky) {
            const auto [y0, y1] = detail::valid_range(H, OH, sh, ky, ph);
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const auto [x0, x1] = detail::valid_range(W, OW, sw, kx, pw);
              if (x0 >= x1) continue;
              const std::size_t widx = wbase + (kz * KH + ky) * KW + kx;
              const T w = wt[widx];
              T acc{};
              for (std::size_t z = z0; z < z1; ++z) {
                const std::size_t iz = z * sd + kz - pd;
                for (std::size_t y = y0; y < y1; ++y) {
                  const std::size_t iy = y * sh + ky - ph;
                  const std::size_t ioff = (iz * H + iy) * W;
                  const T* irow = ip + ioff;
                  T* girow = gip + ioff;
                  const T* grow = gp + (z * OH + y) * OW;
                  if (sw == 1) {
                    const std::size_t shift = x0 + kx - pw;
                    const std::size_t n = x1 - x0;
                    const T* src = irow + shift;
                    T* gsrc = girow + shift;
                    const T* g_row = grow + x0;
                    for (std::size_t x = 0; x < n; ++x) {
                      acc += g_row[x] * src[x];
                      gsrc[x] += w * g_row[x];
                    }
                  } else {
                    for (std::size_t x = x0; x < x1; ++x) {
                      const std::size_t ix = x * sw + kx - pw;
                      acc += grow[x] * irow[ix];
                      girow[ix] += w * grow[x];
                    }
                  }
                }
              }
              gw[widx] += acc;
            }
          }
        }
      }
    }
  }
  return g;
}

}  // namespace ctsev::nn
