#pragma once

// Independent oracles and helpers shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "ctsev/ctsev.hpp"

namespace ctsev::testkit {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("ctsev-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
void randomize(nn::Conv3d<T>& layer, Rng& rng) {
  for (auto& v : layer.weights.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  for (auto& v : layer.bias.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
}

/// Direct summation over every output voxel and every kernel tap, with
/// explicit bounds checks in place of padding. Accumulates in double.
template <typename T>
Tensor<double> naive_conv3d(const nn::Conv3d<T>& layer, const Tensor<T>& input) {
  const std::size_t B = input.extent(0), Ci = input.extent(1);
  const long D = static_cast<long>(input.extent(2)), H = static_cast<long>(input.extent(3)),
             W = static_cast<long>(input.extent(4));
  const auto k = layer.kernel();
  const auto s = layer.stride;
  const auto p = layer.padding;
  const std::size_t Co = layer.out_channels();
  const long Do = (D + 2 * long(p[0]) - long(k[0])) / long(s[0]) + 1;
  const long Ho = (H + 2 * long(p[1]) - long(k[1])) / long(s[1]) + 1;
  const long Wo = (W + 2 * long(p[2]) - long(k[2])) / long(s[2]) + 1;
  Tensor<double> out({B, Co, std::size_t(Do), std::size_t(Ho), std::size_t(Wo)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (long z = 0; z < Do; ++z)
        for (long y = 0; y < Ho; ++y)
          for (long x = 0; x < Wo; ++x) {
            double acc = static_cast<double>(layer.bias[o]);
            for (std::size_t c = 0; c < Ci; ++c)
              for (long i = 0; i < long(k[0]); ++i)
                for (long j = 0; j < long(k[1]); ++j)
                  for (long l = 0; l < long(k[2]); ++l) {
                    const long zz = z * long(s[0]) + i - long(p[0]);
                    const long yy = y * long(s[1]) + j - long(p[1]);
                    const long xx = x * long(s[2]) + l - long(p[2]);
                    if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    acc += static_cast<double>(layer.weights(o, c, std::size_t(i), std::size_t(j), std::size_t(l))) *
                           static_cast<double>(input(b, c, std::size_t(zz), std::size_t(yy), std::size_t(xx)));
                  }
            out(b, o, std::size_t(z), std::size_t(y), std::size_t(x)) = acc;
          }
  return out;
}

template <typename A, typename B>
double max_abs_diff(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Step and tolerance for one precision. The relative error of an analytic
/// value a against a numeric value n is |a - n| / max(|a|, |n|, floor).
///
/// The difference quotient itself is always evaluated in double precision on
/// an exact copy of the point; with float evaluation at eps = 1e-3 the
/// rounding noise of the objective (about ulp(f) / eps) would swamp the
/// tolerance being tested.
struct FdPolicy {
  double eps;
  double tol;
  double floor;
};

inline constexpr FdPolicy kSingleFd{1e-3, 1e-3, 1e-4};
inline constexpr FdPolicy kDoubleFd{1e-6, 1e-6, 1e-4};

template <typename T>
constexpr FdPolicy fd_policy() {
  return std::is_same_v<T, float> ? kSingleFd : kDoubleFd;
}

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Objective value plus a fingerprint of every ReLU on/off decision taken
/// while computing it. Differing fingerprints at x+eps and x-eps mean the
/// difference quotient straddles a kink and the coordinate is resampled.
struct Probe {
  double value = 0.0;
  std::uint64_t kinks = 0;
};

template <typename T>
std::uint64_t sign_fingerprint(const Tensor<T>& pre_activation, std::uint64_t h = 0x9e3779b97f4a7c15ULL) {
  for (std::size_t i = 0; i < pre_activation.size(); ++i) {
    if (pre_activation[i] > T{0}) h = mix64(h ^ (i + 1));
  }
  return mix64(h ^ pre_activation.size());
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t resampled = 0;
  double worst = 0.0;
  std::string worst_at;

  bool ok(std::size_t min_checked) const { return failed == 0 && checked >= min_checked; }
};

inline void merge(GradCheckReport& into, const GradCheckReport& r) {
  into.checked += r.checked;
  into.failed += r.failed;
  into.resampled += r.resampled;
  if (r.worst > into.worst) {
    into.worst = r.worst;
    into.worst_at = r.worst_at;
  }
}

/// Compares `analytic` against central differences of `objective` at
/// `samples` random coordinates. `x` is the double-precision copy the
/// objective reads; it is perturbed in place and restored.
template <typename T>
GradCheckReport check_gradient(Tensor<double>& x, const Tensor<T>& analytic, const std::function<Probe()>& objective,
                               std::size_t samples, const FdPolicy& policy, Rng& rng,
                               const std::string& label = "") {
  GradCheckReport r;
  if (x.shape() != analytic.shape()) {
    r.failed = 1;
    r.worst_at = label + ": gradient shape " + shape_string(analytic.shape()) + " vs " + shape_string(x.shape());
    return r;
  }
  std::size_t attempts = 0;
  const std::size_t max_attempts = samples * 20;
  while (r.checked < samples && attempts < max_attempts) {
    ++attempts;
    const std::size_t i = rng.below(x.size());
    const double orig = x[i];
    x[i] = orig + policy.eps;
    const Probe plus = objective();
    x[i] = orig - policy.eps;
    const Probe minus = objective();
    x[i] = orig;
    if (plus.kinks != minus.kinks) {
      ++r.resampled;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * policy.eps);
    const double err = relative_error(static_cast<double>(analytic[i]), numeric, policy.floor);
    ++r.checked;
    if (err > policy.tol) ++r.failed;
    if (err >= r.worst) {
      r.worst = err;
      r.worst_at = label + "[" + std::to_string(i) + "] analytic " + std::to_string(double(analytic[i])) +
                   " numeric " + std::to_string(numeric);
    }
  }
  return r;
}

/// Fixed random projection used to turn a tensor output into a scalar.
template <typename T>
double project(const Tensor<T>& y, const std::vector<double>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += w[i] * static_cast<double>(y[i]);
  return acc;
}

inline std::vector<double> projection_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

template <typename T>
Tensor<T> as_tensor(const std::vector<double>& w, const Shape& shape) {
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < w.size(); ++i) t[i] = static_cast<T>(w[i]);
  return t;
}

// ---------------------------------------------------------------------------
// Small synthetic datasets

/// Balanced random [n,1,D,H,W] batch with class-major labels.
template <typename T>
std::pair<Tensor<T>, std::vector<std::int64_t>> balanced_random_batch(std::size_t per_class, Shape dhw, Rng& rng) {
  const std::size_t n = 3 * per_class;
  Tensor<T> x = random_tensor<T>({n, 1, dhw[0], dhw[1], dhw[2]}, rng, 0.0, 1.0);
  std::vector<std::int64_t> labels;
  for (std::int64_t c = 0; c < 3; ++c) labels.insert(labels.end(), per_class, c);
  return {std::move(x), std::move(labels)};
}

}  // namespace ctsev::testkit
