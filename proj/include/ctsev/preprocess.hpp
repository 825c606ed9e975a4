#pragma once

// CT image chain: HU windowing, body crop with table removal, in-plane
// bilinear resize and natural-cubic-spline depth uniformization.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctsev/error.hpp"
#include "ctsev/tensor.hpp"
#include "ctsev/volio.hpp"

namespace ctsev {

struct HuWindow {
  double low = -1000.0;
  double high = 400.0;
};

struct CropPolicy {
  double body_threshold = 0.15;
  double margin_fraction = 0.05;
};

struct PreprocessConfig {
  HuWindow hu_window;
  std::size_t target_h = 64;
  std::size_t target_w = 64;
  std::size_t target_depth = 40;
  CropPolicy crop;

  void validate() const {
    if (!(hu_window.low < hu_window.high)) throw ConfigError("hu_window requires low < high");
    if (target_h < 2 || target_w < 2) throw ConfigError("target_hw extents must be >= 2");
    if (target_depth < 2) throw ConfigError("target_depth must be >= 2");
    if (!(crop.body_threshold > 0.0 && crop.body_threshold < 1.0)) {
      throw ConfigError("crop.body_threshold must lie in (0,1)");
    }
    if (!(crop.margin_fraction >= 0.0 && crop.margin_fraction <= 0.25)) {
      throw ConfigError("crop.margin_fraction must lie in [0,0.25]");
    }
  }
};

inline nlohmann::json to_json(const PreprocessConfig& c) {
  return {{"hu_window", {c.hu_window.low, c.hu_window.high}},
          {"target_hw", {c.target_h, c.target_w}},
          {"target_depth", c.target_depth},
          {"crop", {{"body_threshold", c.crop.body_threshold},
                    {"margin_fraction", c.crop.margin_fraction}}}};
}

/// Missing keys keep their defaults.
inline PreprocessConfig preprocess_config_from_json(const nlohmann::json& j) {
  PreprocessConfig c;
  detail::reject_unknown_keys(j, {"hu_window", "target_hw", "target_depth", "crop"}, "preprocess config");
  try {
    if (j.contains("hu_window")) {
      c.hu_window.low = j["hu_window"].at(0).get<double>();
      c.hu_window.high = j["hu_window"].at(1).get<double>();
    }
    if (j.contains("target_hw")) {
      c.target_h = j["target_hw"].at(0).get<std::size_t>();
      c.target_w = j["target_hw"].at(1).get<std::size_t>();
    }
    if (j.contains("target_depth")) c.target_depth = j["target_depth"].get<std::size_t>();
    if (j.contains("crop")) {
      const auto& k = j["crop"];
      detail::reject_unknown_keys(k, {"body_threshold", "margin_fraction"}, "preprocess config crop");
      if (k.contains("body_threshold")) c.crop.body_threshold = k["body_threshold"].get<double>();
      if (k.contains("margin_fraction")) c.crop.margin_fraction = k["margin_fraction"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("preprocess config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Volume window_normalize(const Volume& v, HuWindow window) {
  if (!(window.low < window.high)) {
    throw ConfigError("degenerate HU window [" + std::to_string(window.low) + ", " +
                      std::to_string(window.high) + "]");
  }
  Volume out = v;
  const double span = window.high - window.low;
  for (auto& x : out.voxels.data()) x = std::clamp((x - window.low) / span, 0.0, 1.0);
  out.intensity_unit = IntensityUnit::normalized;
  return out;
}

/// Inclusive pixel box.
struct BodyBox {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
  std::size_t height() const { return bottom - top + 1; }
  std::size_t width() const { return right - left + 1; }
  friend bool operator==(const BodyBox&, const BodyBox&) = default;
};

/// Body box on one slice [h, w] (row-major values).
///
/// Rows holding any pixel >= threshold form runs; while more than one run
/// remains and the bottom run is thinner than 10% of the image height, that
/// run is treated as the scanner table and dropped. Columns are then taken
/// over the surviving rows, and the margin is added without letting the
/// bottom edge reach back into a dropped run.
inline BodyBox find_body_box(std::span<const double> slice, std::size_t h, std::size_t w,
                             const CropPolicy& policy) {
  const double thr = policy.body_threshold;
  std::vector<bool> occupied(h, false);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (slice[y * w + x] >= thr) {
        occupied[y] = true;
        break;
      }
    }
  }
  struct Run { std::size_t first, last; };
  std::vector<Run> runs;
  for (std::size_t y = 0; y < h; ++y) {
    if (!occupied[y]) continue;
    if (!runs.empty() && runs.back().last + 1 == y) {
      runs.back().last = y;
    } else {
      runs.push_back({y, y});
    }
  }
  if (runs.empty()) {
    throw EmptyBodyError("no pixel reaches the body threshold " + std::to_string(thr));
  }
  const double table_limit = 0.1 * static_cast<double>(h);
  std::size_t bottom_limit = h - 1;
  while (runs.size() > 1 &&
         static_cast<double>(runs.back().last - runs.back().first + 1) < table_limit) {
    bottom_limit = runs.back().first - 1;
    runs.pop_back();
  }

  BodyBox box;
  box.top = runs.front().first;
  box.bottom = runs.back().last;
  box.left = w;
  box.right = 0;
  for (std::size_t y = box.top; y <= box.bottom; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (slice[y * w + x] >= thr) {
        box.left = std::min(box.left, x);
        box.right = std::max(box.right, x);
      }
    }
  }

  const auto dy = static_cast<std::size_t>(std::floor(policy.margin_fraction * box.height()));
  const auto dx = static_cast<std::size_t>(std::floor(policy.margin_fraction * box.width()));
  box.top = box.top >= dy ? box.top - dy : 0;
  box.bottom = std::min({box.bottom + dy, h - 1, bottom_limit});
  box.left = box.left >= dx ? box.left - dx : 0;
  box.right = std::min(box.right + dx, w - 1);
  return box;
}

/// Crops every slice to the body box found on the middle slice.
inline Volume crop_body(const Volume& v, const CropPolicy& policy) {
  if (v.intensity_unit != IntensityUnit::normalized) {
    throw ConfigError("crop_body expects a normalized volume; window it first");
  }
  const std::size_t d = v.depth(), h = v.height(), w = v.width();
  const std::size_t mid = d / 2;
  const BodyBox box = find_body_box(v.voxels.data().subspan(mid * h * w, h * w), h, w, policy);
  Tensor<double> out({d, box.height(), box.width()});
  std::size_t k = 0;
  for (std::size_t z = 0; z < d; ++z) {
    for (std::size_t y = box.top; y <= box.bottom; ++y) {
      for (std::size_t x = box.left; x <= box.right; ++x) out[k++] = v.voxels(z, y, x);
    }
  }
  Volume r = v;
  r.voxels = std::move(out);
  return r;
}

/// Per-slice bilinear resize with corner-aligned sampling
/// (source coordinate = i * (n_src - 1) / (n_dst - 1)).
inline Volume resize_inplane(const Volume& v, std::size_t target_h, std::size_t target_w) {
  if (target_h < 2 || target_w < 2) throw ConfigError("resize target extents must be >= 2");
  const std::size_t d = v.depth(), h = v.height(), w = v.width();
  auto coords = [](std::size_t n_src, std::size_t n_dst) {
    std::vector<std::pair<std::size_t, double>> c(n_dst);
    for (std::size_t i = 0; i < n_dst; ++i) {
      if (n_src == 1) {
        c[i] = {0, 0.0};
        continue;
      }
      const double s = static_cast<double>(i) * static_cast<double>(n_src - 1) /
                       static_cast<double>(n_dst - 1);
      auto i0 = std::min(static_cast<std::size_t>(std::floor(s)), n_src - 2);
      c[i] = {i0, s - static_cast<double>(i0)};
    }
    return c;
  };
  const auto cy = coords(h, target_h);
  const auto cx = coords(w, target_w);
  Tensor<double> out({d, target_h, target_w});
  const auto src = v.voxels.data();
  for (std::size_t z = 0; z < d; ++z) {
    const double* plane = src.data() + z * h * w;
    for (std::size_t y = 0; y < target_h; ++y) {
      const auto [y0, fy] = cy[y];
      const std::size_t y1 = h == 1 ? y0 : y0 + 1;
      for (std::size_t x = 0; x < target_w; ++x) {
        const auto [x0, fx] = cx[x];
        const std::size_t x1 = w == 1 ? x0 : x0 + 1;
        const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
        const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
        out(z, y, x) = top * (1 - fy) + bot * fy;
      }
    }
  }
  Volume r = v;
  r.voxels = std::move(out);
  return r;
}

/// Natural cubic spline through samples at integer knots 0..n-1.
class NaturalCubicSpline {
 public:
  explicit NaturalCubicSpline(std::vector<double> samples) : y_(std::move(samples)) {
    if (y_.size() < 2) throw InsufficientDepthError("spline needs at least 2 samples");
    m_ = second_derivatives(y_);
  }

  double operator()(double t) const {
    const std::size_t n = y_.size();
    auto i = static_cast<std::size_t>(std::clamp(std::floor(t), 0.0, static_cast<double>(n - 2)));
    const double u = t - static_cast<double>(i);
    return evaluate(y_[i], y_[i + 1], m_[i], m_[i + 1], u);
  }

  static double evaluate(double y0, double y1, double m0, double m1, double u) {
    const double a = 1.0 - u;
    return a * y0 + u * y1 + ((a * a * a - a) * m0 + (u * u * u - u) * m1) / 6.0;
  }

  /// Solves M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]) with
  /// M[0] = M[n-1] = 0 (Thomas algorithm).
  static std::vector<double> second_derivatives(const std::vector<double>& y) {
    const std::size_t n = y.size();
    std::vector<double> m(n, 0.0);
    if (n < 3) return m;
    const std::size_t k = n - 2;
    std::vector<double> c(k), r(k);
    for (std::size_t i = 0; i < k; ++i) {
      const double rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
      const double denom = 4.0 - (i ? c[i - 1] : 0.0);
      c[i] = 1.0 / denom;
      r[i] = (rhs - (i ? r[i - 1] : 0.0)) / denom;
    }
    m[k] = r[k - 1];
    for (std::size_t i = k - 1; i-- > 0;) m[i + 1] = r[i] - c[i] * m[i + 2];
    return m;
  }

 private:
  std::vector<double> y_;
  std::vector<double> m_;
};

/// Resamples every (y, x) column along depth with a natural cubic spline,
/// evaluated at t_i = i (D - 1) / (T - 1). No clamping here.
inline Volume uniformize_depth(const Volume& v, std::size_t target_depth) {
  const std::size_t d = v.depth(), h = v.height(), w = v.width();
  if (d < 2) throw InsufficientDepthError("volume depth 1 cannot be uniformized");
  if (target_depth < 2) throw ConfigError("target depth must be >= 2");
  const std::size_t plane = h * w;
  const auto src = v.voxels.data();

  // Column-parallel Thomas solve: the tridiagonal factors depend only on d.
  std::vector<double> m(d * plane, 0.0);
  if (d >= 3) {
    const std::size_t k = d - 2;
    std::vector<double> c(k);
    std::vector<double> r(k * plane);
    for (std::size_t i = 0; i < k; ++i) {
      const double denom = 4.0 - (i ? c[i - 1] : 0.0);
      c[i] = 1.0 / denom;
      const double* y0 = src.data() + i * plane;
      const double* y1 = y0 + plane;
      const double* y2 = y1 + plane;
      double* ri = r.data() + i * plane;
      const double* rp = i ? r.data() + (i - 1) * plane : nullptr;
      for (std::size_t p = 0; p < plane; ++p) {
        const double rhs = 6.0 * (y2[p] - 2.0 * y1[p] + y0[p]);
        ri[p] = (rhs - (rp ? rp[p] : 0.0)) / denom;
      }
    }
    std::copy_n(r.data() + (k - 1) * plane, plane, m.data() + k * plane);
    for (std::size_t i = k - 1; i-- > 0;) {
      for (std::size_t p = 0; p < plane; ++p) {
        m[(i + 1) * plane + p] = r[i * plane + p] - c[i] * m[(i + 2) * plane + p];
      }
    }
  }

  Tensor<double> out({target_depth, h, w});
  for (std::size_t t = 0; t < target_depth; ++t) {
    const double pos = static_cast<double>(t) * static_cast<double>(d - 1) /
                       static_cast<double>(target_depth - 1);
    auto i = static_cast<std::size_t>(std::min(std::floor(pos), static_cast<double>(d - 2)));
    const double u = pos - static_cast<double>(i);
    for (std::size_t p = 0; p < plane; ++p) {
      out[t * plane + p] = NaturalCubicSpline::evaluate(
          src[i * plane + p], src[(i + 1) * plane + p], m[i * plane + p], m[(i + 1) * plane + p], u);
    }
  }
  Volume r = v;
  r.voxels = std::move(out);
  return r;
}

/// window -> crop -> resize -> depth uniformization, then clamp to [0, 1].
/// Volumes already in normalized units skip the window. Errors carry
/// `record_id` when one is given.
inline Volume preprocess_volume(const Volume& v, const PreprocessConfig& cfg,
                                const std::string& record_id = {}) {
  try {
    cfg.validate();
    Volume out = v.intensity_unit == IntensityUnit::HU ? window_normalize(v, cfg.hu_window) : v;
    out = crop_body(out, cfg.crop);
    out = resize_inplane(out, cfg.target_h, cfg.target_w);
    out = uniformize_depth(out, cfg.target_depth);
    for (auto& x : out.voxels.data()) x = std::clamp(x, 0.0, 1.0);
    return out;
  } catch (Error& e) {
    if (!record_id.empty()) e.add_context("record '" + record_id + "'");
    throw;
  }
}

}  // namespace ctsev
