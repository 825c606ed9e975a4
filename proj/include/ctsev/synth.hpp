#pragma once

// Synthetic CT phantoms whose severity class is set by volumetric lesion
// burden inside an ellipsoidal lung region.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctsev/error.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/tensor.hpp"
#include "ctsev/volio.hpp"

namespace ctsev {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct CountRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

struct PhantomSpec {
  std::size_t depth = 40;
  std::size_t height = 64;
  std::size_t width = 64;
  /// Lesion voxels as a fraction of lung voxels, per class.
  std::array<Range, kNumClasses> lesion_fraction{{{0.00, 0.03}, {0.06, 0.12}, {0.18, 0.30}}};
  /// Number of lesion blobs aimed for, per class (more are added if the
  /// fraction target is not yet met).
  std::array<CountRange, kNumClasses> lesion_count{{{1, 3}, {4, 10}, {12, 30}}};
  double noise_std = 20.0;  // HU
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 4 || height < 16 || width < 16) throw SpecError("phantom shape too small (min 4x16x16)");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto& r = lesion_fraction[c];
      if (!(r.lo >= 0.0 && r.lo <= r.hi && r.hi < 1.0)) throw SpecError("lesion fraction range invalid");
      if (lesion_count[c].lo > lesion_count[c].hi) throw SpecError("lesion count range invalid");
      if (c > 0 && !(lesion_fraction[c - 1].hi < r.lo)) {
        throw SpecError("lesion fraction ranges must be disjoint and increasing Low < Medium < High");
      }
    }
    if (!(noise_std >= 0.0)) throw SpecError("noise_std must be non-negative");
  }
};

// Phantom intensities (HU).
inline constexpr double kAirHu = -1000.0;
inline constexpr double kBodyHu = 40.0;
inline constexpr double kLungHu = -850.0;
inline constexpr double kLesionHu = 350.0;
inline constexpr double kTableHu = 200.0;

struct Phantom {
  Volume volume;  // HU
  SeverityScore score{1};
  double lesion_fraction = 0.0;
  std::size_t lung_voxels = 0;
  std::vector<std::uint8_t> lung_mask;    // [D*H*W]
  std::vector<std::uint8_t> lesion_mask;  // [D*H*W]
};

namespace detail {

inline constexpr std::array<std::array<int, 3>, kNumClasses> kScoreSets{{{1, 2, 0}, {3, 0, 0}, {4, 5, 6}}};
inline constexpr std::array<std::size_t, kNumClasses> kScoreSetSizes{2, 1, 3};

struct Ellipsoid {
  double cz, cy, cx, rz, ry, rx;
  bool contains(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c <= 1.0;
  }
};

}  // namespace detail

/// Builds one phantom: elliptic body cylinder, two ellipsoidal lungs, a thin
/// bright table band below the body, Gaussian lesion blobs spread across the
/// lung's depth until the class's lesion fraction target is met, then noise.
inline Phantom generate_phantom(SeverityClass cls, const PhantomSpec& spec, std::uint64_t patient_seed) {
  spec.validate();
  const std::size_t D = spec.depth, H = spec.height, W = spec.width;
  const std::size_t plane = H * W, n = D * plane;
  const auto c = index_of(cls);
  Rng rng(hash_words({spec.seed, patient_seed, 0xfa17u}));
  auto jitter = [&](double v, double rel) { return v * rng.uniform(1.0 - rel, 1.0 + rel); };
  const double Hd = static_cast<double>(H), Wd = static_cast<double>(W), Dd = static_cast<double>(D);

  // Body cylinder and table.
  const double body_cy = jitter(0.45 * Hd, 0.03), body_cx = jitter(0.5 * Wd, 0.03);
  const double body_ry = jitter(0.30 * Hd, 0.06), body_rx = jitter(0.42 * Wd, 0.06);
  const auto table_top = static_cast<std::size_t>(std::round(0.86 * Hd));
  const std::size_t table_rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(0.04 * Hd)));

  // Lungs.
  std::array<detail::Ellipsoid, 2> lungs{};
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    lungs[side] = {Dd / 2.0 - 0.5,
                   jitter(body_cy - 0.02 * Hd, 0.03),
                   body_cx + sign * jitter(0.19 * Wd, 0.05),
                   jitter(0.46 * Dd, 0.05),
                   jitter(0.20 * Hd, 0.06),
                   jitter(0.13 * Wd, 0.06)};
  }

  Phantom ph;
  ph.lung_mask.assign(n, 0);
  ph.lesion_mask.assign(n, 0);
  std::vector<double> hu(n, kAirHu);
  for (std::size_t z = 0; z < D; ++z) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = z * plane + y * W + x;
        const double yy = static_cast<double>(y), xx = static_cast<double>(x), zz = static_cast<double>(z);
        const double by = (yy - body_cy) / body_ry, bx = (xx - body_cx) / body_rx;
        if (by * by + bx * bx <= 1.0) hu[i] = kBodyHu;
        if (y >= table_top && y < table_top + table_rows && x >= W / 10 && x < W - W / 10) hu[i] = kTableHu;
        for (const auto& l : lungs) {
          if (l.contains(zz, yy, xx)) {
            hu[i] = kLungHu;
            ph.lung_mask[i] = 1;
          }
        }
      }
    }
  }
  for (auto m : ph.lung_mask) ph.lung_voxels += m;
  if (ph.lung_voxels == 0) throw SpecError("phantom lung region is empty");

  // Lung-bearing depth range.
  std::size_t z_lo = D, z_hi = 0;
  for (std::size_t z = 0; z < D; ++z) {
    for (std::size_t p = 0; p < plane; ++p) {
      if (ph.lung_mask[z * plane + p]) {
        z_lo = std::min(z_lo, z);
        z_hi = std::max(z_hi, z);
        break;
      }
    }
  }

  const auto& frac = spec.lesion_fraction[c];
  const double target = rng.uniform(frac.lo, frac.hi);
  const double lung = static_cast<double>(ph.lung_voxels);
  const auto min_voxels = static_cast<std::size_t>(std::ceil(frac.lo * lung));
  const auto max_voxels = static_cast<std::size_t>(std::floor(frac.hi * lung));
  if (min_voxels > max_voxels) {
    throw SpecError("lesion fraction range [" + std::to_string(frac.lo) + ", " + std::to_string(frac.hi) +
                    "] holds no whole voxel count for " + std::to_string(ph.lung_voxels) + " lung voxels");
  }
  const auto target_voxels =
      std::clamp(static_cast<std::size_t>(std::ceil(target * lung)), min_voxels, max_voxels);
  const auto& counts = spec.lesion_count[c];
  const std::size_t planned = counts.lo + rng.below(counts.hi - counts.lo + 1);

  std::vector<double> gmax(n, 0.0);
  std::size_t lesion_voxels = 0;
  std::size_t placed = 0;
  std::size_t misses = 0;
  const std::size_t max_attempts = 200 + 50 * std::max<std::size_t>(planned, 1);
  std::size_t attempts = 0;
  const double core = std::sqrt(2.0 * std::log(2.0));  // g >= 0.5 inside r <= core * sigma
  std::vector<std::size_t> fresh, candidates;

  while (lesion_voxels < target_voxels) {
    if (++attempts > max_attempts) {
      throw SpecError("lesion fraction target " + std::to_string(target) +
                      " unreachable within the lung region");
    }
    const std::size_t blobs_left = planned > placed ? planned - placed : 1;
    const double remaining = static_cast<double>(target_voxels - lesion_voxels);
    const double headroom = static_cast<double>(max_voxels - lesion_voxels);
    const double want = std::min(remaining / static_cast<double>(blobs_left), 0.6 * headroom);
    const double radius = std::max(1.0, std::cbrt(3.0 * want / (4.0 * std::numbers::pi)));
    double sigma = jitter(radius / core, 0.1);
    if (attempts > max_attempts / 2) sigma *= 0.5;  // shrink when struggling to fit the range

    // Center: stratified depth across the lung, then a lesion-free lung
    // pixel on that slice.
    const std::size_t strata = std::max<std::size_t>(planned, 1);
    const double span = static_cast<double>(z_hi - z_lo + 1);
    const double zc_f = static_cast<double>(z_lo) +
                        span * (static_cast<double>((placed + misses) % strata) + rng.uniform()) /
                            static_cast<double>(strata);
    const auto zc = std::min(z_hi, static_cast<std::size_t>(zc_f));
    candidates.clear();
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = zc * plane + p;
      if (ph.lung_mask[i] && !ph.lesion_mask[i]) candidates.push_back(p);
    }
    if (candidates.empty()) {
      ++misses;  // stratum saturated; move on to the next one
      continue;
    }
    const std::size_t pick = candidates[rng.below(candidates.size())];
    const std::size_t yc = pick / W, xc = pick % W;

    const double reach = 3.0 * sigma;
    auto lo_hi = [&](std::size_t center, std::size_t extent) {
      const double cd = static_cast<double>(center);
      return std::pair<std::size_t, std::size_t>{
          static_cast<std::size_t>(std::max(0.0, std::floor(cd - reach))),
          static_cast<std::size_t>(std::min(static_cast<double>(extent - 1), std::ceil(cd + reach)))};
    };
    const auto [z0, z1] = lo_hi(zc, D);
    const auto [y0, y1] = lo_hi(yc, H);
    const auto [x0, x1] = lo_hi(xc, W);
    fresh.clear();
    for (std::size_t z = z0; z <= z1; ++z) {
      for (std::size_t y = y0; y <= y1; ++y) {
        for (std::size_t x = x0; x <= x1; ++x) {
          const std::size_t i = z * plane + y * W + x;
          if (!ph.lung_mask[i] || ph.lesion_mask[i]) continue;
          const double dz = double(z) - double(zc), dy = double(y) - double(yc), dx = double(x) - double(xc);
          const double g = std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * sigma * sigma));
          if (g >= 0.5) fresh.push_back(i);
        }
      }
    }
    if (fresh.empty() || lesion_voxels + fresh.size() > max_voxels) {
      ++misses;
      continue;
    }

    for (std::size_t z = z0; z <= z1; ++z) {
      for (std::size_t y = y0; y <= y1; ++y) {
        for (std::size_t x = x0; x <= x1; ++x) {
          const std::size_t i = z * plane + y * W + x;
          if (!ph.lung_mask[i]) continue;
          const double dz = double(z) - double(zc), dy = double(y) - double(yc), dx = double(x) - double(xc);
          gmax[i] = std::max(gmax[i], std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * sigma * sigma)));
        }
      }
    }
    for (auto i : fresh) ph.lesion_mask[i] = 1;
    lesion_voxels += fresh.size();
    ++placed;
  }

  for (std::size_t i = 0; i < n; ++i) {
    // Lesion voxels (g >= 0.5) sit at full lesion intensity; the halo fades
    // back to lung.
    if (ph.lung_mask[i]) hu[i] = kLungHu + (kLesionHu - kLungHu) * std::min(1.0, 2.0 * gmax[i]);
    hu[i] += spec.noise_std * rng.normal();
  }
  ph.lesion_fraction = static_cast<double>(lesion_voxels) / lung;
  ph.volume = Volume::make(Tensor<double>({D, H, W}, std::move(hu)), IntensityUnit::HU);

  Rng score_rng(hash_words({spec.seed, patient_seed, 0x5c03eu}));
  ph.score = SeverityScore(detail::kScoreSets[c][score_rng.below(detail::kScoreSetSizes[c])]);
  return ph;
}

inline std::uint64_t phantom_patient_seed(SeverityClass cls, std::size_t index) {
  return hash_words({0x7a7u, index_of(cls), index});
}

/// Writes one raw-format volume per patient plus manifest.json under
/// `out_dir`; counts per class default to a balanced profile.
inline DatasetManifest generate_dataset(const PhantomSpec& spec, std::array<std::size_t, kNumClasses> counts,
                                        const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.source_note = "synthetic phantoms (seed " + std::to_string(spec.seed) + ", shape " +
                  std::to_string(spec.depth) + "x" + std::to_string(spec.height) + "x" +
                  std::to_string(spec.width) + ")";
  m.base_dir = out_dir;
  std::size_t serial = 0;
  for (auto cls : kAllClasses) {
    for (std::size_t i = 0; i < counts[index_of(cls)]; ++i) {
      Phantom ph = generate_phantom(cls, spec, phantom_patient_seed(cls, i));
      char id[16];
      std::snprintf(id, sizeof id, "p%04zu", serial++);
      save_volume_raw(ph.volume, out_dir / id);
      m.records.push_back({id, id, ph.score, Split::unassigned});
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

inline DatasetManifest generate_dataset(const PhantomSpec& spec, std::size_t n_per_class, const fs::path& out_dir) {
  return generate_dataset(spec, {n_per_class, n_per_class, n_per_class}, out_dir);
}

}  // namespace ctsev
