#pragma once

// Overlap and surface-distance metrics for binary 3D segmentations.
//
// Surfaces use 6-connectivity (a foreground voxel touching background or the
// volume border). Distances are Euclidean between voxel centers in voxel
// units. Point-to-surface distances come from an exact squared Euclidean
// distance transform rather than all-pairs search.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "c3s3/volumes.hpp"

namespace c3s3 {

struct Overlap {
  double dice = 0.0;
  double jaccard = 0.0;
};

struct SurfaceDistance {
  double hd95 = 0.0;
  double asd = 0.0;
};

struct MetricReport {
  double dice = 0.0;
  double jaccard = 0.0;
  std::optional<SurfaceDistance> surface;  // nullopt when either mask is empty
};

inline void require_same_extent(const LabelVolume& a, const LabelVolume& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shapes " + extent_str(a.shape) + " and " + extent_str(b.shape) + " differ");
  }
}

/// Both empty counts as perfect agreement (1, 1); exactly one empty gives (0, 0).
inline Overlap dice_jaccard(const LabelVolume& pred, const LabelVolume& truth) {
  require_same_extent(pred, truth, "dice_jaccard");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.voxels[i] != 0, b = truth.voxels[i] != 0;
    p += a;
    t += b;
    both += a && b;
  }
  if (p == 0 && t == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(both);
  return {2.0 * inter / static_cast<double>(p + t), inter / static_cast<double>(p + t - both)};
}

using Voxel = std::array<std::size_t, 3>;

inline std::vector<Voxel> surface_voxels(const LabelVolume& mask) {
  const auto& s = mask.shape;
  std::vector<Voxel> out;
  auto fg = [&](std::ptrdiff_t d, std::ptrdiff_t h, std::ptrdiff_t w) {
    if (d < 0 || h < 0 || w < 0 || d >= static_cast<std::ptrdiff_t>(s[0]) || h >= static_cast<std::ptrdiff_t>(s[1]) ||
        w >= static_cast<std::ptrdiff_t>(s[2])) {
      return false;
    }
    return mask.at(static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w)) != 0;
  };
  for (std::size_t d = 0; d < s[0]; ++d)
    for (std::size_t h = 0; h < s[1]; ++h)
      for (std::size_t w = 0; w < s[2]; ++w) {
        if (!mask.at(d, h, w)) continue;
        const auto D = static_cast<std::ptrdiff_t>(d), H = static_cast<std::ptrdiff_t>(h),
                   W = static_cast<std::ptrdiff_t>(w);
        if (!fg(D - 1, H, W) || !fg(D + 1, H, W) || !fg(D, H - 1, W) || !fg(D, H + 1, W) || !fg(D, H, W - 1) ||
            !fg(D, H, W + 1)) {
          out.push_back({d, h, w});
        }
      }
  return out;
}

namespace metric_detail {

// Exact 1D squared distance transform (lower envelope of parabolas), in place
// along a strided line of length n.
inline void edt_1d(double* f, std::size_t n, std::size_t stride, std::vector<double>& scratch_d,
                   std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  scratch_d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q * stride] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) return;  // no sites on this line; leave infinities
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == inf) continue;
    const double qd = static_cast<double>(q);
    for (;;) {
      const double vk = static_cast<double>(v[k]);
      const double s = ((fq + qd * qd) - (f[v[k] * stride] + vk * vk)) / (2.0 * qd - 2.0 * vk);
      if (s <= z[k]) {
        if (k == 0) {
          v[0] = q;
          z[0] = -inf;
          z[1] = inf;
          break;
        }
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
      break;
    }
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double diff = qd - static_cast<double>(v[k]);
    scratch_d[q] = diff * diff + f[v[k] * stride];
  }
  for (std::size_t q = 0; q < n; ++q) f[q * stride] = scratch_d[q];
}

/// Squared Euclidean distance from every voxel to the nearest site.
inline std::vector<double> squared_distance_to(const std::vector<Voxel>& sites, const Extent3& s) {
  std::vector<double> f(extent_numel(s), std::numeric_limits<double>::infinity());
  for (const auto& p : sites) f[(p[0] * s[1] + p[1]) * s[2] + p[2]] = 0.0;
  std::vector<double> sd, z;
  std::vector<std::size_t> v;
  for (std::size_t d = 0; d < s[0]; ++d)
    for (std::size_t h = 0; h < s[1]; ++h) edt_1d(f.data() + (d * s[1] + h) * s[2], s[2], 1, sd, v, z);
  for (std::size_t d = 0; d < s[0]; ++d)
    for (std::size_t w = 0; w < s[2]; ++w) edt_1d(f.data() + d * s[1] * s[2] + w, s[1], s[2], sd, v, z);
  for (std::size_t h = 0; h < s[1]; ++h)
    for (std::size_t w = 0; w < s[2]; ++w) edt_1d(f.data() + h * s[2] + w, s[0], s[1] * s[2], sd, v, z);
  return f;
}

}  // namespace metric_detail

/// q-th quantile (q in [0, 1]) with linear interpolation between closest
/// ranks of the sorted sample.
inline double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Symmetric multiset of surface-to-surface distances: every surface voxel of
/// `pred` to the surface of `truth`, and vice versa. Empty if either surface
/// is empty.
inline std::vector<double> surface_distances(const LabelVolume& pred, const LabelVolume& truth) {
  require_same_extent(pred, truth, "surface_distances");
  const auto sp = surface_voxels(pred);
  const auto st = surface_voxels(truth);
  if (sp.empty() || st.empty()) return {};
  const auto& s = pred.shape;
  const auto to_truth = metric_detail::squared_distance_to(st, s);
  const auto to_pred = metric_detail::squared_distance_to(sp, s);
  std::vector<double> out;
  out.reserve(sp.size() + st.size());
  for (const auto& p : sp) out.push_back(std::sqrt(to_truth[(p[0] * s[1] + p[1]) * s[2] + p[2]]));
  for (const auto& t : st) out.push_back(std::sqrt(to_pred[(t[0] * s[1] + t[1]) * s[2] + t[2]]));
  return out;
}

/// nullopt when either mask has no foreground (the distance is undefined).
inline std::optional<SurfaceDistance> hd95_asd(const LabelVolume& pred, const LabelVolume& truth) {
  const auto dist = surface_distances(pred, truth);
  if (dist.empty()) return std::nullopt;
  double sum = 0.0;
  for (double d : dist) sum += d;
  return SurfaceDistance{percentile_linear(dist, 0.95), sum / static_cast<double>(dist.size())};
}

inline MetricReport evaluate_masks(const LabelVolume& pred, const LabelVolume& truth) {
  const auto ov = dice_jaccard(pred, truth);
  return {ov.dice, ov.jaccard, hd95_asd(pred, truth)};
}

// ---------------------------------------------------------------------------
// CSV reporting

inline constexpr const char* kUndefinedDistance = "undefined";

struct MetricSummary {
  double dice = 0.0, jaccard = 0.0;
  std::optional<double> hd95, asd;  // mean over samples with defined distances
  std::size_t undefined_surface = 0;
};

inline MetricSummary summarize(const std::vector<MetricReport>& rows) {
  MetricSummary s;
  if (rows.empty()) return s;
  double hd = 0.0, asd = 0.0;
  std::size_t defined = 0;
  for (const auto& r : rows) {
    s.dice += r.dice;
    s.jaccard += r.jaccard;
    if (r.surface) {
      hd += r.surface->hd95;
      asd += r.surface->asd;
      ++defined;
    } else {
      ++s.undefined_surface;
    }
  }
  s.dice /= static_cast<double>(rows.size());
  s.jaccard /= static_cast<double>(rows.size());
  if (defined) {
    s.hd95 = hd / static_cast<double>(defined);
    s.asd = asd / static_cast<double>(defined);
  }
  return s;
}

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_metric(const std::optional<double>& v) {
  return v ? format_metric(*v) : std::string(kUndefinedDistance);
}

/// One row per sample plus a trailing "mean" row. Undefined surface
/// distances print as "undefined"; the mean of hd95/asd covers the samples
/// where they are defined.
inline void write_metrics_csv(std::ostream& os, const std::vector<std::string>& ids,
                              const std::vector<MetricReport>& rows) {
  if (ids.size() != rows.size()) throw std::invalid_argument("write_metrics_csv: ids and rows differ in length");
  os << "sample_id,dice,jaccard,hd95,asd\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << ids[i] << ',' << format_metric(r.dice) << ',' << format_metric(r.jaccard) << ','
       << format_metric(r.surface ? std::optional<double>(r.surface->hd95) : std::nullopt) << ','
       << format_metric(r.surface ? std::optional<double>(r.surface->asd) : std::nullopt) << '\n';
  }
  const auto s = summarize(rows);
  os << "mean," << format_metric(s.dice) << ',' << format_metric(s.jaccard) << ',' << format_metric(s.hd95) << ','
     << format_metric(s.asd) << '\n';
}

}  // namespace c3s3
