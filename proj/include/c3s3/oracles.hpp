#pragma once

// Slow, obviously-correct reference implementations used to cross-check the
// fast paths, plus a central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "c3s3/losses.hpp"
#include "c3s3/metrics.hpp"
#include "c3s3/rng.hpp"
#include "c3s3/tensor.hpp"

namespace c3s3::oracle {

/// Direct seven-loop "same" convolution with explicit bounds tests.
inline std::vector<double> conv3d_naive(const std::vector<double>& in, const Shape& in_shape,
                                        const std::vector<double>& weight, const Shape& w_shape,
                                        const std::vector<double>& bias) {
  const std::size_t B = in_shape[0], C = in_shape[1], D = in_shape[2], H = in_shape[3], W = in_shape[4];
  const std::size_t K = w_shape[0], ks = w_shape[2];
  const long pad = static_cast<long>(ks / 2);
  std::vector<double> out(B * K * D * H * W, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (long d = 0; d < static_cast<long>(D); ++d)
        for (long h = 0; h < static_cast<long>(H); ++h)
          for (long w = 0; w < static_cast<long>(W); ++w) {
            double s = bias.empty() ? 0.0 : bias[k];
            for (std::size_t c = 0; c < C; ++c)
              for (long i = 0; i < static_cast<long>(ks); ++i)
                for (long j = 0; j < static_cast<long>(ks); ++j)
                  for (long l = 0; l < static_cast<long>(ks); ++l) {
                    const long sd = d + i - pad, sh = h + j - pad, sw = w + l - pad;
                    if (sd < 0 || sh < 0 || sw < 0 || sd >= static_cast<long>(D) || sh >= static_cast<long>(H) ||
                        sw >= static_cast<long>(W)) {
                      continue;
                    }
                    s += weight[(((k * C + c) * ks + i) * ks + j) * ks + l] *
                         in[(((b * C + c) * D + sd) * H + sh) * W + sw];
                  }
            out[(((b * K + k) * D + d) * H + h) * W + w] = s;
          }
  return out;
}

// ---------------------------------------------------------------------------
// Surface distances by all-pairs search.

inline bool is_surface(const LabelVolume& m, long d, long h, long w) {
  auto fg = [&](long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(m.shape[0]) || y >= static_cast<long>(m.shape[1]) ||
        x >= static_cast<long>(m.shape[2])) {
      return false;
    }
    return m.at(z, y, x) != 0;
  };
  if (!fg(d, h, w)) return false;
  return !fg(d - 1, h, w) || !fg(d + 1, h, w) || !fg(d, h - 1, w) || !fg(d, h + 1, w) || !fg(d, h, w - 1) ||
         !fg(d, h, w + 1);
}

inline std::vector<std::array<long, 3>> surface_brute(const LabelVolume& m) {
  std::vector<std::array<long, 3>> out;
  for (long d = 0; d < static_cast<long>(m.shape[0]); ++d)
    for (long h = 0; h < static_cast<long>(m.shape[1]); ++h)
      for (long w = 0; w < static_cast<long>(m.shape[2]); ++w)
        if (is_surface(m, d, h, w)) out.push_back({d, h, w});
  return out;
}

inline std::optional<SurfaceDistance> hd95_asd_brute(const LabelVolume& pred, const LabelVolume& truth) {
  const auto sp = surface_brute(pred), st = surface_brute(truth);
  if (sp.empty() || st.empty()) return std::nullopt;
  std::vector<double> all;
  auto directed = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dz = static_cast<double>(p[0] - q[0]), dy = static_cast<double>(p[1] - q[1]),
                     dx = static_cast<double>(p[2] - q[2]);
        best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
      }
      all.push_back(best);
    }
  };
  directed(sp, st);
  directed(st, sp);
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, all.size() - 1);
  const double hd95 = all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
  double sum = 0.0;
  for (double v : all) sum += v;
  return SurfaceDistance{hd95, sum / static_cast<double>(all.size())};
}

// ---------------------------------------------------------------------------
// Intersection/union contrastive loss written out step by step: binarize,
// pick anchors and negatives, and average -log softmax of the positive.

struct IucReference {
  double foreground = 0.0, background = 0.0;
  bool foreground_skipped = false, background_skipped = false;
  double total() const { return foreground + background; }
};

inline IucReference iuc_reference(const std::vector<double>& feat_a, const std::vector<double>& feat_b,
                                  std::size_t batch, std::size_t channels, std::size_t spatial,
                                  const std::vector<double>& fg_a, const std::vector<double>& fg_b,
                                  const LossWeights& w, std::uint64_t seed) {
  const std::size_t n = batch * spatial;
  auto vec = [&](const std::vector<double>& f, std::size_t pos) {
    std::vector<double> v(channels);
    for (std::size_t c = 0; c < channels; ++c) v[c] = f[((pos / spatial) * channels + c) * spatial + pos % spatial];
    return v;
  };
  auto cosine = [](const std::vector<double>& u, const std::vector<double>& v) {
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      dot += u[i] * v[i];
      uu += u[i] * u[i];
      vv += v[i] * v[i];
    }
    return dot / (std::max(std::sqrt(uu), 1e-12) * std::max(std::sqrt(vv), 1e-12));
  };
  auto region_loss = [&](bool foreground_region, std::uint64_t stream, bool& skipped) {
    std::vector<std::size_t> anchors, negatives;
    for (std::size_t i = 0; i < n; ++i) {
      const bool a = fg_a[i] > 0.5, b = fg_b[i] > 0.5;
      const bool in_anchor_region = foreground_region ? (a && b) : !(a || b);
      (in_anchor_region ? anchors : negatives).push_back(i);
    }
    if (anchors.empty() || negatives.empty()) {
      skipped = true;
      return 0.0;
    }
    Rng rng(derive_seed(seed, {stream}));
    if (anchors.size() > w.max_anchors) {
      for (std::size_t i = 0; i < w.max_anchors; ++i) std::swap(anchors[i], anchors[i + rng.below(anchors.size() - i)]);
      anchors.resize(w.max_anchors);
    }
    std::vector<std::size_t> drawn;
    for (std::size_t i = 0; i < anchors.size() * w.n_negatives; ++i) drawn.push_back(negatives[rng.below(negatives.size())]);
    double sum = 0.0;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto anchor = vec(feat_a, anchors[i]);
      const double pos = std::exp(cosine(anchor, vec(feat_b, anchors[i])) / w.tau);
      double denom = pos;
      for (std::size_t k = 0; k < w.n_negatives; ++k) {
        denom += std::exp(cosine(anchor, vec(feat_b, drawn[i * w.n_negatives + k])) / w.tau);
      }
      sum += -std::log(pos / denom);
    }
    return sum / static_cast<double>(anchors.size());
  };
  IucReference r;
  r.foreground = region_loss(true, 0, r.foreground_skipped);
  r.background = region_loss(false, 1, r.background_skipped);
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct GradCheckResult {
  double relative_error = 0.0;   // ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
  std::size_t coordinates = 0;   // perturbed coordinates that entered the comparison
  std::size_t discontinuous = 0; // coordinates skipped because the piece changed
};

/// A scalar function of the leaves in `inputs`. `piece` (optional) returns a
/// fingerprint of any discrete choice the function made (masks, winners);
/// coordinates where +h and -h land on different pieces are skipped.
struct GradCheckProblem {
  std::vector<Tensor*> inputs;
  std::function<Tensor()> loss;
  std::function<std::uint64_t()> piece;
};

inline constexpr double kFiniteDifferenceStep = 1e-4;
inline constexpr double kGradRelativeTolerance = 1e-4;

namespace detail {

// Evaluates `f` while recording the ReLU activation pattern, combined with
// the problem's own piece fingerprint.
template <class F>
std::uint64_t with_fingerprint(const GradCheckProblem& p, F&& f) {
  std::uint64_t fp = 0xcbf29ce484222325ULL;
  auto* saved = debug::activation_fingerprint;
  debug::activation_fingerprint = &fp;
  try {
    f();
  } catch (...) {
    debug::activation_fingerprint = saved;
    throw;
  }
  debug::activation_fingerprint = saved;
  return p.piece ? fp ^ (p.piece() * 0x9e3779b97f4a7c15ULL) : fp;
}

}  // namespace detail

/// Central differences on up to `max_coords` coordinates (all if 0), chosen
/// uniformly by `seed` when sampling. Coordinates whose +h or -h evaluation
/// lands on a different smooth piece (a ReLU changed sign, or `piece`
/// changed) are skipped and counted in `discontinuous`.
inline GradCheckResult grad_check(const GradCheckProblem& p, std::size_t max_coords = 0, std::uint64_t seed = 0,
                                  double h = kFiniteDifferenceStep) {
  for (auto* t : p.inputs) t->zero_grad();
  std::uint64_t base_piece = 0;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out;
    base_piece = detail::with_fingerprint(p, [&] { out = p.loss(); });
    backward(out);  // the loss may live on a tape owned by the callee
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < p.inputs.size(); ++i)
    for (std::size_t j = 0; j < p.inputs[i]->numel(); ++j) coords.emplace_back(i, j);
  if (max_coords > 0 && coords.size() > max_coords) {
    Rng rng(seed);
    for (std::size_t i = 0; i < max_coords; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(max_coords);
  }
  GradCheckResult r;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (const auto& [i, j] : coords) {
    double& x = p.inputs[i]->data()[j];
    const double saved = x;
    double fp = 0.0, fm = 0.0;
    x = saved + h;
    const std::uint64_t piece_p = detail::with_fingerprint(p, [&] { fp = p.loss().item(); });
    x = saved - h;
    const std::uint64_t piece_m = detail::with_fingerprint(p, [&] { fm = p.loss().item(); });
    x = saved;
    if (piece_p != base_piece || piece_m != base_piece) {
      ++r.discontinuous;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = p.inputs[i]->grad()[j];
    diff2 += (numeric - analytic) * (numeric - analytic);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
    ++r.coordinates;
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
  r.relative_error = std::sqrt(diff2) / denom;
  return r;
}

}  // namespace c3s3::oracle
