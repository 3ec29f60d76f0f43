#pragma once

// Training objectives: supervised CE + Dice, the weighted competition score
// that picks the teacher backbone, soft pseudo-label MSE, cosine
// consistency, and the intersection/union-masked contrastive stack.
//
// Losses with non-trivial derivatives are fused ops with hand-written
// backward rules; every one is covered by finite-difference tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "c3s3/error.hpp"
#include "c3s3/rng.hpp"
#include "c3s3/tensor.hpp"

namespace c3s3 {

struct LossWeights {
  double alpha = 0.8;        // competition: alpha * CE + (1 - alpha) * Dice
  double lambda = 0.1;       // contrastive weight
  double tau = 0.1;          // temperature
  std::size_t n_negatives = 16;
  std::size_t max_anchors = 128;  // per region, per mask pair

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (n_negatives < 1) throw ConfigError("n_negatives must be >= 1");
    if (max_anchors < 1) throw ConfigError("max_anchors must be >= 1");
  }
};

inline constexpr double kDiceSmoothing = 1e-5;
inline constexpr double kProbClamp = 1e-12;

namespace loss_detail {

inline void check_labels(const Tensor& probs, std::span<const std::uint8_t> labels, std::string_view op) {
  if (probs.rank() < 2 || probs.dim(1) != 2) {
    throw ShapeError(std::string(op) + ": expected two-class probabilities [B,2,...], got " + shape_str(probs.shape()));
  }
  if (labels.size() != probs.numel() / 2) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for probabilities " +
                     shape_str(probs.shape()));
  }
  for (auto v : labels) {
    if (v > 1) throw std::invalid_argument(std::string(op) + ": label value " + std::to_string(v) + " outside {0,1}");
  }
}

// Flat index of class `c` at label position `i` (labels are [B, spatial]).
inline std::size_t prob_index(std::size_t i, std::size_t c, std::size_t spatial) {
  const std::size_t b = i / spatial, s = i % spatial;
  return (b * 2 + c) * spatial + s;
}

}  // namespace loss_detail

// ---------------------------------------------------------------------------
// Supervised

/// Mean voxel cross-entropy on probabilities (not logits), with each
/// probability clamped below at 1e-12.
inline Tensor cross_entropy(const Tensor& probs, std::span<const std::uint8_t> labels) {
  loss_detail::check_labels(probs, labels, "cross_entropy");
  const std::size_t spatial = probs.numel() / (2 * probs.dim(0));
  const double n = static_cast<double>(labels.size());
  const auto p = probs.data();
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total -= std::log(std::max(p[loss_detail::prob_index(i, labels[i], spatial)], kProbClamp));
  }
  Tensor out = Tensor::scalar(total / n);
  detail::record("cross_entropy", {&probs}, out,
                 [pi = probs.impl(), oi = out.impl(), lab = std::vector<std::uint8_t>(labels.begin(), labels.end()),
                  spatial, n] {
    double* g = detail::grad_target(pi);
    if (!g) return;
    const double go = oi->grad[0];
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const std::size_t j = loss_detail::prob_index(i, lab[i], spatial);
      if (pi->data[j] > kProbClamp) g[j] -= go / (n * pi->data[j]);
    }
  });
  return out;
}

/// 1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) over the foreground
/// channel of the whole batch.
inline Tensor dice_loss(const Tensor& probs, std::span<const std::uint8_t> labels) {
  loss_detail::check_labels(probs, labels, "dice_loss");
  const std::size_t spatial = probs.numel() / (2 * probs.dim(0));
  const auto p = probs.data();
  double inter = 0.0, psum = 0.0, ysum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double pf = p[loss_detail::prob_index(i, 1, spatial)];
    inter += pf * labels[i];
    psum += pf;
    ysum += labels[i];
  }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = psum + ysum + kDiceSmoothing;
  Tensor out = Tensor::scalar(1.0 - num / den);
  detail::record("dice_loss", {&probs}, out,
                 [pi = probs.impl(), oi = out.impl(), lab = std::vector<std::uint8_t>(labels.begin(), labels.end()),
                  spatial, num, den] {
    double* g = detail::grad_target(pi);
    if (!g) return;
    const double go = oi->grad[0];
    for (std::size_t i = 0; i < lab.size(); ++i) {
      g[loss_detail::prob_index(i, 1, spatial)] -= go * (2.0 * lab[i] * den - num) / (den * den);
    }
  });
  return out;
}

struct SupervisedLoss {
  Tensor ce, dice, total;
};

inline SupervisedLoss supervised_loss(const Tensor& probs, std::span<const std::uint8_t> labels) {
  SupervisedLoss out;
  out.ce = cross_entropy(probs, labels);
  out.dice = dice_loss(probs, labels);
  out.total = add(out.ce, out.dice);
  return out;
}

// ---------------------------------------------------------------------------
// Competition

/// alpha * CE + (1 - alpha) * Dice. Evaluation only; never differentiated.
inline double competition_score(double ce, double dice, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("competition_score: alpha outside [0,1]");
  return alpha * ce + (1.0 - alpha) * dice;
}

inline double competition_score(const Tensor& probs, std::span<const std::uint8_t> labels, double alpha) {
  return competition_score(cross_entropy(stop_gradient(probs), labels).item(),
                           dice_loss(stop_gradient(probs), labels).item(), alpha);
}

enum class Winner { A, B };

inline const char* winner_name(Winner w) { return w == Winner::A ? "A" : "B"; }

/// Strictly lower score wins; ties go to A.
inline Winner select_winner(double score_a, double score_b) {
  if (std::isnan(score_a) || std::isnan(score_b)) {
    throw NumericError("competition", "select_winner: NaN score (A=" + std::to_string(score_a) +
                                          ", B=" + std::to_string(score_b) + ")");
  }
  return score_b < score_a ? Winner::B : Winner::A;
}

// ---------------------------------------------------------------------------
// Pseudo-label and consistency

/// mean((a - b)^2); b must not require gradients.
inline Tensor mse_to_target(const Tensor& a, const Tensor& target) {
  require_same_shape(a, target, "mse");
  const auto x = a.data();
  const auto y = target.data();
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  Tensor out = Tensor::scalar(s / n);
  detail::record("mse", {&a}, out, [ai = a.impl(), ti = target.impl(), oi = out.impl(), n] {
    if (double* g = detail::grad_target(ai)) {
      const double go = oi->grad[0];
      for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += go * 2.0 * (ai->data[i] - ti->data[i]) / n;
    }
  });
  return out;
}

/// Sum over the two augmented views of MSE(student, teacher). Teachers must
/// come from stop_gradient() so no gradient can reach the backbone that
/// produced them.
inline Tensor pseudo_label_loss(const Tensor& student_view1, const Tensor& student_view2,
                                const Tensor& teacher_view1, const Tensor& teacher_view2) {
  if (teacher_view1.requires_grad() || teacher_view2.requires_grad()) {
    throw std::invalid_argument("pseudo_label_loss: teacher predictions must be detached with stop_gradient()");
  }
  return add(mse_to_target(student_view1, teacher_view1), mse_to_target(student_view2, teacher_view2));
}

/// 1 - <a, b> / (|a| |b|) over the flattened tensors.
inline Tensor consistency_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "consistency_loss");
  const auto x = a.data();
  const auto y = b.data();
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw std::invalid_argument("consistency_loss: zero-norm input");
  const double na = std::sqrt(xx), nb = std::sqrt(yy);
  Tensor out = Tensor::scalar(1.0 - dot / (na * nb));
  detail::record("consistency_loss", {&a, &b}, out,
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), dot, na, nb] {
    const double go = oi->grad[0];
    const auto& xv = ai->data;
    const auto& yv = bi->data;
    const double inv = 1.0 / (na * nb);
    if (double* g = detail::grad_target(ai)) {
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] -= go * (yv[i] * inv - dot * xv[i] * inv / (na * na));
    }
    if (double* g = detail::grad_target(bi)) {
      for (std::size_t i = 0; i < yv.size(); ++i) g[i] -= go * (xv[i] * inv - dot * yv[i] * inv / (nb * nb));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive: masks, sampling, and the InfoNCE terms

/// A projector map plus the per-voxel foreground score used to binarize it.
struct FeatureMap {
  Tensor features;                // [B, C, D, H, W]; gradients flow through here
  std::vector<double> foreground; // [B * D * H * W] scores in [0, 1]

  std::size_t positions() const { return foreground.size(); }
  std::size_t channels() const { return features.dim(1); }
};

inline constexpr double kMaskThreshold = 0.5;

/// Foreground probability channel of [B, 2, ...] probabilities, as a flat
/// [B * spatial] vector.
inline std::vector<double> foreground_scores(const Tensor& probs) {
  if (probs.rank() < 2 || probs.dim(1) != 2) {
    throw ShapeError("foreground_scores: expected [B,2,...], got " + shape_str(probs.shape()));
  }
  const std::size_t batch = probs.dim(0), spatial = probs.numel() / (2 * batch);
  std::vector<double> out(batch * spatial);
  const auto p = probs.data();
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(p.begin() + (b * 2 + 1) * spatial, spatial, out.begin() + b * spatial);
  return out;
}

struct MaskPair {
  std::vector<std::uint8_t> intersection;
  std::vector<std::uint8_t> union_;
};

inline MaskPair build_masks(std::span<const double> fg_a, std::span<const double> fg_b) {
  if (fg_a.size() != fg_b.size()) {
    throw ShapeError("build_masks: maps cover " + std::to_string(fg_a.size()) + " and " +
                     std::to_string(fg_b.size()) + " positions");
  }
  MaskPair m;
  m.intersection.resize(fg_a.size());
  m.union_.resize(fg_a.size());
  for (std::size_t i = 0; i < fg_a.size(); ++i) {
    const bool a = fg_a[i] > kMaskThreshold;
    const bool b = fg_b[i] > kMaskThreshold;
    m.intersection[i] = a && b;
    m.union_[i] = a || b;
  }
  return m;
}

inline MaskPair build_masks(const FeatureMap& a, const FeatureMap& b) { return build_masks(a.foreground, b.foreground); }

struct ContrastiveSamples {
  std::vector<std::size_t> anchors;    // flat [B * spatial] positions
  std::vector<std::size_t> negatives;  // anchors.size() * n_negatives positions
  std::size_t n_negatives = 0;
  bool skipped = false;  // anchor or negative region was empty
};

struct SamplePairs {
  ContrastiveSamples foreground, background;
};

namespace loss_detail {

inline ContrastiveSamples sample_region(const std::vector<std::uint8_t>& mask, std::uint8_t anchor_value,
                                        std::size_t n_negatives, std::size_t max_anchors, Rng& rng) {
  std::vector<std::size_t> anchor_region, negative_region;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] == anchor_value ? anchor_region : negative_region).push_back(i);
  ContrastiveSamples s;
  s.n_negatives = n_negatives;
  if (anchor_region.empty() || negative_region.empty()) {
    s.skipped = true;
    return s;
  }
  if (anchor_region.size() <= max_anchors) {
    s.anchors = std::move(anchor_region);
  } else {
    // Partial Fisher-Yates: the first max_anchors slots become a uniform
    // draw without replacement.
    for (std::size_t i = 0; i < max_anchors; ++i) {
      const std::size_t j = i + rng.below(anchor_region.size() - i);
      std::swap(anchor_region[i], anchor_region[j]);
    }
    s.anchors.assign(anchor_region.begin(), anchor_region.begin() + static_cast<std::ptrdiff_t>(max_anchors));
  }
  s.negatives.reserve(s.anchors.size() * n_negatives);
  for (std::size_t a = 0; a < s.anchors.size(); ++a)
    for (std::size_t n = 0; n < n_negatives; ++n) s.negatives.push_back(negative_region[rng.below(negative_region.size())]);
  return s;
}

// Addressing of per-position feature vectors in a [B, C, spatial] map.
struct FeatureGeometry {
  std::size_t channels, spatial;

  std::size_t at(std::size_t pos, std::size_t c) const {
    return ((pos / spatial) * channels + c) * spatial + pos % spatial;
  }
  double norm(std::span<const double> v, std::size_t pos) const {
    double s = 0.0;
    for (std::size_t c = 0; c < channels; ++c) s += v[at(pos, c)] * v[at(pos, c)];
    return std::max(std::sqrt(s), 1e-12);
  }
  double cosine(std::span<const double> u, std::size_t pu, std::span<const double> v, std::size_t pv) const {
    double dot = 0.0;
    for (std::size_t c = 0; c < channels; ++c) dot += u[at(pu, c)] * v[at(pv, c)];
    return dot / (norm(u, pu) * norm(v, pv));
  }
};

}  // namespace loss_detail

/// Foreground anchors come from M_cap = 1 with negatives from M_cap = 0;
/// background anchors from M_cup = 0 with negatives from M_cup = 1. The
/// positive for an anchor is the same position in the other map.
inline SamplePairs sample_pairs(const MaskPair& masks, std::size_t n_negatives, std::size_t max_anchors,
                                std::uint64_t seed) {
  if (masks.intersection.size() != masks.union_.size()) throw ShapeError("sample_pairs: mask sizes differ");
  if (n_negatives < 1) throw std::invalid_argument("sample_pairs: n_negatives must be >= 1");
  SamplePairs out;
  Rng fg_rng(derive_seed(seed, {0}));
  Rng bg_rng(derive_seed(seed, {1}));
  out.foreground = loss_detail::sample_region(masks.intersection, 1, n_negatives, max_anchors, fg_rng);
  out.background = loss_detail::sample_region(masks.union_, 0, n_negatives, max_anchors, bg_rng);
  return out;
}

/// Mean over anchors of
///   -log( e^{cos(a, p)/tau} / (e^{cos(a, p)/tau} + sum_n e^{cos(a, n)/tau}) )
/// where a is the anchor feature in `anchor_map`, p the same position in
/// `other_map`, and n the sampled negative positions in `other_map`.
/// Evaluated with a max-shifted log-sum-exp. Returns a constant zero when
/// `samples` is skipped.
inline Tensor contrastive_loss(const FeatureMap& anchor_map, const FeatureMap& other_map,
                               const ContrastiveSamples& samples, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  if (samples.skipped || samples.anchors.empty()) return Tensor::scalar(0.0);
  const Tensor& fa = anchor_map.features;
  const Tensor& fb = other_map.features;
  require_same_shape(fa, fb, "contrastive_loss");
  const std::size_t channels = fa.dim(1), batch = fa.dim(0);
  const std::size_t spatial = fa.numel() / (channels * batch);
  const std::size_t nneg = samples.n_negatives;
  if (samples.negatives.size() != samples.anchors.size() * nneg) {
    throw std::invalid_argument("contrastive_loss: negatives do not match anchors x n_negatives");
  }

  const loss_detail::FeatureGeometry geo{channels, spatial};
  const auto a = fa.data();
  const auto b = fb.data();
  const std::size_t n_anchor = samples.anchors.size();
  // Softmax weights per (anchor, slot); slot 0 is the positive.
  std::vector<double> weights(n_anchor * (nneg + 1));
  double total = 0.0;
  std::vector<double> logits(nneg + 1);
  for (std::size_t i = 0; i < n_anchor; ++i) {
    const std::size_t pos = samples.anchors[i];
    logits[0] = geo.cosine(a, pos, b, pos) / tau;
    for (std::size_t n = 0; n < nneg; ++n) logits[n + 1] = geo.cosine(a, pos, b, samples.negatives[i * nneg + n]) / tau;
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - m);
    total += m + std::log(z) - logits[0];
    for (std::size_t k = 0; k <= nneg; ++k) weights[i * (nneg + 1) + k] = std::exp(logits[k] - m) / z;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n_anchor));

  detail::record("contrastive_loss", {&fa, &fb}, out,
                 [ai = fa.impl(), bi = fb.impl(), oi = out.impl(), samples, weights = std::move(weights), geo, tau,
                  nneg, n_anchor] {
    double* ga = detail::grad_target(ai);
    double* gb = detail::grad_target(bi);
    if (!ga && !gb) return;
    const auto& av = ai->data;
    const auto& bv = bi->data;
    const double scale = oi->grad[0] / (static_cast<double>(n_anchor) * tau);
    // d cos(u, v) / du = v / (|u||v|) - cos * u / |u|^2
    auto accumulate = [&](std::size_t pu, std::size_t pv, double coeff) {
      const double nu = geo.norm(av, pu), nv = geo.norm(bv, pv);
      double dot = 0.0;
      for (std::size_t c = 0; c < geo.channels; ++c) dot += av[geo.at(pu, c)] * bv[geo.at(pv, c)];
      const double cs = dot / (nu * nv);
      for (std::size_t c = 0; c < geo.channels; ++c) {
        const double u = av[geo.at(pu, c)], v = bv[geo.at(pv, c)];
        if (ga) ga[geo.at(pu, c)] += coeff * (v / (nu * nv) - cs * u / (nu * nu));
        if (gb) gb[geo.at(pv, c)] += coeff * (u / (nu * nv) - cs * v / (nv * nv));
      }
    };
    for (std::size_t i = 0; i < n_anchor; ++i) {
      const std::size_t pos = samples.anchors[i];
      const double* w = weights.data() + i * (nneg + 1);
      accumulate(pos, pos, scale * (w[0] - 1.0));
      for (std::size_t n = 0; n < nneg; ++n) accumulate(pos, samples.negatives[i * nneg + n], scale * w[n + 1]);
    }
  });
  return out;
}

inline Tensor contrastive_loss_fg(const FeatureMap& a, const FeatureMap& b, const SamplePairs& s, double tau) {
  return contrastive_loss(a, b, s.foreground, tau);
}
inline Tensor contrastive_loss_bg(const FeatureMap& a, const FeatureMap& b, const SamplePairs& s, double tau) {
  return contrastive_loss(a, b, s.background, tau);
}

struct IucLoss {
  Tensor total, foreground, background;
  bool foreground_skipped = false;
  bool background_skipped = false;
};

/// Foreground term (averaged over its anchors) plus background term
/// (averaged over its anchors), with masks built from the two maps'
/// foreground scores.
inline IucLoss iuc_loss(const FeatureMap& a, const FeatureMap& b, const LossWeights& w, std::uint64_t seed) {
  const MaskPair masks = build_masks(a, b);
  const SamplePairs samples = sample_pairs(masks, w.n_negatives, w.max_anchors, seed);
  IucLoss out;
  out.foreground = contrastive_loss_fg(a, b, samples, w.tau);
  out.background = contrastive_loss_bg(a, b, samples, w.tau);
  out.foreground_skipped = samples.foreground.skipped;
  out.background_skipped = samples.background.skipped;
  out.total = add(out.foreground, out.background);
  return out;
}

struct DualSpaceLoss {
  Tensor total;
  IucLoss terms[4];  // (A1,B1), (A1,B2), (A2,B1), (A2,B2)
  std::size_t skipped_terms() const {
    std::size_t n = 0;
    for (const auto& t : terms) n += t.foreground_skipped + t.background_skipped;
    return n;
  }
};

/// Sum of iuc_loss over the four cross-backbone pairs of augmented views.
/// All four use the same sampling seed.
inline DualSpaceLoss dual_space_loss(const FeatureMap& a1, const FeatureMap& a2, const FeatureMap& b1,
                                     const FeatureMap& b2, const LossWeights& w, std::uint64_t seed) {
  DualSpaceLoss out;
  out.terms[0] = iuc_loss(a1, b1, w, seed);
  out.terms[1] = iuc_loss(a1, b2, w, seed);
  out.terms[2] = iuc_loss(a2, b1, w, seed);
  out.terms[3] = iuc_loss(a2, b2, w, seed);
  out.total = add(add(add(out.terms[0].total, out.terms[1].total), out.terms[2].total), out.terms[3].total);
  return out;
}

// ---------------------------------------------------------------------------
// Assembly

struct LossParts {
  Tensor seg, cos, cp, all;  // undefined parts count as zero
};

struct LossBreakdown {
  Tensor total;
  double seg = 0.0, cos = 0.0, cp = 0.0, iuc = 0.0;  // iuc is unweighted
  double lambda = 0.0;
  double value() const { return total.item(); }
};

/// seg + cos + cp + lambda * all.
inline LossBreakdown total_loss(const LossParts& parts, double lambda) {
  auto or_zero = [](const Tensor& t) { return t.defined() ? t : Tensor::scalar(0.0); };
  LossBreakdown out;
  out.lambda = lambda;
  const Tensor seg = or_zero(parts.seg), cos = or_zero(parts.cos), cp = or_zero(parts.cp), all = or_zero(parts.all);
  out.seg = seg.item();
  out.cos = cos.item();
  out.cp = cp.item();
  out.iuc = all.item();
  out.total = add(add(add(seg, cos), cp), scale(all, lambda));
  return out;
}

}  // namespace c3s3
