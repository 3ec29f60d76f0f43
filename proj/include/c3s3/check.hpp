#pragma once

// Oracle suites shared by `c3s3 check` and the acceptance runner. Each suite
// draws its own random instances from a fixed seed and reports how many
// failed, with a short description of the first few failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "c3s3/goldens.hpp"
#include "c3s3/losses.hpp"
#include "c3s3/metrics.hpp"
#include "c3s3/networks.hpp"
#include "c3s3/oracles.hpp"
#include "c3s3/trainer.hpp"

namespace c3s3::check {

struct SuiteResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  std::vector<std::string> errors;  // first few failures
  std::vector<std::string> notes;   // per-case summaries
  double seconds = 0.0;

  bool passed() const { return failures == 0 && instances > 0; }

  void fail(std::string what) {
    ++failures;
    if (errors.size() < 12) errors.push_back(std::move(what));
  }
};

struct Options {
  std::size_t gradient_instances = 20;
  std::size_t metric_instances = 100;
  std::size_t mask_instances = 1000;
  std::size_t iuc_instances = 20;
  std::uint64_t seed = 2024;

  static Options quick() { return {5, 20, 200, 5, 2024}; }
  static Options full() { return {}; }
};

namespace detail {

template <class F>
SuiteResult timed(const std::string& name, F&& body) {
  SuiteResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

inline Tensor random_tensor(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  if (grad) t.set_requires_grad();
  return t;
}

// Values bounded away from zero so ReLU kinks stay out of finite-difference
// reach.
inline Tensor away_from_zero(Rng& rng, const Shape& s) {
  Tensor t(s);
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  t.set_requires_grad();
  return t;
}

/// sum(x * r) for a fixed random r: turns any tensor into a scalar with a
/// non-uniform upstream gradient.
inline Tensor project(const Tensor& x, const Tensor& r) { return sum(mul(x, r)); }

inline std::vector<std::uint8_t> random_labels(Rng& rng, std::size_t n, double p = 0.4) {
  std::vector<std::uint8_t> out(n);
  for (auto& v : out) v = rng.uniform() < p;
  return out;
}

inline BackboneConfig tiny_backbone(bool residual) {
  BackboneConfig c;
  c.base_channels = 2;
  c.depth = 1;
  c.projector_dim = 2;
  c.residual = residual;
  return c;
}

// Default init zeroes biases, so a voxel whose ReLU features are all dead
// gets an exactly zero projection (where normalization is singular) and
// foreground probability exactly 0.5 (on the mask threshold). Gradient
// checks sample generic points instead.
inline void randomize_biases(Backbone& net, Rng& rng) {
  for (auto& p : net.parameters()) {
    if (p.value.rank() == 1) {
      for (auto& v : p.value.data()) v = rng.uniform(-0.3, 0.3);
    }
  }
}

inline std::vector<Tensor> parameter_tensors(Backbone& net) {
  std::vector<Tensor> out;
  for (auto& p : net.parameters()) out.push_back(p.value);
  return out;
}

/// Random foreground scores with a guaranteed mix of agreeing foreground,
/// agreeing background, and disagreement so every region is populated.
inline std::pair<std::vector<double>, std::vector<double>> mixed_scores(Rng& rng, std::size_t n) {
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t kind = i < 3 ? i : rng.below(3);
    const double hi = rng.uniform(0.55, 1.0), lo = rng.uniform(0.0, 0.45);
    a[i] = kind == 0 ? hi : lo;
    b[i] = kind == 0 ? rng.uniform(0.55, 1.0) : (kind == 1 ? rng.uniform(0.0, 0.45) : rng.uniform(0.55, 1.0));
  }
  return {a, b};
}

/// A differentiable scalar built from owned leaves.
struct GradInstance {
  std::vector<Tensor> leaves;
  std::function<Tensor()> loss;
  std::function<std::uint64_t()> piece;
  std::size_t max_coords = 0;
  std::shared_ptr<void> keep_alive;

  oracle::GradCheckProblem problem() {
    oracle::GradCheckProblem p;
    for (auto& t : leaves) p.inputs.push_back(&t);
    p.loss = loss;
    p.piece = piece;
    return p;
  }
};

struct GradCase {
  std::string name;
  std::function<GradInstance(Rng&)> make;
};

inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op, bool kink = false) {
    cases.push_back({name, [op, kink](Rng& rng) {
                       const Shape s{2, 3, 2, 2, 4};
                       Tensor x = kink ? away_from_zero(rng, s) : random_tensor(rng, s);
                       Tensor r = random_tensor(rng, op(x).shape(), -1, 1, false);
                       return GradInstance{{x}, [op, x, r] { return project(op(x), r); }, {}, 0, nullptr};
                     }});
  };
  auto binary = [&](std::string name, Shape sb, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    cases.push_back({name, [op, sb](Rng& rng) {
                       Tensor a = random_tensor(rng, {2, 3, 2, 2, 2});
                       Tensor b = random_tensor(rng, sb);
                       Tensor r = random_tensor(rng, op(a, b).shape(), -1, 1, false);
                       return GradInstance{{a, b}, [op, a, b, r] { return project(op(a, b), r); }, {}, 0, nullptr};
                     }});
  };
  binary("add", {2, 3, 2, 2, 2}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("add_scalar", {1}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("add_channel", {3}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", {2, 3, 2, 2, 2}, [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", {2, 3, 2, 2, 2}, [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  binary("mul_channel", {3}, [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  unary("relu", [](const Tensor& x) { return relu(x); }, true);
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  unary("softmax_channel", [](const Tensor& x) { return softmax_channel(scale(x, 3.0)); });
  unary("normalize_channel", [](const Tensor& x) { return normalize_channel(x); }, true);
  unary("sum", [](const Tensor& x) { return sum(x); });
  unary("mean", [](const Tensor& x) { return mean(mul(x, x)); });
  unary("slice_batch", [](const Tensor& x) { return slice_batch(x, 1, 2); });
  unary("avg_pool3d", [](const Tensor& x) { return avg_pool3d(x, 2); });
  unary("nearest_upsample3d", [](const Tensor& x) { return nearest_upsample3d(x, 2); });
  unary("flip_spatial", [](const Tensor& x) { return flip_spatial(x, {2, 0}); });
  binary("concat_channel", {2, 2, 2, 2, 2}, [](const Tensor& a, const Tensor& b) { return concat_channel(a, b); });

  auto conv_case = [&](std::string name, std::size_t ks, bool with_bias) {
    cases.push_back({name, [ks, with_bias](Rng& rng) {
                       Tensor x = random_tensor(rng, {2, 3, 3, 4, 5});
                       Tensor w = random_tensor(rng, {4, 3, ks, ks, ks});
                       Tensor b = with_bias ? random_tensor(rng, {4}) : Tensor();
                       Tensor r = random_tensor(rng, {2, 4, 3, 4, 5}, -1, 1, false);
                       std::vector<Tensor> leaves{x, w};
                       if (with_bias) leaves.push_back(b);
                       return GradInstance{leaves, [x, w, b, r] { return project(conv3d(x, w, b), r); }, {}, 0, nullptr};
                     }});
  };
  conv_case("conv3d_k3", 3, true);
  conv_case("conv3d_k1", 1, true);
  conv_case("conv3d_k3_nobias", 3, false);

  cases.push_back({"cross_entropy", [](Rng& rng) {
                     Tensor z = random_tensor(rng, {2, 2, 2, 2, 3}, -2, 2);
                     auto labels = random_labels(rng, 2 * 12);
                     return GradInstance{{z}, [z, labels] { return cross_entropy(softmax_channel(z), labels); }, {}, 0, nullptr};
                   }});
  cases.push_back({"dice_loss", [](Rng& rng) {
                     Tensor z = random_tensor(rng, {2, 2, 2, 2, 3}, -2, 2);
                     auto labels = random_labels(rng, 2 * 12);
                     return GradInstance{{z}, [z, labels] { return dice_loss(softmax_channel(z), labels); }, {}, 0, nullptr};
                   }});
  cases.push_back({"mse_to_target", [](Rng& rng) {
                     Tensor x = random_tensor(rng, {2, 2, 2, 2, 2});
                     Tensor t = random_tensor(rng, {2, 2, 2, 2, 2}, 0, 1, false);
                     return GradInstance{{x}, [x, t] { return mse_to_target(x, t); }, {}, 0, nullptr};
                   }});
  cases.push_back({"consistency_loss", [](Rng& rng) {
                     Tensor a = random_tensor(rng, {2, 2, 2, 2, 2});
                     Tensor b = random_tensor(rng, {2, 2, 2, 2, 2});
                     return GradInstance{{a, b}, [a, b] { return consistency_loss(a, b); }, {}, 0, nullptr};
                   }});

  // Contrastive terms on unit-normalized projector maps.
  auto feature_case = [&](std::string name, int which) {
    cases.push_back({name, [which](Rng& rng) {
                       const Shape s{2, 3, 2, 2, 2};
                       std::vector<Tensor> raw;
                       for (int i = 0; i < (which == 2 ? 4 : 2); ++i) raw.push_back(random_tensor(rng, s));
                       std::vector<std::vector<double>> fg;
                       for (std::size_t i = 0; i < raw.size(); i += 2) {
                         auto [x, y] = mixed_scores(rng, 16);
                         fg.push_back(x);
                         fg.push_back(y);
                       }
                       LossWeights w;
                       w.tau = rng.uniform(0.1, 1.0);
                       w.n_negatives = 4;
                       w.max_anchors = 5;
                       const std::uint64_t seed = rng.next_u64();
                       auto loss = [raw, fg, w, seed, which] {
                         std::vector<FeatureMap> maps;
                         for (std::size_t i = 0; i < raw.size(); ++i) maps.push_back({normalize_channel(raw[i]), fg[i]});
                         if (which == 2) return dual_space_loss(maps[0], maps[1], maps[2], maps[3], w, seed).total;
                         const auto samples = sample_pairs(build_masks(maps[0], maps[1]), w.n_negatives, w.max_anchors, seed);
                         return which == 0 ? contrastive_loss_fg(maps[0], maps[1], samples, w.tau)
                                           : contrastive_loss_bg(maps[0], maps[1], samples, w.tau);
                       };
                       return GradInstance{raw, loss, {}, 0, nullptr};
                     }});
  };
  feature_case("L_iuc1", 0);
  feature_case("L_iuc2", 1);
  feature_case("L_all", 2);

  // Composite losses through two tiny backbones.
  auto net_case = [&](std::string name, int which) {
    cases.push_back({name, [which](Rng& rng) {
                       auto nets = std::make_shared<std::pair<Backbone, Backbone>>(Backbone(tiny_backbone(false)),
                                                                                  Backbone(tiny_backbone(true)));
                       nets->first.init_parameters(rng.next_u64());
                       nets->second.init_parameters(rng.next_u64());
                       randomize_biases(nets->first, rng);
                       randomize_biases(nets->second, rng);
                       Tensor x = random_tensor(rng, {2, 1, 4, 4, 4}, 0, 1, false);
                       auto labels = random_labels(rng, 2 * 64);
                       const std::vector<int> axes{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
                       std::vector<Tensor> leaves = parameter_tensors(nets->first);
                       if (which != 2) {
                         auto more = parameter_tensors(nets->second);
                         leaves.insert(leaves.end(), more.begin(), more.end());
                       }
                       auto loss = [nets, x, labels, axes, which]() -> Tensor {
                         const auto& [a, b] = *nets;
                         if (which == 0) {
                           return add(supervised_loss(a.forward(x).probs, labels).total,
                                      supervised_loss(b.forward(x).probs, labels).total);
                         }
                         const Tensor xf = flip_spatial(x, axes);
                         auto view = [&](const Backbone& n, bool flipped) {
                           return flipped ? flip_spatial(n.forward(xf).probs, axes) : n.forward(x).probs;
                         };
                         if (which == 1) {
                           return add(consistency_loss(view(a, false), view(a, true)),
                                      consistency_loss(view(b, false), view(b, true)));
                         }
                         // which == 2: B teaches A; only A's parameters are checked.
                         return pseudo_label_loss(view(a, false), view(a, true), stop_gradient(view(b, false)),
                                                  stop_gradient(view(b, true)));
                       };
                       return GradInstance{leaves, loss, {}, 48, nets};
                     }});
  };
  net_case("L_seg", 0);
  net_case("L_cos", 1);
  net_case("L_cp", 2);

  cases.push_back({"L_total", [](Rng& rng) {
                     struct Ctx {
                       TrainState state;
                       DataSplit split;
                       Batch batch;
                       std::shared_ptr<StepGraph> graph, base;
                     };
                     TrainingConfig cfg;
                     cfg.network = {2, 1, 2};
                     cfg.batch_labeled = 1;
                     cfg.batch_unlabeled = 1;
                     cfg.seed = rng.next_u64();
                     cfg.weights.n_negatives = 4;
                     cfg.weights.max_anchors = 8;
                     cfg.weights.lambda = 0.5;
                     auto ctx = std::make_shared<Ctx>(Ctx{TrainState(cfg), {}, {}, nullptr, nullptr});
                     randomize_biases(ctx->state.a, rng);
                     randomize_biases(ctx->state.b, rng);
                     for (int i = 0; i < 2; ++i) {
                       Sample s{Volume({4, 4, 4}), LabelVolume({4, 4, 4})};
                       for (auto& v : s.image.voxels) v = static_cast<float>(rng.uniform());
                       for (auto& v : s.label.voxels) v = rng.uniform() < 0.4;
                       ctx->split.labeled.push_back(s);
                       Volume u({4, 4, 4});
                       for (auto& v : u.voxels) v = static_cast<float>(rng.uniform());
                       ctx->split.unlabeled.push_back(u);
                     }
                     ctx->batch = draw_batch(ctx->split, cfg, 0);
                     std::vector<Tensor> leaves;
                     for (auto* t : ctx->state.parameter_list()) leaves.push_back(*t);
                     // The first call fixes the detached pseudo-labels; later
                     // calls reuse them.
                     auto loss = [ctx] {
                       auto g = std::make_shared<StepGraph>(forward_step(ctx->state, ctx->batch, ctx->base.get()));
                       if (!ctx->base) ctx->base = g;
                       ctx->graph = g;
                       return g->loss.total;
                     };
                     auto piece = [ctx] { return ctx->graph->piece; };
                     return GradInstance{leaves, loss, piece, 48, ctx};
                   }});
  return cases;
}

}  // namespace detail

/// Central finite differences against every backward rule and every loss.
inline SuiteResult gradient_suite(const Options& o) {
  return detail::timed("gradient", [&](SuiteResult& r) {
    for (auto& c : detail::gradient_cases()) {
      Rng rng(derive_seed(o.seed, {fnv1a64(c.name.data(), c.name.size())}));
      double worst = 0.0;
      std::size_t skipped = 0, case_failures = 0;
      for (std::size_t i = 0; i < o.gradient_instances; ++i) {
        auto inst = c.make(rng);
        const auto res = oracle::grad_check(inst.problem(), inst.max_coords, rng.next_u64());
        ++r.instances;
        skipped += res.discontinuous;
        worst = std::max(worst, res.relative_error);
        if (!(res.relative_error < oracle::kGradRelativeTolerance) || res.coordinates == 0) {
          ++case_failures;
          r.fail(c.name + ": instance " + std::to_string(i) +
                 detail::fmt(" relative error %.3e over %.0f coordinates", res.relative_error,
                             static_cast<double>(res.coordinates)));
        }
      }
      char note[200];
      std::snprintf(note, sizeof note, "%-20s %s  worst rel err %.2e%s", c.name.c_str(),
                    case_failures ? "FAIL" : "ok  ", worst,
                    skipped ? (" (" + std::to_string(skipped) + " coords on a kink skipped)").c_str() : "");
      r.notes.push_back(note);
    }
  });
}

/// Fast convolution against the direct seven-loop form.
inline SuiteResult conv_suite(const Options& o) {
  return detail::timed("conv-oracle", [&](SuiteResult& r) {
    Rng rng(derive_seed(o.seed, {11}));
    for (std::size_t i = 0; i < o.iuc_instances; ++i) {
      const std::size_t ks = rng.uniform() < 0.5 ? 3 : 1;
      const Shape xs{1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(11)};
      const Shape ws{1 + rng.below(6), xs[1], ks, ks, ks};
      Tensor x = detail::random_tensor(rng, xs, -1, 1, false);
      Tensor w = detail::random_tensor(rng, ws, -1, 1, false);
      Tensor b = detail::random_tensor(rng, {ws[0]}, -1, 1, false);
      const auto fast = conv3d(x, w, b).values();
      const auto slow = oracle::conv3d_naive(x.values(), xs, w.values(), ws, b.values());
      double err = 0.0;
      for (std::size_t j = 0; j < fast.size(); ++j) err = std::max(err, std::abs(fast[j] - slow[j]));
      ++r.instances;
      if (err > 1e-12) r.fail("conv3d " + shape_str(xs) + " * " + shape_str(ws) + detail::fmt(": max diff %.3e", err));
    }
  });
}

/// Accelerated surface distances against all-pairs search, the Dice/Jaccard
/// identity, and the single-voxel distance case.
inline SuiteResult metric_suite(const Options& o) {
  return detail::timed("metric", [&](SuiteResult& r) {
    Rng rng(derive_seed(o.seed, {12}));
    const Extent3 s{12, 12, 12};
    for (std::size_t i = 0; i < o.metric_instances; ++i) {
      LabelVolume p(s), t(s);
      const double fp = rng.uniform(0.05, 0.6), ft = rng.uniform(0.05, 0.6);
      for (auto& v : p.voxels) v = rng.uniform() < fp;
      for (auto& v : t.voxels) v = rng.uniform() < ft;
      ++r.instances;
      const auto fast = hd95_asd(p, t);
      const auto slow = oracle::hd95_asd_brute(p, t);
      if (fast.has_value() != slow.has_value()) {
        r.fail("instance " + std::to_string(i) + ": defined-ness differs");
        continue;
      }
      if (fast && (std::abs(fast->hd95 - slow->hd95) > 1e-9 || std::abs(fast->asd - slow->asd) > 1e-9)) {
        r.fail("instance " + std::to_string(i) + detail::fmt(": hd95 diff %.3e, asd diff %.3e",
                                                             fast->hd95 - slow->hd95, fast->asd - slow->asd));
      }
      const auto ov = dice_jaccard(p, t);
      if (std::abs(ov.jaccard - ov.dice / (2.0 - ov.dice)) > 1e-12) {
        r.fail("instance " + std::to_string(i) + ": jaccard != dice / (2 - dice)");
      }
    }
    LabelVolume a(s), b(s);
    a.at(5, 5, 2) = 1;
    b.at(5, 5, 5) = 1;
    const auto d = hd95_asd(a, b);
    ++r.instances;
    if (!d || d->hd95 != 3.0 || d->asd != 3.0) r.fail("single voxels 3 apart: expected hd95 = asd = 3 exactly");
  });
}

/// Intersection/union mask algebra and the region membership of samples.
inline SuiteResult mask_suite(const Options& o) {
  return detail::timed("mask-algebra", [&](SuiteResult& r) {
    Rng rng(derive_seed(o.seed, {13}));
    for (std::size_t i = 0; i < o.mask_instances; ++i) {
      const std::size_t n = 1 + rng.below(200);
      std::vector<double> a(n), b(n);
      const double pa = rng.uniform(), pb = rng.uniform();
      for (std::size_t j = 0; j < n; ++j) {
        a[j] = rng.uniform() < pa ? rng.uniform(0.5000001, 1.0) : rng.uniform(0.0, 0.5);
        b[j] = rng.uniform() < pb ? rng.uniform(0.5000001, 1.0) : rng.uniform(0.0, 0.5);
      }
      ++r.instances;
      const auto m = build_masks(a, b);
      const auto same = build_masks(a, a);
      std::size_t violations = 0;
      for (std::size_t j = 0; j < n; ++j) {
        violations += m.intersection[j] > m.union_[j];
        violations += m.intersection[j] && !m.union_[j];
        violations += same.intersection[j] != same.union_[j] || same.intersection[j] != (a[j] > 0.5);
      }
      const auto sp = sample_pairs(m, 3, 7, rng.next_u64());
      for (auto x : sp.foreground.anchors) violations += !m.intersection[x];
      for (auto x : sp.foreground.negatives) violations += m.intersection[x];
      for (auto x : sp.background.anchors) violations += m.union_[x];
      for (auto x : sp.background.negatives) violations += !m.union_[x];
      if (violations) r.fail("instance " + std::to_string(i) + ": " + std::to_string(violations) + " violations");
    }
  });
}

/// iuc_loss against the step-by-step reference, plus the pinned golden value.
inline SuiteResult iuc_suite(const Options& o) {
  return detail::timed("iuc-golden", [&](SuiteResult& r) {
    Rng rng(derive_seed(o.seed, {14}));
    for (std::size_t i = 0; i < o.iuc_instances; ++i) {
      const std::size_t batch = 1 + rng.below(2), channels = 2 + rng.below(4), spatial = 27;
      const Shape s{batch, channels, 3, 3, 3};
      Tensor fa = normalize_channel(detail::random_tensor(rng, s, -1, 1, false));
      Tensor fb = normalize_channel(detail::random_tensor(rng, s, -1, 1, false));
      auto [ga, gb] = detail::mixed_scores(rng, batch * spatial);
      LossWeights w;
      w.tau = rng.uniform(0.05, 1.0);
      w.n_negatives = 1 + rng.below(20);
      w.max_anchors = 1 + rng.below(30);
      const std::uint64_t seed = rng.next_u64();
      const auto fast = iuc_loss({fa, ga}, {fb, gb}, w, seed);
      const auto ref = oracle::iuc_reference(fa.values(), fb.values(), batch, channels, spatial, ga, gb, w, seed);
      ++r.instances;
      if (std::abs(fast.total.item() - ref.total()) > 1e-10 * std::max(1.0, std::abs(ref.total()))) {
        r.fail("instance " + std::to_string(i) + detail::fmt(": %.17g vs reference %.17g", fast.total.item(), ref.total()));
      }
    }
    const auto g = golden::iuc_instance();
    const double value = iuc_loss(g.a, g.b, LossWeights{}, golden::kIucSeed).total.item();
    ++r.instances;
    if (std::abs(value - golden::kIuc4Cubed) > 1e-12) {
      r.fail(detail::fmt("golden 4^3 instance: %.17g, pinned %.17g", value, golden::kIuc4Cubed));
    }
  });
}

/// The single-anchor closed form and monotonicity in the positive cosine.
inline SuiteResult contrastive_suite(const Options&) {
  return detail::timed("contrastive-closed-form", [](SuiteResult& r) {
    auto single = [](double pos_cos, double tau) {
      const double sn = std::sqrt(std::max(0.0, 1.0 - pos_cos * pos_cos));
      // Channel-major [1, 2, 1, 1, 2]: position 0 holds the anchor/positive,
      // position 1 the orthogonal negative.
      FeatureMap a{Tensor({1, 2, 1, 1, 2}, {1.0, 0.0, 0.0, 1.0}), {1.0, 0.0}};
      FeatureMap b{Tensor({1, 2, 1, 1, 2}, {pos_cos, 0.0, sn, 1.0}), {1.0, 0.0}};
      ContrastiveSamples s;
      s.anchors = {0};
      s.negatives = {1};
      s.n_negatives = 1;
      return contrastive_loss(a, b, s, tau).item();
    };
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    ++r.instances;
    if (std::abs(single(1.0, 1.0) - expected) > 1e-12) {
      r.fail(detail::fmt("single anchor: %.17g, expected %.17g", single(1.0, 1.0), expected));
    }
    double previous = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 50; ++i) {
      const double c = -1.0 + 2.0 * i / 49.0;
      const double v = single(c, 0.5);
      ++r.instances;
      if (!(v < previous)) r.fail(detail::fmt("not decreasing at positive cosine %.4f (%.17g)", c, v));
      previous = v;
    }
  });
}

/// With pseudo-label supervision on, the pseudo-label term sends no gradient
/// into the winning backbone and some gradient into the loser.
inline SuiteResult stop_gradient_suite(const Options& o) {
  return detail::timed("stop-gradient", [&](SuiteResult& r) {
    Rng rng(derive_seed(o.seed, {15}));
    for (std::size_t i = 0; i < 4; ++i) {
      TrainingConfig cfg;
      cfg.network = {2, 1, 2};
      cfg.seed = rng.next_u64();
      TrainState state(cfg);
      DataSplit split;
      for (int k = 0; k < 2; ++k) {
        Sample s{Volume({8, 8, 8}), LabelVolume({8, 8, 8})};
        for (auto& v : s.image.voxels) v = static_cast<float>(rng.uniform());
        for (auto& v : s.label.voxels) v = rng.uniform() < 0.3;
        split.labeled.push_back(s);
        split.unlabeled.push_back(s.image);
      }
      StepGraph g = forward_step(state, draw_batch(split, cfg, 0));
      for (auto* p : state.parameter_list()) p->zero_grad();
      backward(g.cp);
      const Backbone& winner = g.winner == Winner::A ? state.a : state.b;
      const Backbone& loser = g.winner == Winner::A ? state.b : state.a;
      std::size_t nonzero_winner = 0, nonzero_loser = 0;
      for (const auto& p : winner.parameters())
        for (double v : p.value.grad_values()) nonzero_winner += v != 0.0;
      for (const auto& p : loser.parameters())
        for (double v : p.value.grad_values()) nonzero_loser += v != 0.0;
      ++r.instances;
      if (nonzero_winner) {
        r.fail("run " + std::to_string(i) + ": winner " + winner_name(g.winner) + " received " +
               std::to_string(nonzero_winner) + " nonzero gradient entries from the pseudo-label loss");
      }
      if (!nonzero_loser) r.fail("run " + std::to_string(i) + ": loser received no gradient at all");
    }
  });
}

inline std::vector<SuiteResult> run_all(const Options& o) {
  return {gradient_suite(o), conv_suite(o),     metric_suite(o),        mask_suite(o),
          iuc_suite(o),      contrastive_suite(o), stop_gradient_suite(o)};
}

inline void print_table(std::FILE* out, const std::vector<SuiteResult>& results, bool verbose) {
  std::fprintf(out, "%-26s %-6s %10s %9s %9s\n", "suite", "status", "instances", "failures", "seconds");
  for (const auto& r : results) {
    std::fprintf(out, "%-26s %-6s %10zu %9zu %9.2f\n", r.name.c_str(), r.passed() ? "PASS" : "FAIL", r.instances,
                 r.failures, r.seconds);
    for (const auto& e : r.errors) std::fprintf(out, "    failed: %s\n", e.c_str());
    if (verbose) {
      for (const auto& n : r.notes) std::fprintf(out, "    %s\n", n.c_str());
    }
  }
}

}  // namespace c3s3::check
