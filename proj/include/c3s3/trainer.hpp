#pragma once

// Dual-backbone semi-supervised training loop.
//
// Each step augments the batch twice, runs both backbones on both views,
// and combines: supervised CE + Dice on labeled samples, per-backbone
// cosine consistency between views, pseudo-label MSE from the backbone with
// the better weighted competition score to the other one, and the
// dual-space intersection/union contrastive loss on unlabeled samples.
// Both backbones are updated by a single optimizer every step.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3s3/error.hpp"
#include "c3s3/losses.hpp"
#include "c3s3/metrics.hpp"
#include "c3s3/networks.hpp"
#include "c3s3/optimizer.hpp"
#include "c3s3/rng.hpp"
#include "c3s3/tensor.hpp"
#include "c3s3/volumes.hpp"

namespace c3s3 {

struct AblationFlags {
  bool enable_odcl = true;
  bool enable_dcc = true;
  bool enable_consistency = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Shared shape of both backbones; B differs from A only by residual blocks.
struct NetworkShape {
  std::size_t base_channels = 8;
  std::size_t depth = 2;
  std::size_t projector_dim = 8;

  BackboneConfig backbone(bool residual) const {
    BackboneConfig c;
    c.base_channels = base_channels;
    c.depth = depth;
    c.projector_dim = projector_dim;
    c.residual = residual;
    return c;
  }
};

struct TrainingConfig {
  LossWeights weights;
  std::size_t steps = 500;
  std::size_t batch_labeled = 2;
  std::size_t batch_unlabeled = 2;
  double learning_rate = 0.01;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  std::uint64_t seed = 0;
  std::size_t competition_window = 1;
  AblationFlags ablation;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  NetworkShape network;
  double noise_sigma = 0.05;  // intensity-noise augmentation stddev

  void validate() const {
    weights.validate();
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_labeled < 1) throw ConfigError("batch_labeled must be >= 1");
    if (batch_unlabeled < 1) throw ConfigError("batch_unlabeled must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (competition_window < 1) throw ConfigError("competition_window must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    network.backbone(false).validate();
  }
};

// ---------------------------------------------------------------------------
// JSON mirror of TrainingConfig. Unknown keys are rejected at every level.

namespace trainer_detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
    // nlohmann would silently truncate 2.5 or wrap -1 for unsigned targets.
    if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<std::int64_t>() < 0)) {
      throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
    }
  }
  try {
    out = v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace trainer_detail

inline nlohmann::json config_to_json(const TrainingConfig& c) {
  return {
      {"weights",
       {{"alpha", c.weights.alpha},
        {"lambda", c.weights.lambda},
        {"tau", c.weights.tau},
        {"n_negatives", c.weights.n_negatives},
        {"max_anchors", c.weights.max_anchors}}},
      {"steps", c.steps},
      {"batch_labeled", c.batch_labeled},
      {"batch_unlabeled", c.batch_unlabeled},
      {"learning_rate", c.learning_rate},
      {"optimizer", optimizer_name(c.optimizer)},
      {"seed", c.seed},
      {"competition_window", c.competition_window},
      {"ablation",
       {{"enable_odcl", c.ablation.enable_odcl},
        {"enable_dcc", c.ablation.enable_dcc},
        {"enable_consistency", c.ablation.enable_consistency}}},
      {"eval_every", c.eval_every},
      {"network",
       {{"base_channels", c.network.base_channels},
        {"depth", c.network.depth},
        {"projector_dim", c.network.projector_dim}}},
      {"noise_sigma", c.noise_sigma},
  };
}

/// Missing keys keep their defaults; unknown keys and bad types throw
/// ConfigError; the result is validated.
inline TrainingConfig config_from_json(const nlohmann::json& j) {
  using trainer_detail::read;
  trainer_detail::reject_unknown(j,
                                 {"weights", "steps", "batch_labeled", "batch_unlabeled", "learning_rate", "optimizer",
                                  "seed", "competition_window", "ablation", "eval_every", "network", "noise_sigma"},
                                 "config");
  TrainingConfig c;
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    trainer_detail::reject_unknown(w, {"alpha", "lambda", "tau", "n_negatives", "max_anchors"}, "weights");
    read(w, "alpha", c.weights.alpha);
    read(w, "lambda", c.weights.lambda);
    read(w, "tau", c.weights.tau);
    read(w, "n_negatives", c.weights.n_negatives);
    read(w, "max_anchors", c.weights.max_anchors);
  }
  read(j, "steps", c.steps);
  read(j, "batch_labeled", c.batch_labeled);
  read(j, "batch_unlabeled", c.batch_unlabeled);
  read(j, "learning_rate", c.learning_rate);
  if (j.contains("optimizer")) {
    std::string name;
    read(j, "optimizer", name);
    c.optimizer = parse_optimizer(name);
  }
  read(j, "seed", c.seed);
  read(j, "competition_window", c.competition_window);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    trainer_detail::reject_unknown(a, {"enable_odcl", "enable_dcc", "enable_consistency"}, "ablation");
    read(a, "enable_odcl", c.ablation.enable_odcl);
    read(a, "enable_dcc", c.ablation.enable_dcc);
    read(a, "enable_consistency", c.ablation.enable_consistency);
  }
  read(j, "eval_every", c.eval_every);
  if (j.contains("network")) {
    const auto& n = j.at("network");
    trainer_detail::reject_unknown(n, {"base_channels", "depth", "projector_dim"}, "network");
    read(n, "base_channels", c.network.base_channels);
    read(n, "depth", c.network.depth);
    read(n, "projector_dim", c.network.projector_dim);
  }
  read(j, "noise_sigma", c.noise_sigma);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// State and step records

struct TrainState {
  TrainingConfig config;
  Backbone a;
  Backbone b;
  Optimizer optimizer;
  std::size_t step = 0;
  std::deque<std::pair<double, double>> competition_history;  // (score A, score B), newest last

  explicit TrainState(const TrainingConfig& c)
      : config(c),
        a(c.network.backbone(false)),
        b(c.network.backbone(true)),
        optimizer(c.optimizer, c.learning_rate) {
    config.validate();
    a.init_parameters(derive_seed(c.seed, {kStreamInitA}));
    b.init_parameters(derive_seed(c.seed, {kStreamInitB}));
  }

  /// A's parameters followed by B's, in declaration order.
  std::vector<Tensor*> parameter_list() {
    std::vector<Tensor*> out;
    for (auto& p : a.parameters()) out.push_back(&p.value);
    for (auto& p : b.parameters()) out.push_back(&p.value);
    return out;
  }
};

struct StepRecord {
  std::size_t step = 0;
  double seg = 0.0, cos = 0.0, cp = 0.0, iuc = 0.0, total = 0.0;
  double lambda = 0.0;
  Winner winner = Winner::A;
  double score_a = 0.0, score_b = 0.0;  // windowed competition scores
  std::size_t skipped_contrastive_terms = 0;

  double component_sum() const { return seg + cos + cp + lambda * iuc; }
};

struct Batch {
  std::vector<const Sample*> labeled;
  std::vector<const Volume*> unlabeled;
  std::size_t size() const { return labeled.size() + unlabeled.size(); }
};

namespace trainer_detail {

// k distinct indices from [0, n) when k <= n, otherwise uniform with
// replacement.
inline std::vector<std::size_t> draw_indices(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  if (k <= n) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + rng.below(n - i)]);
      out.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < k; ++i) out.push_back(rng.below(n));
  }
  return out;
}

}  // namespace trainer_detail

/// The batch for `step` depends only on (seed, step). A split without
/// unlabeled volumes is accepted only when neither pseudo-labels nor the
/// contrastive term need them; the batch is then labeled-only.
inline Batch draw_batch(const DataSplit& split, const TrainingConfig& config, std::size_t step) {
  if (split.labeled.empty()) throw DataError("training split has no labeled samples");
  const bool needs_unlabeled = config.ablation.enable_dcc || config.ablation.enable_odcl;
  if (split.unlabeled.empty() && needs_unlabeled) throw DataError("training split has no unlabeled samples");
  Rng rng(derive_seed(config.seed, {kStreamData, step}));
  Batch batch;
  for (auto i : trainer_detail::draw_indices(rng, split.labeled.size(), config.batch_labeled)) {
    batch.labeled.push_back(&split.labeled[i]);
  }
  if (split.unlabeled.empty()) return batch;
  for (auto i : trainer_detail::draw_indices(rng, split.unlabeled.size(), config.batch_unlabeled)) {
    batch.unlabeled.push_back(&split.unlabeled[i]);
  }
  return batch;
}

/// One augmented view of a batch: the input tensor and, per sample, the flip
/// axis that was applied (-1 for none). Predictions are flipped back with
/// the same axes so all views share the original voxel grid.
struct View {
  Tensor input;
  std::vector<int> flip_axes;
};

inline View make_view(const Batch& batch, const TrainingConfig& config, std::size_t step, std::size_t view_index) {
  Rng rng(derive_seed(config.seed, {kStreamAugment, step, view_index}));
  std::vector<const Volume*> images;
  for (const auto* s : batch.labeled) images.push_back(&s->image);
  for (const auto* v : batch.unlabeled) images.push_back(v);
  const Extent3 shape = images.front()->shape;
  const std::size_t spatial = extent_numel(shape);
  View view{Tensor({images.size(), 1, shape[0], shape[1], shape[2]}), {}};
  auto data = view.input.data();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape != shape) throw ShapeError("batch volumes differ in shape");
    const int axis = static_cast<int>(rng.below(4)) - 1;
    const std::uint64_t noise_seed = rng.next_u64();
    Volume v = *images[i];
    if (axis >= 0) v = augment(v, std::nullopt, Augmentation::flip(axis)).image;
    v = augment(v, std::nullopt, Augmentation::noise(config.noise_sigma, noise_seed)).image;
    for (std::size_t j = 0; j < spatial; ++j) data[i * spatial + j] = v.voxels[j];
    view.flip_axes.push_back(axis);
  }
  return view;
}

/// Everything a step computes before backward, kept alive by its own tape.
struct StepGraph {
  std::unique_ptr<Tape> tape = std::make_unique<Tape>();
  Tensor seg, cos, cp, all;  // cp/all/cos undefined when disabled
  Tensor teacher[2];         // detached pseudo-labels per view, when enabled
  LossBreakdown loss;
  Winner winner = Winner::A;
  double score_a = 0.0, score_b = 0.0;
  std::size_t skipped_contrastive_terms = 0;
  // Fingerprint of the step's discrete choices (winner, binarized foreground
  // maps). Nearby parameters with the same fingerprint share one smooth
  // piece of the loss.
  std::uint64_t piece = 0;
};

namespace trainer_detail {

inline void require_finite(double v, const char* component) {
  if (!std::isfinite(v)) throw NumericError(component, std::string("non-finite ") + component + " loss");
}

inline std::vector<std::uint8_t> batch_labels(const Batch& batch) {
  std::vector<std::uint8_t> out;
  for (const auto* s : batch.labeled) out.insert(out.end(), s->label.voxels.begin(), s->label.voxels.end());
  return out;
}

}  // namespace trainer_detail

/// Forward pass and loss assembly for one step, recorded on the returned
/// graph's tape. Updates the competition window in `state`.
///
/// `frozen_teacher`, if given, replaces the detached pseudo-labels with those
/// of an earlier graph. Finite-difference checks use it so that perturbing
/// the parameters does not move targets the analytic gradient treats as
/// constants.
inline StepGraph forward_step(TrainState& state, const Batch& batch, const StepGraph* frozen_teacher = nullptr) {
  const auto& cfg = state.config;
  StepGraph g;
  TapeScope scope(*g.tape);
  const std::size_t n_lab = batch.labeled.size();
  const std::size_t n_all = batch.size();
  const auto labels = trainer_detail::batch_labels(batch);

  BackboneOutput out_a[2], out_b[2];
  Tensor probs_a[2], probs_b[2];
  for (std::size_t v = 0; v < 2; ++v) {
    const View view = make_view(batch, cfg, state.step, v);
    out_a[v] = state.a.forward(view.input);
    out_b[v] = state.b.forward(view.input);
    probs_a[v] = flip_spatial(out_a[v].probs, view.flip_axes);
    probs_b[v] = flip_spatial(out_b[v].probs, view.flip_axes);
    out_a[v].projection = flip_spatial(out_a[v].projection, view.flip_axes);
    out_b[v].projection = flip_spatial(out_b[v].projection, view.flip_axes);
  }

  // Supervised loss for both backbones on both views; the same CE and Dice
  // values feed the competition.
  double score_a = 0.0, score_b = 0.0;
  Tensor seg;
  for (std::size_t v = 0; v < 2; ++v) {
    const auto sa = supervised_loss(slice_batch(probs_a[v], 0, n_lab), labels);
    const auto sb = supervised_loss(slice_batch(probs_b[v], 0, n_lab), labels);
    score_a += 0.5 * competition_score(sa.ce.item(), sa.dice.item(), cfg.weights.alpha);
    score_b += 0.5 * competition_score(sb.ce.item(), sb.dice.item(), cfg.weights.alpha);
    const Tensor both = add(sa.total, sb.total);
    seg = seg.defined() ? add(seg, both) : both;
  }
  g.seg = seg;

  state.competition_history.emplace_back(score_a, score_b);
  while (state.competition_history.size() > cfg.competition_window) state.competition_history.pop_front();
  double wa = 0.0, wb = 0.0;
  for (const auto& [x, y] : state.competition_history) {
    wa += x;
    wb += y;
  }
  g.score_a = wa / static_cast<double>(state.competition_history.size());
  g.score_b = wb / static_cast<double>(state.competition_history.size());
  g.winner = select_winner(g.score_a, g.score_b);
  g.piece = static_cast<std::uint64_t>(g.winner);

  if (cfg.ablation.enable_consistency) {
    g.cos = add(consistency_loss(probs_a[0], probs_a[1]), consistency_loss(probs_b[0], probs_b[1]));
  }

  if (cfg.ablation.enable_dcc) {
    const Tensor* teacher = g.winner == Winner::A ? probs_a : probs_b;
    const Tensor* student = g.winner == Winner::A ? probs_b : probs_a;
    for (std::size_t v = 0; v < 2; ++v) {
      g.teacher[v] = frozen_teacher ? frozen_teacher->teacher[v] : stop_gradient(slice_batch(teacher[v], n_lab, n_all));
    }
    g.cp = pseudo_label_loss(slice_batch(student[0], n_lab, n_all), slice_batch(student[1], n_lab, n_all),
                             g.teacher[0], g.teacher[1]);
  }

  if (cfg.ablation.enable_odcl) {
    auto feature_map = [&](const BackboneOutput& out, const Tensor& probs) {
      return FeatureMap{slice_batch(out.projection, n_lab, n_all),
                        foreground_scores(stop_gradient(slice_batch(probs, n_lab, n_all)))};
    };
    const FeatureMap a1 = feature_map(out_a[0], probs_a[0]), a2 = feature_map(out_a[1], probs_a[1]);
    const FeatureMap b1 = feature_map(out_b[0], probs_b[0]), b2 = feature_map(out_b[1], probs_b[1]);
    const auto dual = dual_space_loss(a1, a2, b1, b2, cfg.weights, derive_seed(cfg.seed, {kStreamSampling, state.step}));
    for (const FeatureMap* m : {&a1, &a2, &b1, &b2}) {
      std::vector<std::uint8_t> bits(m->foreground.size());
      for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = m->foreground[i] > kMaskThreshold;
      g.piece = fnv1a64(bits.data(), bits.size(), g.piece);
    }
    g.all = dual.total;
    g.skipped_contrastive_terms = dual.skipped_terms();
  }

  trainer_detail::require_finite(g.seg.item(), "seg");
  if (g.cos.defined()) trainer_detail::require_finite(g.cos.item(), "cos");
  if (g.cp.defined()) trainer_detail::require_finite(g.cp.item(), "cp");
  if (g.all.defined()) trainer_detail::require_finite(g.all.item(), "iuc");
  g.loss = total_loss({g.seg, g.cos, g.cp, g.all}, cfg.weights.lambda);
  trainer_detail::require_finite(g.loss.value(), "total");
  return g;
}

/// Forward, backward, and one optimizer update of both backbones.
inline StepRecord train_step(TrainState& state, const Batch& batch) {
  StepGraph g = forward_step(state, batch);
  g.tape->backward(g.loss.total);
  auto params = state.parameter_list();
  state.optimizer.step(params);
  StepRecord r;
  r.step = state.step;
  r.seg = g.loss.seg;
  r.cos = g.loss.cos;
  r.cp = g.loss.cp;
  r.iuc = g.loss.iuc;
  r.total = g.loss.value();
  r.lambda = g.loss.lambda;
  r.winner = g.winner;
  r.score_a = g.score_a;
  r.score_b = g.score_b;
  r.skipped_contrastive_terms = g.skipped_contrastive_terms;
  ++state.step;
  return r;
}

// ---------------------------------------------------------------------------
// Logs

inline void write_log_header(std::ostream& os, const TrainingConfig& config) {
  os << "# config: " << config_to_json(config).dump() << '\n';
  os << "step,seg,cos,cp,iuc,total,winner\n";
}

inline void write_log_row(std::ostream& os, const StepRecord& r) {
  os << r.step << ',' << format_metric(r.seg) << ',' << format_metric(r.cos) << ',' << format_metric(r.cp) << ','
     << format_metric(r.iuc) << ',' << format_metric(r.total) << ',' << winner_name(r.winner) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation

inline LabelVolume predict(const Backbone& net, const Volume& image) {
  Tensor x({1, 1, image.shape[0], image.shape[1], image.shape[2]});
  std::copy(image.voxels.begin(), image.voxels.end(), x.data().begin());
  const auto out = net.forward(x);
  LabelVolume pred(image.shape);
  const auto logits = out.logits.data();
  const std::size_t n = image.size();
  // Argmax over the two classes; ties go to background.
  for (std::size_t i = 0; i < n; ++i) pred.voxels[i] = logits[n + i] > logits[i] ? 1 : 0;
  return pred;
}

struct EvaluationReport {
  std::vector<std::string> ids;
  std::vector<MetricReport> a, b;
  Winner best = Winner::A;  // backbone with the higher mean Dice; ties to A

  const std::vector<MetricReport>& best_rows() const { return best == Winner::A ? a : b; }
  MetricSummary summary_a() const { return summarize(a); }
  MetricSummary summary_b() const { return summarize(b); }
  MetricSummary summary_best() const { return summarize(best_rows()); }
};

inline EvaluationReport evaluate(const TrainState& state, const std::vector<Sample>& test_set) {
  if (test_set.empty()) throw DataError("evaluate: empty test set");
  EvaluationReport r;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "test_%04zu", i);
    r.ids.emplace_back(id);
    r.a.push_back(evaluate_masks(predict(state.a, test_set[i].image), test_set[i].label));
    r.b.push_back(evaluate_masks(predict(state.b, test_set[i].image), test_set[i].label));
  }
  r.best = summarize(r.b).dice > summarize(r.a).dice ? Winner::B : Winner::A;
  return r;
}

/// Rows prefixed with the backbone ("A", "B", "best") they describe.
inline void write_evaluation_csv(std::ostream& os, const EvaluationReport& r) {
  os << "backbone,sample_id,dice,jaccard,hd95,asd\n";
  auto emit = [&](const char* tag, const std::vector<MetricReport>& rows) {
    std::ostringstream body;
    write_metrics_csv(body, r.ids, rows);
    std::istringstream lines(body.str());
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) os << tag << ',' << line << '\n';
  };
  emit("A", r.a);
  emit("B", r.b);
  emit(r.best == Winner::A ? "best(A)" : "best(B)", r.best_rows());
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/checkpoint.json and <dir>/state.bin (little-endian f64:
// A parameters, B parameters, optimizer state, competition history).

inline constexpr const char* kCheckpointManifest = "checkpoint.json";
inline constexpr const char* kCheckpointBlob = "state.bin";

inline void checkpoint(TrainState& state, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string blob;
  append_parameters(blob, state.a);
  append_parameters(blob, state.b);
  auto params = state.parameter_list();
  for (double v : state.optimizer.state(params)) append_f64_le(blob, v);
  for (const auto& [x, y] : state.competition_history) {
    append_f64_le(blob, x);
    append_f64_le(blob, y);
  }
  nlohmann::json layout = nlohmann::json::array();
  for (const char* tag : {"A", "B"}) {
    const Backbone& net = tag[0] == 'A' ? state.a : state.b;
    for (const auto& p : net.parameters()) layout.push_back({{"name", std::string(tag) + "." + p.name}, {"count", p.value.numel()}});
  }
  const nlohmann::json manifest = {
      {"format", "c3s3-checkpoint-1"},
      {"config", config_to_json(state.config)},
      {"backbone_a", state.a.config()},
      {"backbone_b", state.b.config()},
      {"seed", state.config.seed},
      {"step", state.step},
      {"optimizer", {{"kind", optimizer_name(state.optimizer.kind())}, {"steps_taken", state.optimizer.steps_taken()}}},
      {"competition_history_length", state.competition_history.size()},
      {"blob", kCheckpointBlob},
      {"blob_bytes", blob.size()},
      {"layout", layout},
  };
  volume_detail::write_file(dir / kCheckpointBlob, blob);
  volume_detail::write_file(dir / kCheckpointManifest, manifest.dump(2) + "\n");
}

/// Rebuilds the full training state; throws DataError on any manifest/blob
/// disagreement without returning partial state.
inline TrainState resume(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(volume_detail::read_file(dir / kCheckpointManifest));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / kCheckpointManifest).string() + ": " + e.what());
  }
  try {
    if (m.at("format") != "c3s3-checkpoint-1") throw DataError("unsupported checkpoint format");
    TrainState state(config_from_json(m.at("config")));
    if (m.at("backbone_a").get<BackboneConfig>() != state.a.config() ||
        m.at("backbone_b").get<BackboneConfig>() != state.b.config()) {
      throw DataError("checkpoint backbone configuration disagrees with its training config");
    }
    const std::string blob = volume_detail::read_file(dir / m.at("blob").get<std::string>());
    const auto history = m.at("competition_history_length").get<std::size_t>();
    auto params = state.parameter_list();
    const std::size_t expected =
        8 * (state.a.parameter_count() + state.b.parameter_count() + state.optimizer.state_size(params) + 2 * history);
    if (blob.size() != expected || m.at("blob_bytes").get<std::size_t>() != blob.size()) {
      throw DataError("checkpoint blob has " + std::to_string(blob.size()) + " bytes, manifest implies " +
                      std::to_string(expected));
    }
    std::size_t off = read_parameters(blob, 0, state.a);
    off = read_parameters(blob, off, state.b);
    std::vector<double> opt(state.optimizer.state_size(params));
    for (auto& v : opt) {
      v = read_f64_le(blob.data() + off);
      off += 8;
    }
    state.optimizer.restore(params, opt, m.at("optimizer").at("steps_taken").get<std::uint64_t>());
    for (std::size_t i = 0; i < history; ++i) {
      const double x = read_f64_le(blob.data() + off);
      const double y = read_f64_le(blob.data() + off + 8);
      off += 16;
      state.competition_history.emplace_back(x, y);
    }
    state.step = m.at("step").get<std::size_t>();
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / kCheckpointManifest).string() + ": malformed checkpoint manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError((dir / kCheckpointManifest).string() + ": bad config in checkpoint: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Driving a run

struct TrainHooks {
  std::ostream* log = nullptr;  // rows only; caller writes the header
  std::function<void(const TrainState&)> on_eval;  // every eval_every steps
  std::function<void(const StepRecord&)> on_step;
};

/// Runs steps until state.step == config.steps.
inline void train(TrainState& state, const DataSplit& split, const TrainHooks& hooks = {}) {
  while (state.step < state.config.steps) {
    const Batch batch = draw_batch(split, state.config, state.step);
    const StepRecord r = train_step(state, batch);
    if (hooks.log) write_log_row(*hooks.log, r);
    if (hooks.on_step) hooks.on_step(r);
    if (hooks.on_eval && state.config.eval_every > 0 && state.step % state.config.eval_every == 0) hooks.on_eval(state);
  }
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationCell {
  std::string id;
  AblationFlags flags;
  double alpha = 0.8;
  std::uint64_t seed = 0;
};

struct AblationGrid {
  std::vector<AblationFlags> flags;
  std::vector<double> alphas;
  std::vector<std::uint64_t> seeds;

  std::vector<AblationCell> cells() const {
    std::vector<AblationCell> out;
    for (const auto& f : flags)
      for (double a : alphas)
        for (auto s : seeds) {
          char id[96];
          std::snprintf(id, sizeof id, "odcl%d_dcc%d_cos%d_alpha%.2f_seed%llu", f.enable_odcl, f.enable_dcc,
                        f.enable_consistency, a, static_cast<unsigned long long>(s));
          out.push_back({id, f, a, s});
        }
    return out;
  }

  /// {+-ODCL} x {+-DCC} with consistency kept on: the four module ablation rows.
  static std::vector<AblationFlags> module_rows() {
    return {{false, false, true}, {true, false, true}, {false, true, true}, {true, true, true}};
  }
};

struct CellResult {
  AblationCell cell;
  bool ok = false;
  std::string error;
  MetricSummary best;
  MetricSummary a, b;
  Winner best_backbone = Winner::A;
  double seconds = 0.0;
};

/// One fresh training per cell on `split`; a failing cell is recorded and
/// the grid continues.
inline std::vector<CellResult> run_ablation(const TrainingConfig& base, const AblationGrid& grid, const DataSplit& split,
                                            const std::function<void(const CellResult&)>& on_cell = {}) {
  std::vector<CellResult> results;
  for (const auto& cell : grid.cells()) {
    CellResult r;
    r.cell = cell;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      TrainingConfig cfg = base;
      cfg.ablation = cell.flags;
      cfg.weights.alpha = cell.alpha;
      cfg.seed = cell.seed;
      cfg.validate();
      TrainState state(cfg);
      train(state, split);
      const auto report = evaluate(state, split.test);
      r.a = report.summary_a();
      r.b = report.summary_b();
      r.best = report.summary_best();
      r.best_backbone = report.best;
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_cell) on_cell(r);
    results.push_back(std::move(r));
  }
  return results;
}

inline void write_ablation_header(std::ostream& os) {
  os << "cell_id,enable_odcl,enable_dcc,enable_consistency,alpha,seed,status,best_backbone,dice,jaccard,hd95,asd,"
        "dice_a,dice_b,seconds\n";
}

inline void write_ablation_row(std::ostream& os, const CellResult& r) {
  const auto& c = r.cell;
  os << c.id << ',' << c.flags.enable_odcl << ',' << c.flags.enable_dcc << ',' << c.flags.enable_consistency << ','
     << format_metric(c.alpha) << ',' << c.seed << ',';
  if (!r.ok) {
    std::string msg = r.error;
    for (auto& ch : msg) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    os << "failed: " << msg << ",,,,,,,," << format_metric(r.seconds) << '\n';
    return;
  }
  os << "ok," << winner_name(r.best_backbone) << ',' << format_metric(r.best.dice) << ','
     << format_metric(r.best.jaccard) << ',' << format_metric(r.best.hd95) << ',' << format_metric(r.best.asd) << ','
     << format_metric(r.a.dice) << ',' << format_metric(r.b.dice) << ',' << format_metric(r.seconds) << '\n';
}

inline void write_ablation_csv(std::ostream& os, const std::vector<CellResult>& results) {
  write_ablation_header(os);
  for (const auto& r : results) write_ablation_row(os, r);
}

}  // namespace c3s3
