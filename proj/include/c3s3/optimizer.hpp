#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "c3s3/error.hpp"
#include "c3s3/tensor.hpp"

namespace c3s3 {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd-momentum or adam)");
}

/// SGD with heavy-ball momentum (v = mu v + g; p -= lr v) or Adam. Owns one
/// state slot per parameter tensor, matched by position.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

  OptimizerKind kind() const { return kind_; }
  std::uint64_t steps_taken() const { return t_; }

  /// Applies one update from the accumulated gradients, then clears them.
  void step(const std::vector<Tensor*>& params) {
    if (first_.empty()) {
      for (auto* p : params) {
        first_.emplace_back(p->numel(), 0.0);
        if (kind_ == OptimizerKind::adam) second_.emplace_back(p->numel(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw std::logic_error("optimizer: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = p.data();
      auto& m = first_[i];
      if (kind_ == OptimizerKind::sgd_momentum) {
        for (std::size_t j = 0; j < v.size(); ++j) {
          m[j] = kMomentum * m[j] + g[j];
          v[j] -= lr_ * m[j];
        }
      } else {
        auto& s = second_[i];
        for (std::size_t j = 0; j < v.size(); ++j) {
          m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
          s[j] = kBeta2 * s[j] + (1.0 - kBeta2) * g[j] * g[j];
          v[j] -= lr_ * (m[j] / bc1) / (std::sqrt(s[j] / bc2) + kEps);
        }
      }
      p.zero_grad();
    }
  }

  /// Flattened state for checkpoints: first moments, then second moments.
  std::vector<double> state(const std::vector<Tensor*>& params) const {
    if (first_.empty()) return std::vector<double>(state_size(params), 0.0);
    std::vector<double> out;
    for (const auto& m : first_) out.insert(out.end(), m.begin(), m.end());
    for (const auto& s : second_) out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  std::size_t state_size(const std::vector<Tensor*>& params) const {
    std::size_t n = 0;
    for (auto* p : params) n += p->numel();
    return kind_ == OptimizerKind::adam ? 2 * n : n;
  }

  void restore(const std::vector<Tensor*>& params, const std::vector<double>& flat, std::uint64_t t) {
    if (flat.size() != state_size(params)) throw DataError("optimizer state size mismatch");
    first_.clear();
    second_.clear();
    std::size_t off = 0;
    for (auto* p : params) {
      first_.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                          flat.begin() + static_cast<std::ptrdiff_t>(off + p->numel()));
      off += p->numel();
    }
    if (kind_ == OptimizerKind::adam) {
      for (auto* p : params) {
        second_.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                             flat.begin() + static_cast<std::ptrdiff_t>(off + p->numel()));
        off += p->numel();
      }
    }
    t_ = t;
  }

  static constexpr double kMomentum = 0.9;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> first_, second_;
};

}  // namespace c3s3
