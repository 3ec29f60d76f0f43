#pragma once

// Minimal reverse-mode differentiable tensor engine.
//
// A Tensor is a shared handle onto a dense row-major array of doubles. While
// a Tape is active (see TapeScope), every op whose inputs require gradients
// records a node holding its inputs, its output, and a backward rule. Because
// nodes are appended as ops execute, the tape is already in topological
// order; backward() walks it once in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "c3s3/error.hpp"

namespace c3s3 {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Mutation hooks used by `c3s3 check --inject-fault` to prove that the
// gradient oracles catch a broken backward rule.
namespace debug {
enum class Fault { none, relu_backward_sign, conv_weight_grad_sign };
inline Fault injected_fault = Fault::none;

// When set, relu() folds its activation pattern into this value, so a
// finite-difference probe can tell whether a perturbation crossed a kink.
inline thread_local std::uint64_t* activation_fingerprint = nullptr;
}  // namespace debug

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const Tape* producer = nullptr;  // null for leaves

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
    if (values.size() != impl_->data.size()) {
      throw ShapeError("tensor of shape " + shape_str(impl_->shape) + " needs " +
                       std::to_string(impl_->data.size()) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->producer == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  std::span<double> grad() { return impl_->ensure_grad(); }
  std::vector<double> grad_values() const {
    return has_grad() ? impl_->grad : std::vector<double>(numel(), 0.0);
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of values; the copy is a fresh leaf.
  Tensor clone() const { return Tensor(shape(), impl_->data); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations for one forward pass.
class Tape {
 public:
  struct Node {
    std::string name;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string name, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
    output->producer = this;
    output->requires_grad = true;
    nodes_.push_back({std::move(name), std::move(inputs), std::move(output),
                      std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Propagates d(loss)/d(.) into every requires_grad leaf reachable from
  /// `loss`. Leaf gradients accumulate across calls; intermediate gradients
  /// are recomputed from scratch each time.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.impl()->producer != this) {
      throw std::logic_error("backward(): loss was not produced under this tape");
    }
    for (auto& n : nodes_) n.output->grad.clear();
    loss.impl()->ensure_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

  void clear() {
    for (auto& n : nodes_) n.output->producer = nullptr;
    nodes_.clear();
  }

  ~Tape() { clear(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape; }

/// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Runs backward on the tape that produced `loss`.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  auto* tape = const_cast<Tape*>(loss.impl()->producer);
  if (tape == nullptr) throw std::logic_error("backward(): loss is not on any tape");
  tape->backward(loss);
}

namespace detail {

using ImplPtr = std::shared_ptr<TensorImpl>;

inline bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (active_tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Records `backward` for `out` if a tape is active and any input requires
/// grad. The callback receives nothing; it reads out->grad and accumulates
/// into the inputs' grads itself (using accumulate_into()).
inline void record(std::string_view name, std::initializer_list<const Tensor*> inputs,
                   const Tensor& out, std::function<void()> backward) {
  if (!wants_grad(inputs)) return;
  std::vector<ImplPtr> in;
  in.reserve(inputs.size());
  for (const auto* t : inputs) in.push_back(t->impl());
  active_tape->record(std::string(name), std::move(in), out.impl(), std::move(backward));
}

/// Grad buffer of `t` if it participates in differentiation, else null.
inline double* grad_target(const ImplPtr& t) {
  return t->requires_grad ? t->ensure_grad().data() : nullptr;
}

}  // namespace detail

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops.
//
// Supported broadcasts: identical shapes; `b` with a single element; `b` of
// shape [C] against `a` of shape [B, C, ...] (per-channel).

namespace detail {

enum class Broadcast { same, scalar, channel };

inline Broadcast classify(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar;
  if (b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.dim(1)) return Broadcast::channel;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

/// Maps each flat index of `a` to the matching flat index of `b`.
struct BroadcastIndex {
  Broadcast kind;
  std::size_t channels = 1;
  std::size_t inner = 1;  // product of extents after the channel axis

  BroadcastIndex(const Tensor& a, Broadcast k) : kind(k) {
    if (k == Broadcast::channel) {
      channels = a.dim(1);
      for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
    }
  }
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Broadcast::same: return i;
      case Broadcast::scalar: return 0;
      case Broadcast::channel: return (i / inner) % channels;
    }
    return 0;
  }
};

template <class Fwd, class DA, class DB>
Tensor binary_op(std::string_view name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const auto kind = classify(a, b, name);
  const BroadcastIndex bi(a, kind);
  Tensor out(a.shape());
  auto o = out.data();
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i], y[bi(i)]);
  record(name, {&a, &b}, out, [ai = a.impl(), bimpl = b.impl(), oi = out.impl(), bi, da, db] {
    const auto& g = oi->grad;
    const auto& xv = ai->data;
    const auto& yv = bimpl->data;
    if (double* ga = grad_target(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(xv[i], yv[bi(i)]);
    }
    if (double* gb = grad_target(bimpl)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[bi(i)] += g[i] * db(xv[i], yv[bi(i)]);
    }
  });
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * s;
  detail::record("scale", {&x}, out, [xi = x.impl(), oi = out.impl(), s] {
    if (double* g = detail::grad_target(xi)) {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += s * oi->grad[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Unary activations.

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > 0.0 ? v[i] : 0.0;
  if (auto* fp = debug::activation_fingerprint) {
    for (std::size_t i = 0; i < o.size(); ++i) *fp = (*fp ^ static_cast<std::uint64_t>(v[i] > 0.0)) * 0x100000001b3ULL;
  }
  detail::record("relu", {&x}, out, [xi = x.impl(), oi = out.impl()] {
    double* g = detail::grad_target(xi);
    if (!g) return;
    const double sign = debug::injected_fault == debug::Fault::relu_backward_sign ? -1.0 : 1.0;
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      if (xi->data[i] > 0.0) g[i] += sign * oi->grad[i];
    }
  });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    // Split by sign so exp never overflows.
    o[i] = v[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-v[i])) : std::exp(v[i]) / (1.0 + std::exp(v[i]));
  }
  detail::record("sigmoid", {&x}, out, [xi = x.impl(), oi = out.impl()] {
    if (double* g = detail::grad_target(xi)) {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double y = oi->data[i];
        g[i] += oi->grad[i] * y * (1.0 - y);
      }
    }
  });
  return out;
}

namespace detail {
/// Splits [B, C, ...] into (outer = B, channels = C, inner = product of rest).
struct ChannelLayout {
  std::size_t outer, channels, inner;
  explicit ChannelLayout(const Tensor& x, std::string_view op) {
    if (x.rank() < 2) throw ShapeError(std::string(op) + ": need rank >= 2, got " + shape_str(x.shape()));
    outer = x.dim(0);
    channels = x.dim(1);
    inner = x.numel() / (outer * channels);
  }
};
}  // namespace detail

/// Softmax across axis 1 at every (batch, spatial) position.
inline Tensor softmax_channel(const Tensor& x) {
  const detail::ChannelLayout L(x, "softmax_channel");
  Tensor out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t b = 0; b < L.outer; ++b) {
    const std::size_t base = b * L.channels * L.inner;
    for (std::size_t s = 0; s < L.inner; ++s) {
      double m = v[base + s];
      for (std::size_t c = 1; c < L.channels; ++c) m = std::max(m, v[base + c * L.inner + s]);
      double z = 0.0;
      for (std::size_t c = 0; c < L.channels; ++c) {
        const double e = std::exp(v[base + c * L.inner + s] - m);
        o[base + c * L.inner + s] = e;
        z += e;
      }
      for (std::size_t c = 0; c < L.channels; ++c) o[base + c * L.inner + s] /= z;
    }
  }
  detail::record("softmax_channel", {&x}, out, [xi = x.impl(), oi = out.impl(), L] {
    double* g = detail::grad_target(xi);
    if (!g) return;
    const auto& y = oi->data;
    const auto& go = oi->grad;
    for (std::size_t b = 0; b < L.outer; ++b) {
      const std::size_t base = b * L.channels * L.inner;
      for (std::size_t s = 0; s < L.inner; ++s) {
        double dot = 0.0;
        for (std::size_t c = 0; c < L.channels; ++c) {
          const std::size_t i = base + c * L.inner + s;
          dot += go[i] * y[i];
        }
        for (std::size_t c = 0; c < L.channels; ++c) {
          const std::size_t i = base + c * L.inner + s;
          g[i] += y[i] * (go[i] - dot);
        }
      }
    }
  });
  return out;
}

/// Scales each channel vector (axis 1) to unit Euclidean length. Vectors with
/// norm below `eps` are divided by `eps` instead.
inline Tensor normalize_channel(const Tensor& x, double eps = 1e-12) {
  const detail::ChannelLayout L(x, "normalize_channel");
  Tensor out(x.shape());
  std::vector<double> norms(L.outer * L.inner);
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t b = 0; b < L.outer; ++b) {
    const std::size_t base = b * L.channels * L.inner;
    for (std::size_t s = 0; s < L.inner; ++s) {
      double ss = 0.0;
      for (std::size_t c = 0; c < L.channels; ++c) ss += v[base + c * L.inner + s] * v[base + c * L.inner + s];
      const double n = std::max(std::sqrt(ss), eps);
      norms[b * L.inner + s] = n;
      for (std::size_t c = 0; c < L.channels; ++c) o[base + c * L.inner + s] = v[base + c * L.inner + s] / n;
    }
  }
  detail::record("normalize_channel", {&x}, out,
                 [xi = x.impl(), oi = out.impl(), L, norms = std::move(norms), eps] {
    double* g = detail::grad_target(xi);
    if (!g) return;
    const auto& y = oi->data;
    const auto& go = oi->grad;
    for (std::size_t b = 0; b < L.outer; ++b) {
      const std::size_t base = b * L.channels * L.inner;
      for (std::size_t s = 0; s < L.inner; ++s) {
        const double n = norms[b * L.inner + s];
        double dot = 0.0;
        if (n > eps) {
          for (std::size_t c = 0; c < L.channels; ++c) dot += go[base + c * L.inner + s] * y[base + c * L.inner + s];
        }
        for (std::size_t c = 0; c < L.channels; ++c) {
          const std::size_t i = base + c * L.inner + s;
          g[i] += (go[i] - y[i] * dot) / n;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (results have shape [1]).

inline Tensor sum(const Tensor& x) {
  const auto v = x.data();
  Tensor out = Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0));
  detail::record("sum", {&x}, out, [xi = x.impl(), oi = out.impl()] {
    if (double* g = detail::grad_target(xi)) {
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += oi->grad[0];
    }
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  const auto v = x.data();
  const double n = static_cast<double>(v.size());
  Tensor out = Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0) / n);
  detail::record("mean", {&x}, out, [xi = x.impl(), oi = out.impl(), n] {
    if (double* g = detail::grad_target(xi)) {
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += oi->grad[0] / n;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops.

/// Concatenates along axis 1. All other extents must agree.
inline Tensor concat_channel(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_channel: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t i = 2; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_channel: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
  }
  Shape s = a.shape();
  s[1] += b.dim(1);
  Tensor out(s);
  const std::size_t batch = a.dim(0);
  const std::size_t na = a.numel() / batch;
  const std::size_t nb = b.numel() / batch;
  auto o = out.data();
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().begin() + i * na, na, o.begin() + i * (na + nb));
    std::copy_n(b.data().begin() + i * nb, nb, o.begin() + i * (na + nb) + na);
  }
  detail::record("concat_channel", {&a, &b}, out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), batch, na, nb] {
    const auto& g = oi->grad;
    if (double* ga = detail::grad_target(ai)) {
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * (na + nb) + j];
    }
    if (double* gb = detail::grad_target(bi)) {
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * (na + nb) + na + j];
    }
  });
  return out;
}

/// Rows [begin, end) of axis 0.
inline Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_batch: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[0] = end - begin;
  Tensor out(s);
  const std::size_t row = x.numel() / x.dim(0);
  std::copy_n(x.data().begin() + begin * row, (end - begin) * row, out.data().begin());
  detail::record("slice_batch", {&x}, out, [xi = x.impl(), oi = out.impl(), offset = begin * row] {
    if (double* g = detail::grad_target(xi)) {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[offset + i] += oi->grad[i];
    }
  });
  return out;
}

/// Identity on values; blocks all gradient flow. The result is a new leaf
/// that never requires grad.
inline Tensor stop_gradient(const Tensor& x) { return x.clone(); }

// ---------------------------------------------------------------------------
// Volumetric layout helpers for [B, C, D, H, W] tensors.

struct Dims5 {
  std::size_t b, c, d, h, w;
  std::size_t spatial() const { return d * h * w; }
};

inline Dims5 dims5(const Tensor& x, std::string_view op) {
  if (x.rank() != 5) throw ShapeError(std::string(op) + ": expected [B,C,D,H,W], got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
}

/// Averages non-overlapping factor^3 blocks.
inline Tensor avg_pool3d(const Tensor& x, std::size_t factor = 2) {
  const auto in = dims5(x, "avg_pool3d");
  if (factor == 0 || in.d % factor || in.h % factor || in.w % factor) {
    throw ShapeError("avg_pool3d: extents " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  }
  const Dims5 out_d{in.b, in.c, in.d / factor, in.h / factor, in.w / factor};
  Tensor out({out_d.b, out_d.c, out_d.d, out_d.h, out_d.w});
  const double inv = 1.0 / static_cast<double>(factor * factor * factor);
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
    const double* src = v.data() + bc * in.spatial();
    double* dst = o.data() + bc * out_d.spatial();
    for (std::size_t d = 0; d < in.d; ++d)
      for (std::size_t h = 0; h < in.h; ++h)
        for (std::size_t w = 0; w < in.w; ++w)
          dst[((d / factor) * out_d.h + h / factor) * out_d.w + w / factor] += src[(d * in.h + h) * in.w + w] * inv;
  }
  detail::record("avg_pool3d", {&x}, out, [xi = x.impl(), oi = out.impl(), in, out_d, factor, inv] {
    double* g = detail::grad_target(xi);
    if (!g) return;
    for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
      const double* go = oi->grad.data() + bc * out_d.spatial();
      double* gi = g + bc * in.spatial();
      for (std::size_t d = 0; d < in.d; ++d)
        for (std::size_t h = 0; h < in.h; ++h)
          for (std::size_t w = 0; w < in.w; ++w)
            gi[(d * in.h + h) * in.w + w] += go[((d / factor) * out_d.h + h / factor) * out_d.w + w / factor] * inv;
    }
  });
  return out;
}

/// Replicates every voxel into a factor^3 block.
inline Tensor nearest_upsample3d(const Tensor& x, std::size_t factor = 2) {
  const auto in = dims5(x, "nearest_upsample3d");
  if (factor == 0) throw ShapeError("nearest_upsample3d: factor must be >= 1");
  const Dims5 out_d{in.b, in.c, in.d * factor, in.h * factor, in.w * factor};
  Tensor out({out_d.b, out_d.c, out_d.d, out_d.h, out_d.w});
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
    const double* src = v.data() + bc * in.spatial();
    double* dst = o.data() + bc * out_d.spatial();
    for (std::size_t d = 0; d < out_d.d; ++d)
      for (std::size_t h = 0; h < out_d.h; ++h)
        for (std::size_t w = 0; w < out_d.w; ++w)
          dst[(d * out_d.h + h) * out_d.w + w] = src[((d / factor) * in.h + h / factor) * in.w + w / factor];
  }
  detail::record("nearest_upsample3d", {&x}, out, [xi = x.impl(), oi = out.impl(), in, out_d, factor] {
    double* g = detail::grad_target(xi);
    if (!g) return;
    for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
      const double* go = oi->grad.data() + bc * out_d.spatial();
      double* gi = g + bc * in.spatial();
      for (std::size_t d = 0; d < out_d.d; ++d)
        for (std::size_t h = 0; h < out_d.h; ++h)
          for (std::size_t w = 0; w < out_d.w; ++w)
            gi[((d / factor) * in.h + h / factor) * in.w + w / factor] += go[(d * out_d.h + h) * out_d.w + w];
    }
  });
  return out;
}

/// Mirrors sample i along spatial axis axes[i] (0 = D, 1 = H, 2 = W); a
/// negative entry leaves that sample untouched. Self-inverse.
inline Tensor flip_spatial(const Tensor& x, const std::vector<int>& axes) {
  const auto dm = dims5(x, "flip_spatial");
  if (axes.size() != dm.b) {
    throw ShapeError("flip_spatial: " + std::to_string(axes.size()) + " axes for batch of " + std::to_string(dm.b));
  }
  auto index_map = [dm, axes](std::size_t b, std::size_t d, std::size_t h, std::size_t w) {
    switch (axes[b]) {
      case 0: d = dm.d - 1 - d; break;
      case 1: h = dm.h - 1 - h; break;
      case 2: w = dm.w - 1 - w; break;
      default: break;
    }
    return (d * dm.h + h) * dm.w + w;
  };
  auto apply = [dm, index_map](const double* src, double* dst, bool accumulate) {
    for (std::size_t b = 0; b < dm.b; ++b)
      for (std::size_t c = 0; c < dm.c; ++c) {
        const std::size_t base = (b * dm.c + c) * dm.spatial();
        for (std::size_t d = 0; d < dm.d; ++d)
          for (std::size_t h = 0; h < dm.h; ++h)
            for (std::size_t w = 0; w < dm.w; ++w) {
              const std::size_t o = base + (d * dm.h + h) * dm.w + w;
              const std::size_t i = base + index_map(b, d, h, w);
              if (accumulate) dst[i] += src[o]; else dst[o] = src[i];
            }
      }
  };
  Tensor out(x.shape());
  apply(x.data().data(), out.data().data(), false);
  detail::record("flip_spatial", {&x}, out, [xi = x.impl(), oi = out.impl(), apply] {
    if (double* g = detail::grad_target(xi)) apply(oi->grad.data(), g, true);
  });
  return out;
}

}  // namespace c3s3
