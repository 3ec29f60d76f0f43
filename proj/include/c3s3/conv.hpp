#pragma once

// Stride-1, "same"-padded 3D cross-correlation over [B, C, D, H, W] tensors.
//
// Kernels are cubic with odd extent (3 for feature blocks, 1 for channel
// projections), padded by (extent - 1) / 2 with zeros. The inner loops run
// along W so they vectorize; each output row is accumulated for all output
// channels at once in a small buffer that stays in L1.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "c3s3/tensor.hpp"

namespace c3s3 {

namespace conv_detail {

struct Geometry {
  Dims5 in;
  std::size_t out_channels;
  std::size_t ks;   // kernel extent
  std::size_t pad;  // (ks - 1) / 2
};

// Valid destination range [lo, hi) for a row shifted by `off` within [0, n).
inline void shift_range(std::ptrdiff_t off, std::size_t n, std::size_t& lo, std::size_t& hi) {
  lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
  hi = off > 0 ? (static_cast<std::size_t>(off) >= n ? 0 : n - static_cast<std::size_t>(off)) : n;
  if (lo > hi) lo = hi;
}

/// out[b,k] = bias[k] + sum_c sum_taps w[k,c,tap] * in[b,c,shifted].
/// `bias` may be null. With `accumulate` the result is added to `out`
/// instead (bias ignored).
inline void forward(const Geometry& g, const double* in, const double* weight, const double* bias, double* out,
                    bool accumulate = false) {
  const auto& id = g.in;
  const std::size_t K = g.out_channels, C = id.c, ks = g.ks, taps = ks * ks * ks;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  // Transpose weights to [c][tap][k] so the k loop walks contiguous memory.
  std::vector<double> wt(K * C * taps);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < taps; ++t) wt[(c * taps + t) * K + k] = weight[(k * C + c) * taps + t];

  std::vector<double> acc(K * id.w);
  const std::size_t plane = id.spatial();
  for (std::size_t b = 0; b < id.b; ++b) {
    for (std::size_t d = 0; d < id.d; ++d) {
      for (std::size_t h = 0; h < id.h; ++h) {
        const std::size_t row_off = (d * id.h + h) * id.w;
        for (std::size_t k = 0; k < K; ++k) {
          if (accumulate) {
            std::copy_n(out + (b * K + k) * plane + row_off, id.w, acc.data() + k * id.w);
          } else {
            std::fill_n(acc.data() + k * id.w, id.w, bias ? bias[k] : 0.0);
          }
        }
        for (std::size_t c = 0; c < C; ++c) {
          const double* chan = in + (b * C + c) * plane;
          for (std::size_t kd = 0; kd < ks; ++kd) {
            const std::ptrdiff_t sd = static_cast<std::ptrdiff_t>(d + kd) - pad;
            if (sd < 0 || sd >= static_cast<std::ptrdiff_t>(id.d)) continue;
            for (std::size_t kh = 0; kh < ks; ++kh) {
              const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + kh) - pad;
              if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(id.h)) continue;
              const double* row = chan + (static_cast<std::size_t>(sd) * id.h + static_cast<std::size_t>(sh)) * id.w;
              for (std::size_t kw = 0; kw < ks; ++kw) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kw) - pad;
                std::size_t lo, hi;
                shift_range(off, id.w, lo, hi);
                const double* src = row + static_cast<std::ptrdiff_t>(lo) + off;
                const std::size_t n = hi - lo;
                const double* wk = wt.data() + (c * taps + (kd * ks + kh) * ks + kw) * K;
                for (std::size_t k = 0; k < K; ++k) {
                  const double wv = wk[k];
                  double* a = acc.data() + k * id.w + lo;
#pragma omp simd
                  for (std::size_t w = 0; w < n; ++w) a[w] += wv * src[w];
                }
              }
            }
          }
        }
        for (std::size_t k = 0; k < K; ++k) {
          std::copy_n(acc.data() + k * id.w, id.w, out + (b * K + k) * plane + row_off);
        }
      }
    }
  }
}

/// grad_in += correlation of grad_out with the channel-swapped, spatially
/// flipped kernel.
inline void backward_input(const Geometry& g, const double* grad_out, const double* weight, double* grad_in) {
  const std::size_t K = g.out_channels, C = g.in.c, ks = g.ks, taps = ks * ks * ks;
  std::vector<double> flipped(C * K * taps);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < taps; ++t) flipped[(c * K + k) * taps + (taps - 1 - t)] = weight[(k * C + c) * taps + t];
  Geometry transposed{{g.in.b, K, g.in.d, g.in.h, g.in.w}, C, ks, g.pad};
  forward(transposed, grad_out, flipped.data(), nullptr, grad_in, /*accumulate=*/true);
}

// Zero-padded copy of the input, [B*C][D+2p][H+2p][W+2p].
inline std::vector<double> pad_input(const Geometry& g, const double* in) {
  const auto& id = g.in;
  const std::size_t p = g.pad, Dp = id.d + 2 * p, Hp = id.h + 2 * p, Wp = id.w + 2 * p;
  std::vector<double> out(id.b * id.c * Dp * Hp * Wp, 0.0);
  for (std::size_t bc = 0; bc < id.b * id.c; ++bc)
    for (std::size_t d = 0; d < id.d; ++d)
      for (std::size_t h = 0; h < id.h; ++h) {
        std::copy_n(in + (bc * id.d + d) * id.h * id.w + h * id.w, id.w,
                    out.data() + ((bc * Dp + d + p) * Hp + h + p) * Wp + p);
      }
  return out;
}

// Weight gradient for output channels [k0, k0 + KB) and kernel extent KS.
// For each (c, kd, kh) the KB x KS x kLanes partial sums live in registers
// while the whole batch streams past; the padded input removes bounds checks.
template <std::size_t KB, std::size_t KS>
void backward_weight_block(const Geometry& g, const double* padded, const double* grad_out, double* grad_w,
                           std::size_t k0) {
  constexpr std::size_t kLanes = 8;
  constexpr std::size_t taps = KS * KS * KS;
  const auto& id = g.in;
  const std::size_t K = g.out_channels;
  const std::size_t Hp = id.h + 2 * g.pad, Wp = id.w + 2 * g.pad, cs = (id.d + 2 * g.pad) * Hp * Wp;
  const std::size_t plane = id.spatial();
  const std::size_t full = id.w - id.w % kLanes;
  for (std::size_t c = 0; c < id.c; ++c)
    for (std::size_t kd = 0; kd < KS; ++kd)
      for (std::size_t kh = 0; kh < KS; ++kh) {
        double acc[KB][KS][kLanes] = {};
        double tail[KB][KS] = {};
        for (std::size_t b = 0; b < id.b; ++b) {
          const double* chan = padded + (b * id.c + c) * cs;
          const double* gob = grad_out + (b * K + k0) * plane;
          for (std::size_t d = 0; d < id.d; ++d)
            for (std::size_t h = 0; h < id.h; ++h) {
              const double* row = chan + ((d + kd) * Hp + h + kh) * Wp;
              const double* gr = gob + (d * id.h + h) * id.w;
              for (std::size_t w = 0; w < full; w += kLanes)
                for (std::size_t kb = 0; kb < KB; ++kb)
                  for (std::size_t kw = 0; kw < KS; ++kw)
                    for (std::size_t l = 0; l < kLanes; ++l) acc[kb][kw][l] += gr[kb * plane + w + l] * row[w + kw + l];
              for (std::size_t w = full; w < id.w; ++w)
                for (std::size_t kb = 0; kb < KB; ++kb)
                  for (std::size_t kw = 0; kw < KS; ++kw) tail[kb][kw] += gr[kb * plane + w] * row[w + kw];
            }
        }
        const double sign = debug::injected_fault == debug::Fault::conv_weight_grad_sign ? -1.0 : 1.0;
        for (std::size_t kb = 0; kb < KB; ++kb)
          for (std::size_t kw = 0; kw < KS; ++kw) {
            double s = tail[kb][kw];
            for (std::size_t l = 0; l < kLanes; ++l) s += acc[kb][kw][l];
            grad_w[((k0 + kb) * id.c + c) * taps + (kd * KS + kh) * KS + kw] += sign * s;
          }
      }
}

template <std::size_t KS>
void backward_weight_fixed(const Geometry& g, const double* padded, const double* grad_out, double* grad_w) {
  std::size_t k = 0;
  for (; k + 4 <= g.out_channels; k += 4) backward_weight_block<4, KS>(g, padded, grad_out, grad_w, k);
  for (; k + 2 <= g.out_channels; k += 2) backward_weight_block<2, KS>(g, padded, grad_out, grad_w, k);
  for (; k < g.out_channels; ++k) backward_weight_block<1, KS>(g, padded, grad_out, grad_w, k);
}

/// grad_w[k,c,tap] += sum over positions of grad_out[b,k,x] * in[b,c,x+tap-pad].
inline void backward_weight(const Geometry& g, const double* in, const double* grad_out, double* grad_w) {
  std::vector<double> padded;
  const double* src = in;
  if (g.pad > 0) {
    padded = pad_input(g, in);
    src = padded.data();
  }
  switch (g.ks) {
    case 1: backward_weight_fixed<1>(g, src, grad_out, grad_w); break;
    case 3: backward_weight_fixed<3>(g, src, grad_out, grad_w); break;
    case 5: backward_weight_fixed<5>(g, src, grad_out, grad_w); break;
    default: throw ShapeError("conv3d: kernel extent " + std::to_string(g.ks) + " is not supported (1, 3 or 5)");
  }
}

}  // namespace conv_detail

/// input [B,C,D,H,W], weight [K,C,k,k,k] with k in {1, 3, 5}, bias [K] (may be an
/// undefined Tensor for no bias) -> [B,K,D,H,W].
inline Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias = Tensor()) {
  const auto id = dims5(input, "conv3d");
  if (weight.rank() != 5) throw ShapeError("conv3d: weight must be [K,C,k,k,k], got " + shape_str(weight.shape()));
  const std::size_t K = weight.dim(0), ks = weight.dim(2);
  if (weight.dim(1) != id.c) {
    throw ShapeError("conv3d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input " +
                     shape_str(input.shape()) + " has " + std::to_string(id.c));
  }
  if ((ks != 1 && ks != 3 && ks != 5) || weight.dim(3) != ks || weight.dim(4) != ks) {
    throw ShapeError("conv3d: kernel must be cubic with extent 1, 3 or 5, got " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != K)) {
    throw ShapeError("conv3d: bias must be [" + std::to_string(K) + "], got " + shape_str(bias.shape()));
  }
  const conv_detail::Geometry geom{id, K, ks, (ks - 1) / 2};
  Tensor out({id.b, K, id.d, id.h, id.w});
  conv_detail::forward(geom, input.data().data(), weight.data().data(),
                       bias.defined() ? bias.data().data() : nullptr, out.data().data());

  auto backward = [ii = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr,
                   oi = out.impl(), geom] {
    const double* go = oi->grad.data();
    if (double* gi = detail::grad_target(ii)) conv_detail::backward_input(geom, go, wi->data.data(), gi);
    if (double* gw = detail::grad_target(wi)) conv_detail::backward_weight(geom, ii->data.data(), go, gw);
    if (bi) {
      if (double* gb = detail::grad_target(bi)) {
        const std::size_t plane = geom.in.spatial();
        for (std::size_t b = 0; b < geom.in.b; ++b)
          for (std::size_t k = 0; k < geom.out_channels; ++k) {
            const double* p = go + (b * geom.out_channels + k) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            gb[k] += s;
          }
      }
    }
  };
  if (bias.defined()) {
    detail::record("conv3d", {&input, &weight, &bias}, out, std::move(backward));
  } else {
    detail::record("conv3d", {&input, &weight}, out, std::move(backward));
  }
  return out;
}

}  // namespace c3s3
