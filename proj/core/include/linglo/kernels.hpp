#pragma once

// Forward kernels (and the backward helpers autodiff needs) on plain tensors.
// Every kernel is a pure function: deterministic loop order, no shared mutable
// state, safe to call from multiple threads. The only exceptions are the
// *_consume variants, which reuse the input buffer when they uniquely own it.
//
// Flop accounting (see metering.hpp): fused multiply-add inside an inner
// product counts 1; every other scalar add/sub/mul/div counts 1; exp/erf/sqrt
// and comparisons count 0. Kernels report in bulk per call.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "linglo/error.hpp"
#include "linglo/metering.hpp"
#include "linglo/tensor.hpp"

namespace linglo::kernels {

// ---------------------------------------------------------------- broadcast

// Numpy-style right-aligned broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(ErrorKind::Shape, std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides into `shape` as seen from broadcast shape `out` (0 on broadcast dims).
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  const auto own = row_major_strides(shape);
  const std::size_t off = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] != 1) strides[off + i] = own[i];
  return strides;
}

template <typename T, typename F>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op, F&& f) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  Tensor<T> out(out_shape);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const std::int64_t n = out.numel();
  const std::size_t rank = out_shape.size();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.raw();
  std::vector<std::int64_t> ix(rank, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      oa += sa[du];
      ob += sb[du];
      if (++ix[du] < out_shape[du]) break;
      ix[du] = 0;
      oa -= sa[du] * out_shape[du];
      ob -= sb[du] * out_shape[du];
    }
  }
  flops::add(n);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_broadcast(a, b, "mul", [](T x, T y) { return x * y; });
}

// Sum `g` down to `shape` (inverse of broadcasting `shape` up to g.shape()).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor<T> out = Tensor<T>::zeros(shape);
  const auto s = broadcast_strides(shape, g.shape());
  const std::size_t rank = g.shape().size();
  const std::int64_t n = g.numel();
  const T* pg = g.data();
  T* po = out.raw();
  std::vector<std::int64_t> ix(rank, 0);
  std::int64_t oo = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[oo] += pg[i];
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      oo += s[du];
      if (++ix[du] < g.shape()[du]) break;
      ix[du] = 0;
      oo -= s[du] * g.shape()[du];
    }
  }
  flops::add(n);
  return out;
}

// ------------------------------------------------------------------- scale

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.raw();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
  flops::add(x.numel());
  return out;
}

// In-place when this call uniquely owns the buffer; falls back to a copy.
template <typename T>
Tensor<T> scale_consume(Tensor<T> x, T c) {
  if (!x.buffer_unique()) return scale(x, c);
  T* p = x.raw();
  for (std::int64_t i = 0; i < x.numel(); ++i) p[i] *= c;
  flops::add(x.numel());
  return x;
}

// ------------------------------------------------------------------ matmul

// Batched matrix product with optional transposes on the last two axes and
// numpy-style broadcasting over the leading axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  if (a.rank() < 2 || b.rank() < 2)
    fail(ErrorKind::Shape,
         "matmul: need rank >= 2, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = trans_a ? a.dim(a.rank() - 1) : a.dim(a.rank() - 2);
  const std::int64_t ka = trans_a ? a.dim(a.rank() - 2) : a.dim(a.rank() - 1);
  const std::int64_t kb = trans_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::int64_t n = trans_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (ka != kb)
    fail(ErrorKind::Shape, "matmul: inner extents disagree: " + shape_str(a.shape()) +
                               (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                               (trans_b ? "^T" : ""));
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const Shape lead = broadcast_shapes(lead_a, lead_b, "matmul");

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const std::int64_t batches = shape_numel(lead);
  const auto sa = broadcast_strides(lead_a, lead);
  const auto sb = broadcast_strides(lead_b, lead);
  const std::int64_t a_mat = a.dim(a.rank() - 2) * a.dim(a.rank() - 1);
  const std::int64_t b_mat = b.dim(b.rank() - 2) * b.dim(b.rank() - 1);

  const T* pa0 = a.data();
  const T* pb0 = b.data();
  T* po0 = out.raw();

  std::vector<std::int64_t> ix(lead.size(), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t batch = 0; batch < batches; ++batch) {
    const T* pa = pa0 + oa * a_mat;
    const T* pb = pb0 + ob * b_mat;
    T* po = po0 + batch * m * n;
    if (!trans_a && !trans_b) {
      std::memset(po, 0, static_cast<std::size_t>(m * n) * sizeof(T));
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t l = 0; l < ka; ++l) {
          const T v = pa[i * ka + l];
          const T* brow = pb + l * n;
          T* crow = po + i * n;
          for (std::int64_t j = 0; j < n; ++j) crow[j] += v * brow[j];
        }
    } else if (!trans_a && trans_b) {
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          const T* ra = pa + i * ka;
          const T* rb = pb + j * ka;
          T acc = 0;
          for (std::int64_t l = 0; l < ka; ++l) acc += ra[l] * rb[l];
          po[i * n + j] = acc;
        }
    } else if (trans_a && !trans_b) {
      std::memset(po, 0, static_cast<std::size_t>(m * n) * sizeof(T));
      for (std::int64_t l = 0; l < ka; ++l)
        for (std::int64_t i = 0; i < m; ++i) {
          const T v = pa[l * m + i];
          const T* brow = pb + l * n;
          T* crow = po + i * n;
          for (std::int64_t j = 0; j < n; ++j) crow[j] += v * brow[j];
        }
    } else {
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          T acc = 0;
          for (std::int64_t l = 0; l < ka; ++l) acc += pa[l * m + i] * pb[j * kb + l];
          po[i * n + j] = acc;
        }
    }
    // advance broadcast offsets
    for (std::int64_t d = static_cast<std::int64_t>(lead.size()) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      oa += sa[du];
      ob += sb[du];
      if (++ix[du] < lead[du]) break;
      ix[du] = 0;
      oa -= sa[du] * lead[du];
      ob -= sb[du] * lead[du];
    }
  }
  flops::add(batches * m * n * ka);
  return out;
}

// ----------------------------------------------------------------- softmax

namespace detail {
// Decompose `shape` around `axis` into (outer, extent, inner).
inline void axis_split(const Shape& shape, std::int64_t axis, std::int64_t& outer,
                       std::int64_t& extent, std::int64_t& inner) {
  const auto rank = static_cast<std::int64_t>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    fail(ErrorKind::Usage, "softmax: axis out of range for " + shape_str(shape));
  outer = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  extent = shape[static_cast<std::size_t>(axis)];
  inner = 1;
  for (std::int64_t i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
}

template <typename T>
void softmax_rows(const T* in, T* out, std::int64_t outer, std::int64_t extent,
                  std::int64_t inner) {
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const T* x = in + o * extent * inner + i;
      T* y = out + o * extent * inner + i;
      T mx = x[0];
      for (std::int64_t e = 1; e < extent; ++e) mx = std::max(mx, x[e * inner]);
      T sum = 0;
      for (std::int64_t e = 0; e < extent; ++e) {
        const T v = std::exp(x[e * inner] - mx);
        y[e * inner] = v;
        sum += v;
      }
      const T inv = T(1) / sum;
      for (std::int64_t e = 0; e < extent; ++e) y[e * inner] *= inv;
    }
}
}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  if (!x.all_finite()) fail(ErrorKind::Numeric, "softmax: non-finite input");
  std::int64_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  Tensor<T> out(x.shape());
  detail::softmax_rows(x.data(), out.raw(), outer, extent, inner);
  flops::add(3 * x.numel());  // subtract-max, running sum, normalise
  return out;
}

template <typename T>
Tensor<T> softmax_consume(Tensor<T> x, std::int64_t axis) {
  if (!x.buffer_unique()) return softmax(x, axis);
  if (!x.all_finite()) fail(ErrorKind::Numeric, "softmax: non-finite input");
  std::int64_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  detail::softmax_rows(x.data(), x.raw(), outer, extent, inner);
  flops::add(3 * x.numel());
  return x;
}

// Backward: given s = softmax(x) and gy, gx = s * (gy - sum(gy * s)) per row.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& s, const Tensor<T>& gy, std::int64_t axis) {
  std::int64_t outer, extent, inner;
  detail::axis_split(s.shape(), axis, outer, extent, inner);
  Tensor<T> gx(s.shape());
  const T* ps = s.data();
  const T* pg = gy.data();
  T* po = gx.raw();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      T dot = 0;
      for (std::int64_t e = 0; e < extent; ++e) dot += ps[base + e * inner] * pg[base + e * inner];
      for (std::int64_t e = 0; e < extent; ++e) {
        const std::int64_t k = base + e * inner;
        po[k] = ps[k] * (pg[k] - dot);
      }
    }
  flops::add(3 * s.numel());
  return gx;
}

// --------------------------------------------------------------- layernorm

// Normalisation over the last axis; gamma/beta have that axis's extent.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    fail(ErrorKind::Shape, "layernorm: gamma " + shape_str(gamma.shape()) + ", beta " +
                               shape_str(beta.shape()) + " vs feature extent " + std::to_string(d));
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.raw();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    T* orow = po + r * d;
    for (std::int64_t i = 0; i < d; ++i) orow[i] = (row[i] - mean) * inv * pg[i] + pb[i];
  }
  flops::add(7 * x.numel() + 4 * rows);
  return out;
}

template <typename T>
void layernorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, T eps, const Tensor<T>& gy,
                        Tensor<T>& gx, Tensor<T>& ggamma, Tensor<T>& gbeta) {
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  gx = Tensor<T>(x.shape());
  ggamma = Tensor<T>::zeros(gamma.shape());
  gbeta = Tensor<T>::zeros(gamma.shape());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* py = gy.data();
  T* pgx = gx.raw();
  T* pgg = ggamma.raw();
  T* pgb = gbeta.raw();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    const T* grow = py + r * d;
    T mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    // xhat_i = (x_i - mean) * inv ; dxhat_i = gy_i * gamma_i
    // gx_i = inv/d * (d*dxhat_i - sum(dxhat) - xhat_i * sum(dxhat*xhat))
    T sum_dx = 0, sum_dxx = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T xhat = (row[i] - mean) * inv;
      const T dxh = grow[i] * pg[i];
      sum_dx += dxh;
      sum_dxx += dxh * xhat;
      pgg[i] += grow[i] * xhat;
      pgb[i] += grow[i];
    }
    T* gxrow = pgx + r * d;
    for (std::int64_t i = 0; i < d; ++i) {
      const T xhat = (row[i] - mean) * inv;
      const T dxh = grow[i] * pg[i];
      gxrow[i] = inv / static_cast<T>(d) *
                 (static_cast<T>(d) * dxh - sum_dx - xhat * sum_dxx);
    }
  }
  flops::add(16 * x.numel());
}

// -------------------------------------------------------------- activations

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.raw();
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440084436210485);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    po[i] = static_cast<T>(0.5) * px[i] * (T(1) + std::erf(px[i] * inv_sqrt2));
  flops::add(4 * x.numel());
  return out;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape());
  const T* px = x.data();
  const T* pg = gy.data();
  T* po = gx.raw();
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440084436210485);
  const T inv_sqrt2pi = static_cast<T>(0.39894228040143267793994605993438);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(px[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * px[i] * px[i]);
    po[i] = pg[i] * (cdf + px[i] * pdf);
  }
  flops::add(6 * x.numel());
  return gx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.raw();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
  flops::add(2 * x.numel());
  return out;
}

// ------------------------------------------------------------------- conv2d

struct Conv2dSpec {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t groups = 1;
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// x: [B, Cin, H, W], w: [Cout, Cin/groups, Kh, Kw], bias: [Cout] or empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dSpec& spec) {
  if (x.rank() != 4 || w.rank() != 4)
    fail(ErrorKind::Shape,
         "conv2d: need [B,C,H,W] x [Co,Ci,Kh,Kw], got " + shape_str(x.shape()) + " and " +
             shape_str(w.shape()));
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const std::int64_t g = spec.groups;
  if (g < 1 || Cin % g != 0 || Cout % g != 0 || w.dim(1) != Cin / g)
    fail(ErrorKind::Config, "conv2d: groups=" + std::to_string(g) + " inconsistent with " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (bias.defined() && bias.numel() != Cout)
    fail(ErrorKind::Shape, "conv2d: bias " + shape_str(bias.shape()) + " vs Cout " +
                               std::to_string(Cout));
  const std::int64_t Ho = conv_out_extent(H, Kh, spec.stride, spec.pad);
  const std::int64_t Wo = conv_out_extent(W, Kw, spec.stride, spec.pad);
  if (Ho < 1 || Wo < 1)
    fail(ErrorKind::Shape, "conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                               shape_str(w.shape()));
  Tensor<T> out({B, Cout, Ho, Wo});
  const std::int64_t cpg_in = Cin / g, cpg_out = Cout / g;
  const T* px = x.data();
  const T* pw = w.data();
  const T* pbias = bias.defined() ? bias.data() : nullptr;
  T* po = out.raw();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t oc = 0; oc < Cout; ++oc) {
      const std::int64_t gi = oc / cpg_out;
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          T acc = pbias ? pbias[oc] : T(0);
          for (std::int64_t ic = 0; ic < cpg_in; ++ic) {
            const std::int64_t c = gi * cpg_in + ic;
            for (std::int64_t kh = 0; kh < Kh; ++kh) {
              const std::int64_t ih = oh * spec.stride - spec.pad + kh;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = px + ((b * Cin + c) * H + ih) * W;
              const T* wrow = pw + ((oc * cpg_in + ic) * Kh + kh) * Kw;
              for (std::int64_t kw = 0; kw < Kw; ++kw) {
                const std::int64_t iw = ow * spec.stride - spec.pad + kw;
                if (iw < 0 || iw >= W) continue;
                acc += xrow[iw] * wrow[kw];
              }
            }
          }
          po[((b * Cout + oc) * Ho + oh) * Wo + ow] = acc;
        }
    }
  // padded taps counted as if executed (multiply by zero), as is conventional
  flops::add(B * Cout * Ho * Wo * (cpg_in * Kh * Kw + (pbias ? 1 : 0)));
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                     const Conv2dSpec& spec, const Tensor<T>& gy, Tensor<T>& gx, Tensor<T>& gw,
                     Tensor<T>& gbias) {
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const std::int64_t g = spec.groups;
  const std::int64_t cpg_in = Cin / g, cpg_out = Cout / g;
  const std::int64_t Ho = gy.dim(2), Wo = gy.dim(3);
  gx = Tensor<T>::zeros(x.shape());
  gw = Tensor<T>::zeros(w.shape());
  if (has_bias) gbias = Tensor<T>::zeros({Cout});
  const T* px = x.data();
  const T* pw = w.data();
  const T* pg = gy.data();
  T* pgx = gx.raw();
  T* pgw = gw.raw();
  T* pgb = has_bias ? gbias.raw() : nullptr;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t oc = 0; oc < Cout; ++oc) {
      const std::int64_t gi = oc / cpg_out;
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          const T gv = pg[((b * Cout + oc) * Ho + oh) * Wo + ow];
          if (pgb) pgb[oc] += gv;
          for (std::int64_t ic = 0; ic < cpg_in; ++ic) {
            const std::int64_t c = gi * cpg_in + ic;
            for (std::int64_t kh = 0; kh < Kh; ++kh) {
              const std::int64_t ih = oh * spec.stride - spec.pad + kh;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t kw = 0; kw < Kw; ++kw) {
                const std::int64_t iw = ow * spec.stride - spec.pad + kw;
                if (iw < 0 || iw >= W) continue;
                const std::int64_t xi = ((b * Cin + c) * H + ih) * W + iw;
                const std::int64_t wi = ((oc * cpg_in + ic) * Kh + kh) * Kw + kw;
                pgx[xi] += gv * pw[wi];
                pgw[wi] += gv * px[xi];
              }
            }
          }
        }
    }
  flops::add(2 * B * Cout * Ho * Wo * cpg_in * Kh * Kw);
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  const T* p = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += p[i];
  flops::add(x.numel());
  return Tensor<T>::scalar(acc);
}

// Mean over a sorted list of axes (no keepdims); empty axes = full mean.
template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, std::vector<std::int64_t> axes) {
  if (axes.empty())
    for (std::int64_t i = 0; i < x.rank(); ++i) axes.push_back(i);
  Shape out_shape;
  std::vector<bool> reduced(static_cast<std::size_t>(x.rank()), false);
  for (std::int64_t a : axes) {
    if (a < 0) a += x.rank();
    if (a < 0 || a >= x.rank()) fail(ErrorKind::Usage, "mean: axis out of range");
    reduced[static_cast<std::size_t>(a)] = true;
  }
  std::int64_t count = 1;
  for (std::int64_t i = 0; i < x.rank(); ++i) {
    if (reduced[static_cast<std::size_t>(i)])
      count *= x.dim(i);
    else
      out_shape.push_back(x.dim(i));
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto xs = row_major_strides(x.shape());
  T* po = out.raw();
  const T* px = x.data();
  std::vector<std::int64_t> ix(static_cast<std::size_t>(x.rank()), 0);
  std::int64_t oo = 0;
  std::vector<std::int64_t> ostride(static_cast<std::size_t>(x.rank()), 0);
  {
    auto os = row_major_strides(out_shape);
    std::size_t oi = 0;
    for (std::int64_t i = 0; i < x.rank(); ++i)
      if (!reduced[static_cast<std::size_t>(i)]) ostride[static_cast<std::size_t>(i)] = os[oi++];
  }
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    po[oo] += px[i];
    for (std::int64_t d = x.rank() - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      oo += ostride[du];
      if (++ix[du] < x.dim(d)) break;
      ix[du] = 0;
      oo -= ostride[du] * x.dim(d);
    }
  }
  const T inv = T(1) / static_cast<T>(count);
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= inv;
  flops::add(x.numel() + out.numel());
  return out;
}

// Spread gy back over the axes mean_axes reduced, scaled by 1/count.
template <typename T>
Tensor<T> mean_axes_backward(const Tensor<T>& gy, const Shape& x_shape,
                             std::vector<std::int64_t> axes) {
  const auto rank = static_cast<std::int64_t>(x_shape.size());
  if (axes.empty())
    for (std::int64_t i = 0; i < rank; ++i) axes.push_back(i);
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (std::int64_t a : axes) {
    if (a < 0) a += rank;
    reduced[static_cast<std::size_t>(a)] = true;
  }
  std::int64_t count = 1;
  for (std::int64_t i = 0; i < rank; ++i)
    if (reduced[static_cast<std::size_t>(i)]) count *= x_shape[static_cast<std::size_t>(i)];
  Tensor<T> gx(x_shape);
  std::vector<std::int64_t> ostride(static_cast<std::size_t>(rank), 0);
  {
    Shape out_shape;
    for (std::int64_t i = 0; i < rank; ++i)
      if (!reduced[static_cast<std::size_t>(i)]) out_shape.push_back(x_shape[static_cast<std::size_t>(i)]);
    auto os = row_major_strides(out_shape);
    std::size_t oi = 0;
    for (std::int64_t i = 0; i < rank; ++i)
      if (!reduced[static_cast<std::size_t>(i)]) ostride[static_cast<std::size_t>(i)] = os[oi++];
  }
  const T inv = T(1) / static_cast<T>(count);
  const T* pg = gy.data();
  T* po = gx.raw();
  std::vector<std::int64_t> ix(static_cast<std::size_t>(rank), 0);
  std::int64_t oo = 0;
  for (std::int64_t i = 0; i < gx.numel(); ++i) {
    po[i] = pg[oo] * inv;
    for (std::int64_t d = rank - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      oo += ostride[du];
      if (++ix[du] < x_shape[du]) break;
      ix[du] = 0;
      oo -= ostride[du] * x_shape[du];
    }
  }
  flops::add(gx.numel());
  return gx;
}

// ----------------------------------------------------------------- permute

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& perm) {
  if (static_cast<std::int64_t>(perm.size()) != x.rank())
    fail(ErrorKind::Usage, "permute: order has " + std::to_string(perm.size()) +
                               " axes for tensor " + shape_str(x.shape()));
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = x.dim(perm[i]);
  Tensor<T> out(out_shape);
  const auto xs = row_major_strides(x.shape());
  std::vector<std::int64_t> src_stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    src_stride[i] = xs[static_cast<std::size_t>(perm[i])];
  const T* px = x.data();
  T* po = out.raw();
  std::vector<std::int64_t> ix(perm.size(), 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    po[i] = px[off];
    for (std::int64_t d = static_cast<std::int64_t>(perm.size()) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      off += src_stride[du];
      if (++ix[du] < out_shape[du]) break;
      ix[du] = 0;
      off -= src_stride[du] * out_shape[du];
    }
  }
  return out;
}

inline std::vector<std::int64_t> inverse_permutation(const std::vector<std::int64_t>& perm) {
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
  return inv;
}

// ----------------------------------------------------------- cross entropy

// Mean cross-entropy of logits [B, K] against integer labels; stable.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    fail(ErrorKind::Shape, "cross_entropy: logits must be [B,K], got " + shape_str(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    fail(ErrorKind::Shape, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                               std::to_string(B));
  const T* p = logits.data();
  T loss = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= K) fail(ErrorKind::Usage, "cross_entropy: label out of range");
    const T* row = p + b * K;
    T mx = row[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T sum = 0;
    for (std::int64_t k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    loss += std::log(sum) + mx - row[y];
  }
  loss /= static_cast<T>(B);
  flops::add(4 * logits.numel());
  return Tensor<T>::scalar(loss);
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, const std::vector<int>& labels,
                                 T upstream) {
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  Tensor<T> gx(logits.shape());
  const T* p = logits.data();
  T* po = gx.raw();
  for (std::int64_t b = 0; b < B; ++b) {
    const T* row = p + b * K;
    T* orow = po + b * K;
    T mx = row[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T sum = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - mx);
      sum += orow[k];
    }
    const T inv = T(1) / sum;
    for (std::int64_t k = 0; k < K; ++k) orow[k] *= inv;
    orow[labels[static_cast<std::size_t>(b)]] -= T(1);
    const T c = upstream / static_cast<T>(B);
    for (std::int64_t k = 0; k < K; ++k) orow[k] *= c;
  }
  flops::add(4 * logits.numel());
  return gx;
}

}  // namespace linglo::kernels
