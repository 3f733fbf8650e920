#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lvsnet/core/gemm.hpp"
#include "lvsnet/core/rng.hpp"
#include "lvsnet/core/tensor.hpp"
#include "lvsnet/nn/graph.hpp"

// Differentiable NHWC ops. Convolutions are im2col + GEMM, tiled over output
// rows so scratch stays bounded; the transposed convolution reuses the same
// engine through the conv/conv-adjoint correspondence. Tiles run sequentially,
// which keeps every result bit-deterministic regardless of BLAS threading.

namespace lvsnet::nn {

namespace detail {

constexpr std::int64_t kConvScratchBytes = 16u << 20;

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Gather im2col rows for conv output pixels [m0, m1) of image n.
// Row layout: [ky][kx][ci], matching weight layout {ky,kx,ci,co}.
template <class T>
void im2col_rows(const Tensor<T>& x, int n, int kh, int kw, int stride, int pad, int out_w,
                 std::int64_t m0, std::int64_t m1, T* cols) {
  const Shape s = x.shape();
  const int ci = s.c;
  const std::int64_t row_len = static_cast<std::int64_t>(kh) * kw * ci;
  for (std::int64_t m = m0; m < m1; ++m) {
    const int oy = static_cast<int>(m / out_w);
    const int ox = static_cast<int>(m % out_w);
    T* row = cols + (m - m0) * row_len;
    for (int ky = 0; ky < kh; ++ky) {
      const int iy = oy * stride - pad + ky;
      for (int kx = 0; kx < kw; ++kx) {
        const int ix = ox * stride - pad + kx;
        T* dst = row + (static_cast<std::int64_t>(ky) * kw + kx) * ci;
        if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) {
          for (int c = 0; c < ci; ++c) dst[c] = T(0);
        } else {
          const T* src = x.data() + x.index(n, iy, ix, 0);
          for (int c = 0; c < ci; ++c) dst[c] = src[c];
        }
      }
    }
  }
}

// Scatter-add col rows back into image space (adjoint of im2col_rows).
template <class T>
void col2im_rows(Tensor<T>& x, int n, int kh, int kw, int stride, int pad, int out_w,
                 std::int64_t m0, std::int64_t m1, const T* cols) {
  const Shape s = x.shape();
  const int ci = s.c;
  const std::int64_t row_len = static_cast<std::int64_t>(kh) * kw * ci;
  for (std::int64_t m = m0; m < m1; ++m) {
    const int oy = static_cast<int>(m / out_w);
    const int ox = static_cast<int>(m % out_w);
    const T* row = cols + (m - m0) * row_len;
    for (int ky = 0; ky < kh; ++ky) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= s.h) continue;
      for (int kx = 0; kx < kw; ++kx) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= s.w) continue;
        const T* src = row + (static_cast<std::int64_t>(ky) * kw + kx) * ci;
        T* dst = x.data() + x.index(n, iy, ix, 0);
        for (int c = 0; c < ci; ++c) dst[c] += src[c];
      }
    }
  }
}

template <class T>
std::int64_t conv_tile_rows(std::int64_t row_len) {
  const std::int64_t rows = kConvScratchBytes / (row_len * static_cast<std::int64_t>(sizeof(T)));
  return rows < 1 ? 1 : rows;
}

// y(n,ho,wo,co) = conv(x; w{kh,kw,ci,co}, stride, pad)
template <class T>
void conv_fwd_plain(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, Tensor<T>& y) {
  const Shape xs = x.shape(), ws = w.shape(), ys = y.shape();
  const int kh = ws.n, kw = ws.h, ci = ws.w, co = ws.c;
  if (xs.c != ci) throw shape_error("conv2d: input channels " + std::to_string(xs.c) + " != kernel channels " + std::to_string(ci));
  const std::int64_t row_len = static_cast<std::int64_t>(kh) * kw * ci;
  const std::int64_t m_total = static_cast<std::int64_t>(ys.h) * ys.w;

  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm<T>(false, false, static_cast<std::int64_t>(xs.n) * m_total, co, ci, T(1), x.data(), ci,
            w.data(), co, T(0), y.data(), co);
    return;
  }

  const std::int64_t tile = conv_tile_rows<T>(row_len);
  std::vector<T> cols(static_cast<size_t>(std::min(tile, m_total) * row_len));
  for (int n = 0; n < xs.n; ++n) {
    for (std::int64_t m0 = 0; m0 < m_total; m0 += tile) {
      const std::int64_t m1 = std::min(m0 + tile, m_total);
      im2col_rows(x, n, kh, kw, stride, pad, ys.w, m0, m1, cols.data());
      gemm<T>(false, false, m1 - m0, co, row_len, T(1), cols.data(), row_len, w.data(), co, T(0),
              y.data() + y.index(n, 0, 0, 0) + m0 * co, co);
    }
  }
}

// dx += conv^T(dy; w) — adjoint data map. dx must be zero-initialised by the caller.
template <class T>
void conv_bwd_data_plain(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                         Tensor<T>& dx) {
  const Shape ys = dy.shape(), ws = w.shape(), xs = dx.shape();
  const int kh = ws.n, kw = ws.h, ci = ws.w, co = ws.c;
  if (ys.c != co) throw shape_error("conv2d adjoint: channels " + std::to_string(ys.c) + " != kernel outputs " + std::to_string(co));
  if (xs.c != ci) throw shape_error("conv2d adjoint: target channels " + std::to_string(xs.c) + " != kernel inputs " + std::to_string(ci));
  const std::int64_t row_len = static_cast<std::int64_t>(kh) * kw * ci;
  const std::int64_t m_total = static_cast<std::int64_t>(ys.h) * ys.w;

  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm<T>(false, true, static_cast<std::int64_t>(ys.n) * m_total, ci, co, T(1), dy.data(), co,
            w.data(), co, T(1), dx.data(), ci);
    return;
  }

  const std::int64_t tile = conv_tile_rows<T>(row_len);
  std::vector<T> cols(static_cast<size_t>(std::min(tile, m_total) * row_len));
  for (int n = 0; n < ys.n; ++n) {
    for (std::int64_t m0 = 0; m0 < m_total; m0 += tile) {
      const std::int64_t m1 = std::min(m0 + tile, m_total);
      gemm<T>(false, true, m1 - m0, row_len, co, T(1), dy.data() + dy.index(n, 0, 0, 0) + m0 * co,
              co, w.data(), co, T(0), cols.data(), row_len);
      col2im_rows(dx, n, kh, kw, stride, pad, ys.w, m0, m1, cols.data());
    }
  }
}

// dw += sum_m im2col(x)_m^T dy_m
template <class T>
void conv_bwd_weight_plain(const Tensor<T>& x, const Tensor<T>& dy, int stride, int pad,
                           Tensor<T>& dw) {
  const Shape xs = x.shape(), ys = dy.shape(), ws = dw.shape();
  const int kh = ws.n, kw = ws.h, ci = ws.w, co = ws.c;
  const std::int64_t row_len = static_cast<std::int64_t>(kh) * kw * ci;
  const std::int64_t m_total = static_cast<std::int64_t>(ys.h) * ys.w;

  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm<T>(true, false, ci, co, static_cast<std::int64_t>(xs.n) * m_total, T(1), x.data(), ci,
            dy.data(), co, T(1), dw.data(), co);
    return;
  }

  const std::int64_t tile = conv_tile_rows<T>(row_len);
  std::vector<T> cols(static_cast<size_t>(std::min(tile, m_total) * row_len));
  for (int n = 0; n < xs.n; ++n) {
    for (std::int64_t m0 = 0; m0 < m_total; m0 += tile) {
      const std::int64_t m1 = std::min(m0 + tile, m_total);
      im2col_rows(x, n, kh, kw, stride, pad, ys.w, m0, m1, cols.data());
      gemm<T>(true, false, row_len, co, m1 - m0, T(1), cols.data(), row_len,
              dy.data() + dy.index(n, 0, 0, 0) + m0 * co, co, T(1), dw.data(), co);
    }
  }
}

// Strides with 0 on broadcast dims, for numpy-style binary ops.
struct BcastPlan {
  Shape out;
  std::int64_t sa[4];
  std::int64_t sb[4];
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* who) {
  auto one = [&](int da, int db, int i, BcastPlan& p) {
    if (da != db && da != 1 && db != 1) {
      throw shape_error(std::string(who) + ": shapes " + a.str() + " and " + b.str() + " do not broadcast");
    }
    const int d = da == 1 ? db : da;
    (&p.out.n)[i] = d;
    return d;
  };
  BcastPlan p{};
  one(a.n, b.n, 0, p);
  one(a.h, b.h, 1, p);
  one(a.w, b.w, 2, p);
  one(a.c, b.c, 3, p);
  const std::int64_t as[4] = {static_cast<std::int64_t>(a.h) * a.w * a.c, static_cast<std::int64_t>(a.w) * a.c, a.c, 1};
  const std::int64_t bs[4] = {static_cast<std::int64_t>(b.h) * b.w * b.c, static_cast<std::int64_t>(b.w) * b.c, b.c, 1};
  const int ad[4] = {a.n, a.h, a.w, a.c};
  const int bd[4] = {b.n, b.h, b.w, b.c};
  for (int i = 0; i < 4; ++i) {
    p.sa[i] = ad[i] == 1 ? 0 : as[i];
    p.sb[i] = bd[i] == 1 ? 0 : bs[i];
  }
  return p;
}

template <class T, class F>
void bcast_apply(const Tensor<T>& a, const Tensor<T>& b, const BcastPlan& p, Tensor<T>& out, F f) {
  std::int64_t o = 0;
  for (int n = 0; n < p.out.n; ++n)
    for (int h = 0; h < p.out.h; ++h)
      for (int w = 0; w < p.out.w; ++w) {
        const std::int64_t ia0 = n * p.sa[0] + h * p.sa[1] + w * p.sa[2];
        const std::int64_t ib0 = n * p.sb[0] + h * p.sb[1] + w * p.sb[2];
        for (int c = 0; c < p.out.c; ++c, ++o) out[o] = f(a[ia0 + c * p.sa[3]], b[ib0 + c * p.sb[3]]);
      }
}

// Accumulate dy into da through the broadcast pattern (sum over expanded dims).
template <class T, class F>
void bcast_accumulate(const Tensor<T>& dy, const BcastPlan& p, const std::int64_t* stride,
                      Tensor<T>& dst, F term) {
  std::int64_t o = 0;
  for (int n = 0; n < p.out.n; ++n)
    for (int h = 0; h < p.out.h; ++h)
      for (int w = 0; w < p.out.w; ++w) {
        const std::int64_t i0 = n * stride[0] + h * stride[1] + w * stride[2];
        for (int c = 0; c < p.out.c; ++c, ++o) dst[i0 + c * stride[3]] += term(o) * dy[o];
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  Tensor<T> out(plan.out);
  detail::bcast_apply(a.value(), b.value(), plan, out, [](T x, T y) { return x + y; });
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      std::move(out), {an, bn}, [an, bn, plan](Node<T>& n) {
        auto one = [](std::int64_t) { return T(1); };
        if (an->requires_grad) {
          an->ensure_grad();
          detail::bcast_accumulate(n.grad, plan, plan.sa, an->grad, one);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::bcast_accumulate(n.grad, plan, plan.sb, bn->grad, one);
        }
      });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  Tensor<T> out(plan.out);
  detail::bcast_apply(a.value(), b.value(), plan, out, [](T x, T y) { return x * y; });
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      std::move(out), {an, bn}, [an, bn, plan](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          // other operand value gathered through its own broadcast strides
          const Tensor<T>& bv = bn->value;
          Tensor<T> scale(plan.out);
          detail::bcast_apply(bv, bv, detail::BcastPlan{plan.out, {plan.sb[0], plan.sb[1], plan.sb[2], plan.sb[3]}, {plan.sb[0], plan.sb[1], plan.sb[2], plan.sb[3]}}, scale, [](T x, T) { return x; });
          detail::bcast_accumulate(n.grad, plan, plan.sa, an->grad, [&](std::int64_t o) { return scale[o]; });
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          const Tensor<T>& av = an->value;
          Tensor<T> scale(plan.out);
          detail::bcast_apply(av, av, detail::BcastPlan{plan.out, {plan.sa[0], plan.sa[1], plan.sa[2], plan.sa[3]}, {plan.sa[0], plan.sa[1], plan.sa[2], plan.sa[3]}}, scale, [](T x, T) { return x; });
          detail::bcast_accumulate(n.grad, plan, plan.sb, bn->grad, [&](std::int64_t o) { return scale[o]; });
        }
      });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
      if (xn->value[i] > T(0)) xn->grad[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, inv_sqrt2](Node<T>& n) {
    xn->ensure_grad();
    const T inv_sqrt2pi = T(0.39894228040143267794);
    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
      const T v = xn->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      xn->grad[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xv[i]));
  auto xn = x.node();
  auto result = detail::make_result<T>(std::move(out), {xn}, [xn](Node<T>&) {});
  auto rn = result.node();
  if (rn->requires_grad) {
    rn->backward = [xn, rn_weak = std::weak_ptr<Node<T>>(rn)](Node<T>& n) {
      xn->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) {
        const T s = n.value[i];
        xn->grad[i] += n.grad[i] * s * (T(1) - s);
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// shape plumbing

template <class T>
Var<T> concat_c(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw shape_error("concat: spatial/batch mismatch " + as.str() + " vs " + bs.str());
  }
  Tensor<T> out({as.n, as.h, as.w, as.c + bs.c});
  const std::int64_t pixels = static_cast<std::int64_t>(as.n) * as.h * as.w;
  for (std::int64_t p = 0; p < pixels; ++p) {
    T* dst = out.data() + p * (as.c + bs.c);
    const T* pa = a.value().data() + p * as.c;
    const T* pb = b.value().data() + p * bs.c;
    for (int c = 0; c < as.c; ++c) dst[c] = pa[c];
    for (int c = 0; c < bs.c; ++c) dst[as.c + c] = pb[c];
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(std::move(out), {an, bn}, [an, bn, as, bs, pixels](Node<T>& n) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::int64_t p = 0; p < pixels; ++p) {
      const T* src = n.grad.data() + p * (as.c + bs.c);
      if (an->requires_grad) {
        T* da = an->grad.data() + p * as.c;
        for (int c = 0; c < as.c; ++c) da[c] += src[c];
      }
      if (bn->requires_grad) {
        T* db = bn->grad.data() + p * bs.c;
        for (int c = 0; c < bs.c; ++c) db[c] += src[as.c + c];
      }
    }
  });
}

template <class T>
Var<T> slice_c(const Var<T>& x, int c0, int c1) {
  const Shape xs = x.shape();
  if (c0 < 0 || c1 > xs.c || c0 >= c1) {
    throw shape_error("slice_c: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " + std::to_string(xs.c));
  }
  const int cw = c1 - c0;
  Tensor<T> out({xs.n, xs.h, xs.w, cw});
  const std::int64_t pixels = static_cast<std::int64_t>(xs.n) * xs.h * xs.w;
  for (std::int64_t p = 0; p < pixels; ++p) {
    const T* src = x.value().data() + p * xs.c + c0;
    T* dst = out.data() + p * cw;
    for (int c = 0; c < cw; ++c) dst[c] = src[c];
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, xs, c0, cw, pixels](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t p = 0; p < pixels; ++p) {
      const T* src = n.grad.data() + p * cw;
      T* dst = xn->grad.data() + p * xs.c + c0;
      for (int c = 0; c < cw; ++c) dst[c] += src[c];
    }
  });
}

// ---------------------------------------------------------------------------
// convolutions

// w layout {kh,kw,ci,co}
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int oh = detail::conv_out_extent(xs.h, ws.n, stride, pad);
  const int ow = detail::conv_out_extent(xs.w, ws.h, stride, pad);
  if (oh < 1 || ow < 1) throw shape_error("conv2d: kernel larger than padded input " + xs.str());
  Tensor<T> out({xs.n, oh, ow, ws.c});
  detail::conv_fwd_plain(x.value(), w.value(), stride, pad, out);
  auto xn = x.node(), wn = w.node();
  return detail::make_result<T>(std::move(out), {xn, wn}, [xn, wn, stride, pad](Node<T>& n) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      detail::conv_bwd_data_plain(n.grad, wn->value, stride, pad, xn->grad);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      detail::conv_bwd_weight_plain(xn->value, n.grad, stride, pad, wn->grad);
    }
  });
}

// Transposed conv, stride 2, kernel 3, exact 2x upsampling (pad 1 with output
// padding 1 in the usual convention). Weight stays in the adjoint-conv layout
// {kh,kw,co,ci} so both directions ride the same GEMM engine.
template <class T>
Var<T> tconv2d_x2(const Var<T>& x, const Var<T>& w) {
  const Shape xs = x.shape(), ws = w.shape();
  constexpr int stride = 2, pad = 1;
  if (ws.c != xs.c) throw shape_error("tconv2d: input channels " + std::to_string(xs.c) + " != kernel inputs " + std::to_string(ws.c));
  Tensor<T> out({xs.n, xs.h * 2, xs.w * 2, ws.w});
  detail::conv_bwd_data_plain(x.value(), w.value(), stride, pad, out);
  auto xn = x.node(), wn = w.node();
  return detail::make_result<T>(std::move(out), {xn, wn}, [xn, wn, stride, pad](Node<T>& n) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      Tensor<T> dx(xn->value.shape());
      detail::conv_fwd_plain(n.grad, wn->value, stride, pad, dx);
      xn->grad.add_scaled(dx, T(1));
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      detail::conv_bwd_weight_plain(n.grad, xn->value, stride, pad, wn->grad);
    }
  });
}

// Depth-wise conv, stride 1, same padding, odd kernel. w layout {k,k,1,c}.
template <class T>
Var<T> dwconv2d(const Var<T>& x, const Var<T>& w) {
  const Shape xs = x.shape(), ws = w.shape();
  const int k = ws.n, pad = k / 2;
  if (ws.c != xs.c || ws.w != 1) throw shape_error("dwconv2d: weight " + ws.str() + " does not match input " + xs.str());
  Tensor<T> out(xs);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  for (int n = 0; n < xs.n; ++n)
    for (int oy = 0; oy < xs.h; ++oy)
      for (int ox = 0; ox < xs.w; ++ox) {
        T* dst = out.data() + out.index(n, oy, ox, 0);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy - pad + ky;
          if (iy < 0 || iy >= xs.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox - pad + kx;
            if (ix < 0 || ix >= xs.w) continue;
            const T* src = xv.data() + xv.index(n, iy, ix, 0);
            const T* wk = wv.data() + wv.index(ky, kx, 0, 0);
            for (int c = 0; c < xs.c; ++c) dst[c] += wk[c] * src[c];
          }
        }
      }
  auto xn = x.node(), wn = w.node();
  return detail::make_result<T>(std::move(out), {xn, wn}, [xn, wn, xs, k, pad](Node<T>& n) {
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    const Tensor<T>& wv = wn->value;
    const Tensor<T>& xv = xn->value;
    for (int b = 0; b < xs.n; ++b)
      for (int oy = 0; oy < xs.h; ++oy)
        for (int ox = 0; ox < xs.w; ++ox) {
          const T* g = n.grad.data() + n.grad.index(b, oy, ox, 0);
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox - pad + kx;
              if (ix < 0 || ix >= xs.w) continue;
              if (xn->requires_grad) {
                T* dx = xn->grad.data() + xv.index(b, iy, ix, 0);
                const T* wk = wv.data() + wv.index(ky, kx, 0, 0);
                for (int c = 0; c < xs.c; ++c) dx[c] += wk[c] * g[c];
              }
              if (wn->requires_grad) {
                T* dw = wn->grad.data() + wv.index(ky, kx, 0, 0);
                const T* src = xv.data() + xv.index(b, iy, ix, 0);
                for (int c = 0; c < xs.c; ++c) dw[c] += src[c] * g[c];
              }
            }
          }
        }
  });
}

// Channel-wise conv over a pooled pair: out_c = w[.,.,0,c]*a_c + w[.,.,1,c]*b_c
// convolved spatially (stride 1, same padding). Equivalent to a grouped conv
// over the channel-interleaved concat of a and b with groups == channels.
template <class T>
Var<T> pooled_pair_conv(const Var<T>& a, const Var<T>& b, const Var<T>& w) {
  const Shape xs = a.shape(), ws = w.shape();
  const int k = ws.n, pad = k / 2;
  if (!(a.shape() == b.shape())) throw shape_error("pooled_pair_conv: branch shapes differ");
  if (ws.c != xs.c || ws.w != 2) throw shape_error("pooled_pair_conv: weight " + ws.str() + " does not match input " + xs.str());
  Tensor<T> out(xs);
  const Tensor<T>*const branches[2] = {&a.value(), &b.value()};
  const Tensor<T>& wv = w.value();
  for (int n = 0; n < xs.n; ++n)
    for (int oy = 0; oy < xs.h; ++oy)
      for (int ox = 0; ox < xs.w; ++ox) {
        T* dst = out.data() + out.index(n, oy, ox, 0);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy - pad + ky;
          if (iy < 0 || iy >= xs.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox - pad + kx;
            if (ix < 0 || ix >= xs.w) continue;
            for (int s = 0; s < 2; ++s) {
              const T* src = branches[s]->data() + branches[s]->index(n, iy, ix, 0);
              const T* wk = wv.data() + wv.index(ky, kx, s, 0);
              for (int c = 0; c < xs.c; ++c) dst[c] += wk[c] * src[c];
            }
          }
        }
      }
  auto an = a.node(), bn = b.node(), wn = w.node();
  return detail::make_result<T>(std::move(out), {an, bn, wn}, [an, bn, wn, xs, k, pad](Node<T>& n) {
    Node<T>* branches[2] = {an.get(), bn.get()};
    for (Node<T>* br : branches)
      if (br->requires_grad) br->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    const Tensor<T>& wv = wn->value;
    for (int b = 0; b < xs.n; ++b)
      for (int oy = 0; oy < xs.h; ++oy)
        for (int ox = 0; ox < xs.w; ++ox) {
          const T* g = n.grad.data() + n.grad.index(b, oy, ox, 0);
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox - pad + kx;
              if (ix < 0 || ix >= xs.w) continue;
              for (int s = 0; s < 2; ++s) {
                const T* wk = wv.data() + wv.index(ky, kx, s, 0);
                if (branches[s]->requires_grad) {
                  T* dx = branches[s]->grad.data() + branches[s]->grad.index(b, iy, ix, 0);
                  for (int c = 0; c < xs.c; ++c) dx[c] += wk[c] * g[c];
                }
                if (wn->requires_grad) {
                  T* dw = wn->grad.data() + wv.index(ky, kx, s, 0);
                  const T* src = branches[s]->value.data() + branches[s]->value.index(b, iy, ix, 0);
                  for (int c = 0; c < xs.c; ++c) dw[c] += src[c] * g[c];
                }
              }
            }
          }
        }
  });
}

// ---------------------------------------------------------------------------
// pooling

template <class T>
Var<T> maxpool2x2(const Var<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw shape_error("maxpool2x2: odd spatial dimension at pool time, input " + xs.str());
  }
  Tensor<T> out({xs.n, xs.h / 2, xs.w / 2, xs.c});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out.size()));
  const Tensor<T>& xv = x.value();
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int oy = 0; oy < xs.h / 2; ++oy)
      for (int ox = 0; ox < xs.w / 2; ++ox)
        for (int c = 0; c < xs.c; ++c, ++o) {
          T best{};
          std::int64_t best_i = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t i = xv.index(n, oy * 2 + dy, ox * 2 + dx, c);
              if (best_i < 0 || xv[i] > best) {
                best = xv[i];
                best_i = i;
              }
            }
          out[o] = best;
          (*argmax)[static_cast<size_t>(o)] = best_i;
        }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, argmax](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
      xn->grad[(*argmax)[static_cast<size_t>(i)]] += n.grad[i];
    }
  });
}

// 3x3 stride-1 same-padded pools; border windows use only in-bounds taps.
template <class T>
Var<T> maxpool3x3_same(const Var<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> out(xs);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out.size()));
  const Tensor<T>& xv = x.value();
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int oy = 0; oy < xs.h; ++oy)
      for (int ox = 0; ox < xs.w; ++ox)
        for (int c = 0; c < xs.c; ++c, ++o) {
          T best{};
          std::int64_t best_i = -1;
          for (int dy = -1; dy <= 1; ++dy) {
            const int iy = oy + dy;
            if (iy < 0 || iy >= xs.h) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int ix = ox + dx;
              if (ix < 0 || ix >= xs.w) continue;
              const std::int64_t i = xv.index(n, iy, ix, c);
              if (best_i < 0 || xv[i] > best) {
                best = xv[i];
                best_i = i;
              }
            }
          }
          out[o] = best;
          (*argmax)[static_cast<size_t>(o)] = best_i;
        }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, argmax](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
      xn->grad[(*argmax)[static_cast<size_t>(i)]] += n.grad[i];
    }
  });
}

template <class T>
Var<T> avgpool3x3_same(const Var<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> out(xs);
  const Tensor<T>& xv = x.value();
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int oy = 0; oy < xs.h; ++oy)
      for (int ox = 0; ox < xs.w; ++ox) {
        const int y0 = std::max(0, oy - 1), y1 = std::min(xs.h - 1, oy + 1);
        const int x0 = std::max(0, ox - 1), x1 = std::min(xs.w - 1, ox + 1);
        const T inv = T(1) / static_cast<T>((y1 - y0 + 1) * (x1 - x0 + 1));
        for (int c = 0; c < xs.c; ++c, ++o) {
          T acc = T(0);
          for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix) acc += xv[xv.index(n, iy, ix, c)];
          out[o] = acc * inv;
        }
      }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn, }, [xn, xs](Node<T>& n) {
    xn->ensure_grad();
    std::int64_t o = 0;
    for (int b = 0; b < xs.n; ++b)
      for (int oy = 0; oy < xs.h; ++oy)
        for (int ox = 0; ox < xs.w; ++ox) {
          const int y0 = std::max(0, oy - 1), y1 = std::min(xs.h - 1, oy + 1);
          const int x0 = std::max(0, ox - 1), x1 = std::min(xs.w - 1, ox + 1);
          const T inv = T(1) / static_cast<T>((y1 - y0 + 1) * (x1 - x0 + 1));
          for (int c = 0; c < xs.c; ++c, ++o) {
            const T g = n.grad[o] * inv;
            for (int iy = y0; iy <= y1; ++iy)
              for (int ix = x0; ix <= x1; ++ix) xn->grad[xn->grad.index(b, iy, ix, c)] += g;
          }
        }
  });
}

template <class T>
Var<T> global_avgpool(const Var<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> out({xs.n, 1, 1, xs.c});
  const Tensor<T>& xv = x.value();
  const std::int64_t hw = static_cast<std::int64_t>(xs.h) * xs.w;
  for (int n = 0; n < xs.n; ++n) {
    T* dst = out.data() + out.index(n, 0, 0, 0);
    const T* src = xv.data() + xv.index(n, 0, 0, 0);
    for (std::int64_t p = 0; p < hw; ++p)
      for (int c = 0; c < xs.c; ++c) dst[c] += src[p * xs.c + c];
    for (int c = 0; c < xs.c; ++c) dst[c] /= static_cast<T>(hw);
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, xs, hw](Node<T>& n) {
    xn->ensure_grad();
    for (int b = 0; b < xs.n; ++b) {
      const T* g = n.grad.data() + n.grad.index(b, 0, 0, 0);
      T* dst = xn->grad.data() + xn->grad.index(b, 0, 0, 0);
      for (std::int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < xs.c; ++c) dst[p * xs.c + c] += g[c] / static_cast<T>(hw);
    }
  });
}

// ---------------------------------------------------------------------------
// regularisation / normalisation

template <class T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw config_error("dropout: rate must be < 1");
  auto keep = std::make_shared<Tensor<T>>(x.shape());
  const T scale = T(1.0 / (1.0 - rate));
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    const bool kept = rng.uniform(0.0, 1.0) >= rate;
    (*keep)[i] = kept ? scale : T(0);
    out[i] = xv[i] * (*keep)[i];
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn, keep](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i] * (*keep)[i];
  });
}

// Batch norm over (n,h,w) per channel. Training mode normalises with batch
// statistics and folds them into the running estimates in place; eval mode is
// a pure affine map of the running estimates.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Var<T>& running_mean,
                 Var<T>& running_var, T eps, T momentum, bool training) {
  const Shape xs = x.shape();
  const int C = xs.c;
  if (gamma.shape().c != C || beta.shape().c != C) {
    throw shape_error("batchnorm: affine params do not match channels " + std::to_string(C));
  }
  const std::int64_t m = static_cast<std::int64_t>(xs.n) * xs.h * xs.w;
  const Tensor<T>& xv = x.value();

  Tensor<T> mean({1, 1, 1, C}), var({1, 1, 1, C});
  if (training) {
    for (std::int64_t p = 0; p < m; ++p)
      for (int c = 0; c < C; ++c) mean[c] += xv[p * C + c];
    for (int c = 0; c < C; ++c) mean[c] /= static_cast<T>(m);
    for (std::int64_t p = 0; p < m; ++p)
      for (int c = 0; c < C; ++c) {
        const T d = xv[p * C + c] - mean[c];
        var[c] += d * d;
      }
    for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(m);
    for (int c = 0; c < C; ++c) {
      running_mean.value()[c] = momentum * running_mean.value()[c] + (T(1) - momentum) * mean[c];
      running_var.value()[c] = momentum * running_var.value()[c] + (T(1) - momentum) * var[c];
    }
  } else {
    mean = running_mean.value();
    var = running_var.value();
  }

  auto inv_std = std::make_shared<Tensor<T>>(Shape{1, 1, 1, C});
  for (int c = 0; c < C; ++c) (*inv_std)[c] = T(1) / std::sqrt(var[c] + eps);
  auto xhat = std::make_shared<Tensor<T>>(xs);
  Tensor<T> out(xs);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::int64_t p = 0; p < m; ++p)
    for (int c = 0; c < C; ++c) {
      const T h = (xv[p * C + c] - mean[c]) * (*inv_std)[c];
      (*xhat)[p * C + c] = h;
      out[p * C + c] = gv[c] * h + bv[c];
    }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      std::move(out), {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, m, C, training](Node<T>& n) {
        // d(gamma), d(beta)
        Tensor<T> dg({1, 1, 1, C}), db({1, 1, 1, C});
        for (std::int64_t p = 0; p < m; ++p)
          for (int c = 0; c < C; ++c) {
            dg[c] += n.grad[p * C + c] * (*xhat)[p * C + c];
            db[c] += n.grad[p * C + c];
          }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad.add_scaled(dg, T(1));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad.add_scaled(db, T(1));
        }
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const Tensor<T>& gv = gn->value;
        if (training) {
          for (std::int64_t p = 0; p < m; ++p)
            for (int c = 0; c < C; ++c) {
              const T term = n.grad[p * C + c] - db[c] / static_cast<T>(m) -
                             (*xhat)[p * C + c] * dg[c] / static_cast<T>(m);
              xn->grad[p * C + c] += gv[c] * (*inv_std)[c] * term;
            }
        } else {
          for (std::int64_t p = 0; p < m; ++p)
            for (int c = 0; c < C; ++c) {
              xn->grad[p * C + c] += n.grad[p * C + c] * gv[c] * (*inv_std)[c];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Var<T> sum_all(const Var<T>& x) {
  T acc = T(0);
  for (std::int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  Tensor<T> out({1, 1, 1, 1});
  out[0] = acc;
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn}, [xn](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += n.grad[0];
  });
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.value().size());
  T acc = T(0);
  for (std::int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  Tensor<T> out({1, 1, 1, 1});
  out[0] = acc * inv;
  auto xn = x.node();
  return detail::make_result<T>(std::move(out), {xn, }, [xn, inv](Node<T>& n) {
    xn->ensure_grad();
    for (std::int64_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += n.grad[0] * inv;
  });
}

}  // namespace lvsnet::nn
