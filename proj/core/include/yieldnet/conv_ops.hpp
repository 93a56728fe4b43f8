#pragma once

#include <algorithm>
#include <memory>

#include "yieldnet/graph.hpp"

namespace yieldnet {

// Spatial ops on NCHW tensors, built on the same tape as graph.hpp.
// Heavy lifting goes through Eigen GEMMs; im2col buffers are recomputed in
// the backward pass instead of being kept on the tape.

namespace detail {

template <class S>
void im2col(const S* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* cols) {
  // cols layout: [cin*kh*kw, oh*ow]
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (int64_t r = 0; r < oh; ++r) {
          int64_t ir = r * stride - pad + ki;
          if (ir < 0 || ir >= h) {
            std::fill(row + r * ow, row + (r + 1) * ow, S(0));
            continue;
          }
          const S* src = x + (c * h + ir) * w;
          for (int64_t q = 0; q < ow; ++q) {
            int64_t ic = q * stride - pad + kj;
            row[r * ow + q] = (ic >= 0 && ic < w) ? src[ic] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_acc(const S* cols, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* dx) {
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (int64_t r = 0; r < oh; ++r) {
          int64_t ir = r * stride - pad + ki;
          if (ir < 0 || ir >= h) continue;
          S* dst = dx + (c * h + ir) * w;
          for (int64_t q = 0; q < ow; ++q) {
            int64_t ic = q * stride - pad + kj;
            if (ic >= 0 && ic < w) dst[ic] += row[r * ow + q];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution, x:[B,Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] or -1.
template <class S>
int conv2d(Graph<S>& g, int x, int w, int b, int64_t stride, int64_t pad) {
  using CMap = typename Graph<S>::CMap;
  const auto& xv = g.val(x);
  const auto& wv = g.val(w);
  if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank");
  if (xv.dim(1) != wv.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
  int64_t bt = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  int64_t oh = (h + 2 * pad - kh) / stride + 1;
  int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  int64_t k = cin * kh * kw;
  Tensor<S> out({bt, cout, oh, ow});
  Tensor<S> cols({k, oh * ow});
  for (int64_t i = 0; i < bt; ++i) {
    detail::im2col(xv.ptr() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad, oh, ow,
                   cols.ptr());
    g.map2(out, bt * cout, oh * ow).middleRows(i * cout, cout).noalias() =
        CMap(wv.ptr(), cout, k) * CMap(cols.ptr(), k, oh * ow);
  }
  if (b >= 0) {
    const auto& bv = g.val(b);
    if (bv.numel() != cout) throw std::invalid_argument("conv2d: bias size");
    for (int64_t i = 0; i < bt; ++i)
      for (int64_t c = 0; c < cout; ++c) {
        S* o = out.ptr() + (i * cout + c) * oh * ow;
        for (int64_t p = 0; p < oh * ow; ++p) o[p] += bv[c];
      }
  }
  return g.ternary(std::move(out), x, w, b,
                   [&g, x, w, b, bt, cin, h, wd, cout, kh, kw, stride, pad, oh, ow, k](int y) {
    const auto& gy = g.grad(y);
    const auto& xv2 = g.val(x);
    const auto& wv2 = g.val(w);
    Tensor<S> cols({k, oh * ow});
    Tensor<S> dcols({k, oh * ow});
    for (int64_t i = 0; i < bt; ++i) {
      CMap gyb(gy.ptr() + i * cout * oh * ow, cout, oh * ow);
      if (g.needs_grad(w) || g.needs_grad(x))
        detail::im2col(xv2.ptr() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad, oh, ow,
                       cols.ptr());
      if (g.needs_grad(w))
        g.map2(g.grad(w), cout, k).noalias() += gyb * CMap(cols.ptr(), k, oh * ow).transpose();
      if (g.needs_grad(x)) {
        g.map2(dcols, k, oh * ow).noalias() = CMap(wv2.ptr(), cout, k).transpose() * gyb;
        detail::col2im_acc(dcols.ptr(), cin, h, wd, kh, kw, stride, pad, oh, ow,
                           g.grad(x).ptr() + i * cin * h * wd);
      }
      if (b >= 0 && g.needs_grad(b)) {
        auto& gb = g.grad(b);
        for (int64_t c = 0; c < cout; ++c) gb[c] += gyb.row(c).sum();
      }
    }
  });
}

/// Transposed convolution with 2x2 kernel and stride 2 (non-overlapping).
/// x:[B,Cin,H,W], w:[Cin,Cout,2,2], b:[Cout] or -1 -> [B,Cout,2H,2W].
template <class S>
int conv_transpose2x2(Graph<S>& g, int x, int w, int b) {
  using CMap = typename Graph<S>::CMap;
  const auto& xv = g.val(x);
  const auto& wv = g.val(w);
  if (wv.rank() != 4 || wv.dim(2) != 2 || wv.dim(3) != 2)
    throw std::invalid_argument("conv_transpose2x2: kernel must be 2x2");
  if (xv.dim(1) != wv.dim(0)) throw std::invalid_argument("conv_transpose2x2: channels");
  int64_t bt = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  int64_t cout = wv.dim(1);
  int64_t oh = 2 * h, ow = 2 * wd;
  Tensor<S> out({bt, cout, oh, ow});
  Tensor<S> patch({cout * 4, h * wd});
  for (int64_t i = 0; i < bt; ++i) {
    g.map2(patch, cout * 4, h * wd).noalias() =
        CMap(wv.ptr(), cin, cout * 4).transpose() * CMap(xv.ptr() + i * cin * h * wd, cin, h * wd);
    for (int64_t c = 0; c < cout; ++c)
      for (int64_t pi = 0; pi < 2; ++pi)
        for (int64_t pj = 0; pj < 2; ++pj) {
          const S* src = patch.ptr() + ((c * 2 + pi) * 2 + pj) * h * wd;
          S* dst = out.ptr() + (i * cout + c) * oh * ow;
          for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < wd; ++q)
              dst[(2 * r + pi) * ow + 2 * q + pj] = src[r * wd + q];
        }
    if (b >= 0) {
      const auto& bv = g.val(b);
      for (int64_t c = 0; c < cout; ++c) {
        S* dst = out.ptr() + (i * cout + c) * oh * ow;
        for (int64_t p = 0; p < oh * ow; ++p) dst[p] += bv[c];
      }
    }
  }
  return g.ternary(std::move(out), x, w, b,
                   [&g, x, w, b, bt, cin, cout, h, wd, oh, ow](int y) {
    const auto& gy = g.grad(y);
    Tensor<S> gpatch({cout * 4, h * wd});
    for (int64_t i = 0; i < bt; ++i) {
      for (int64_t c = 0; c < cout; ++c)
        for (int64_t pi = 0; pi < 2; ++pi)
          for (int64_t pj = 0; pj < 2; ++pj) {
            S* dst = gpatch.ptr() + ((c * 2 + pi) * 2 + pj) * h * wd;
            const S* src = gy.ptr() + (i * cout + c) * oh * ow;
            for (int64_t r = 0; r < h; ++r)
              for (int64_t q = 0; q < wd; ++q)
                dst[r * wd + q] = src[(2 * r + pi) * ow + 2 * q + pj];
          }
      if (g.needs_grad(x))
        g.map2(g.grad(x), bt * cin, h * wd).middleRows(i * cin, cin).noalias() +=
            CMap(g.val(w).ptr(), cin, cout * 4) * CMap(gpatch.ptr(), cout * 4, h * wd);
      if (g.needs_grad(w))
        g.map2(g.grad(w), cin, cout * 4).noalias() +=
            CMap(g.val(x).ptr() + i * cin * h * wd, cin, h * wd) *
            CMap(gpatch.ptr(), cout * 4, h * wd).transpose();
      if (b >= 0 && g.needs_grad(b)) {
        auto& gb = g.grad(b);
        for (int64_t c = 0; c < cout; ++c) {
          const S* src = gy.ptr() + (i * cout + c) * oh * ow;
          S acc = 0;
          for (int64_t p = 0; p < oh * ow; ++p) acc += src[p];
          gb[c] += acc;
        }
      }
    }
  });
}

/// 2x2 max pooling with stride 2. Extents must be even.
template <class S>
int maxpool2x2(Graph<S>& g, int x) {
  const auto& xv = g.val(x);
  int64_t bt = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("maxpool2x2: odd extent");
  int64_t oh = h / 2, ow = w / 2;
  Tensor<S> out({bt, c, oh, ow});
  auto arg = std::make_shared<std::vector<int32_t>>(bt * c * oh * ow);
  for (int64_t i = 0; i < bt * c; ++i) {
    const S* src = xv.ptr() + i * h * w;
    S* dst = out.ptr() + i * oh * ow;
    for (int64_t r = 0; r < oh; ++r)
      for (int64_t q = 0; q < ow; ++q) {
        int64_t base = 2 * r * w + 2 * q;
        int64_t best = base;
        for (int64_t off : {int64_t(1), w, w + 1})
          if (src[base + off] > src[best]) best = base + off;
        dst[r * ow + q] = src[best];
        (*arg)[i * oh * ow + r * ow + q] = static_cast<int32_t>(best);
      }
  }
  return g.unary_binary(std::move(out), x, -1, [&g, x, arg, bt, c, h, w, oh, ow](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    auto& gx = g.grad(x);
    for (int64_t i = 0; i < bt * c; ++i) {
      const S* gsrc = gy.ptr() + i * oh * ow;
      S* gdst = gx.ptr() + i * h * w;
      for (int64_t p = 0; p < oh * ow; ++p) gdst[(*arg)[i * oh * ow + p]] += gsrc[p];
    }
  });
}

/// Adaptive average pooling to s x s output cells.
template <class S>
int adaptive_avg_pool(Graph<S>& g, int x, int64_t s) {
  const auto& xv = g.val(x);
  int64_t bt = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h < s || w < s) throw std::invalid_argument("adaptive_avg_pool: extent < pool size");
  auto lo = [](int64_t i, int64_t n, int64_t k) { return i * n / k; };
  auto hi = [](int64_t i, int64_t n, int64_t k) { return (i + 1) * n / k + ((i + 1) * n % k != 0); };
  Tensor<S> out({bt, c, s, s});
  for (int64_t i = 0; i < bt * c; ++i) {
    const S* src = xv.ptr() + i * h * w;
    S* dst = out.ptr() + i * s * s;
    for (int64_t r = 0; r < s; ++r)
      for (int64_t q = 0; q < s; ++q) {
        int64_t r0 = lo(r, h, s), r1 = hi(r, h, s), q0 = lo(q, w, s), q1 = hi(q, w, s);
        S acc = 0;
        for (int64_t rr = r0; rr < r1; ++rr)
          for (int64_t qq = q0; qq < q1; ++qq) acc += src[rr * w + qq];
        dst[r * s + q] = acc / S((r1 - r0) * (q1 - q0));
      }
  }
  return g.unary_binary(std::move(out), x, -1, [&g, x, bt, c, h, w, s, lo, hi](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    auto& gx = g.grad(x);
    for (int64_t i = 0; i < bt * c; ++i) {
      const S* gsrc = gy.ptr() + i * s * s;
      S* gdst = gx.ptr() + i * h * w;
      for (int64_t r = 0; r < s; ++r)
        for (int64_t q = 0; q < s; ++q) {
          int64_t r0 = lo(r, h, s), r1 = hi(r, h, s), q0 = lo(q, w, s), q1 = hi(q, w, s);
          S gv = gsrc[r * s + q] / S((r1 - r0) * (q1 - q0));
          for (int64_t rr = r0; rr < r1; ++rr)
            for (int64_t qq = q0; qq < q1; ++qq) gdst[rr * w + qq] += gv;
        }
    }
  });
}

/// Bilinear resize to (oh, ow), half-pixel centers (align_corners = false).
template <class S>
int upsample_bilinear(Graph<S>& g, int x, int64_t oh, int64_t ow) {
  const auto& xv = g.val(x);
  int64_t bt = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h == oh && w == ow) return x;
  struct Tap { int32_t i0, i1; S w0; };
  auto rows = std::make_shared<std::vector<Tap>>(oh);
  auto colsm = std::make_shared<std::vector<Tap>>(ow);
  auto fill = [](std::vector<Tap>& taps, int64_t in, int64_t out) {
    for (int64_t i = 0; i < out; ++i) {
      double src = (double(i) + 0.5) * double(in) / double(out) - 0.5;
      src = std::max(0.0, std::min(src, double(in - 1)));
      int64_t i0 = static_cast<int64_t>(src);
      int64_t i1 = std::min(i0 + 1, in - 1);
      taps[i] = {static_cast<int32_t>(i0), static_cast<int32_t>(i1), S(1.0 - (src - double(i0)))};
    }
  };
  fill(*rows, h, oh);
  fill(*colsm, w, ow);
  Tensor<S> out({bt, c, oh, ow});
  for (int64_t i = 0; i < bt * c; ++i) {
    const S* src = xv.ptr() + i * h * w;
    S* dst = out.ptr() + i * oh * ow;
    for (int64_t r = 0; r < oh; ++r) {
      const Tap& tr = (*rows)[r];
      for (int64_t q = 0; q < ow; ++q) {
        const Tap& tc = (*colsm)[q];
        S v00 = src[tr.i0 * w + tc.i0], v01 = src[tr.i0 * w + tc.i1];
        S v10 = src[tr.i1 * w + tc.i0], v11 = src[tr.i1 * w + tc.i1];
        dst[r * ow + q] = tr.w0 * (tc.w0 * v00 + (S(1) - tc.w0) * v01) +
                          (S(1) - tr.w0) * (tc.w0 * v10 + (S(1) - tc.w0) * v11);
      }
    }
  }
  return g.unary_binary(std::move(out), x, -1, [&g, x, rows, colsm, bt, c, h, w, oh, ow](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    auto& gx = g.grad(x);
    for (int64_t i = 0; i < bt * c; ++i) {
      const S* gsrc = gy.ptr() + i * oh * ow;
      S* gdst = gx.ptr() + i * h * w;
      for (int64_t r = 0; r < oh; ++r) {
        const Tap& tr = (*rows)[r];
        for (int64_t q = 0; q < ow; ++q) {
          const Tap& tc = (*colsm)[q];
          S gv = gsrc[r * ow + q];
          gdst[tr.i0 * w + tc.i0] += gv * tr.w0 * tc.w0;
          gdst[tr.i0 * w + tc.i1] += gv * tr.w0 * (S(1) - tc.w0);
          gdst[tr.i1 * w + tc.i0] += gv * (S(1) - tr.w0) * tc.w0;
          gdst[tr.i1 * w + tc.i1] += gv * (S(1) - tr.w0) * (S(1) - tc.w0);
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling.
template <class S>
int upsample_nearest2x(Graph<S>& g, int x) {
  const auto& xv = g.val(x);
  int64_t bt = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  int64_t oh = 2 * h, ow = 2 * w;
  Tensor<S> out({bt, c, oh, ow});
  for (int64_t i = 0; i < bt * c; ++i) {
    const S* src = xv.ptr() + i * h * w;
    S* dst = out.ptr() + i * oh * ow;
    for (int64_t r = 0; r < oh; ++r)
      for (int64_t q = 0; q < ow; ++q) dst[r * ow + q] = src[(r / 2) * w + q / 2];
  }
  return g.unary_binary(std::move(out), x, -1, [&g, x, bt, c, h, w, oh, ow](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    auto& gx = g.grad(x);
    for (int64_t i = 0; i < bt * c; ++i) {
      const S* gsrc = gy.ptr() + i * oh * ow;
      S* gdst = gx.ptr() + i * h * w;
      for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q) gdst[(r / 2) * w + q / 2] += gsrc[r * ow + q];
    }
  });
}

/// Concatenate along the channel axis.
template <class S>
int concat_channels(Graph<S>& g, const std::vector<int>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty");
  const auto& first = g.val(xs[0]);
  int64_t bt = first.dim(0), h = first.dim(2), w = first.dim(3);
  int64_t ctot = 0;
  for (int id : xs) {
    const auto& v = g.val(id);
    if (v.dim(0) != bt || v.dim(2) != h || v.dim(3) != w)
      throw std::invalid_argument("concat_channels: extent mismatch");
    ctot += v.dim(1);
  }
  Tensor<S> out({bt, ctot, h, w});
  auto xs_copy = std::make_shared<std::vector<int>>(xs);
  for (int64_t b = 0; b < bt; ++b) {
    int64_t coff = 0;
    for (int id : xs) {
      const auto& v = g.val(id);
      int64_t ci = v.dim(1);
      std::copy(v.ptr() + b * ci * h * w, v.ptr() + (b + 1) * ci * h * w,
                out.ptr() + (b * ctot + coff) * h * w);
      coff += ci;
    }
  }
  return g.nary(std::move(out), xs, [&g, xs_copy, bt, ctot, h, w](int y) {
    const auto& gy = g.grad(y);
    for (int64_t b = 0; b < bt; ++b) {
      int64_t coff = 0;
      for (int id : *xs_copy) {
        int64_t ci = g.val(id).dim(1);
        if (g.needs_grad(id)) {
          const S* src = gy.ptr() + (b * ctot + coff) * h * w;
          S* dst = g.grad(id).ptr() + b * ci * h * w;
          for (int64_t p = 0; p < ci * h * w; ++p) dst[p] += src[p];
        }
        coff += ci;
      }
    }
  });
}

/// BatchNorm over (B,H,W) per channel. In training mode batch statistics are
/// used and the running buffers are updated in place; in eval mode the
/// running buffers are read. Population variance throughout.
template <class S>
int batchnorm2d(Graph<S>& g, int x, int gamma, int beta, S* run_mean, S* run_var,
                bool training, S momentum, S eps) {
  const auto& xv = g.val(x);
  int64_t bt = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  int64_t nper = bt * h * w;
  auto mean = std::make_shared<std::vector<S>>(c);
  auto rstd = std::make_shared<std::vector<S>>(c);
  for (int64_t ch = 0; ch < c; ++ch) {
    S m, v;
    if (training) {
      S acc = 0, acc2 = 0;
      for (int64_t b = 0; b < bt; ++b) {
        const S* src = xv.ptr() + (b * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) {
          acc += src[p];
          acc2 += src[p] * src[p];
        }
      }
      m = acc / S(nper);
      v = acc2 / S(nper) - m * m;
      if (v < S(0)) v = S(0);
      run_mean[ch] = (S(1) - momentum) * run_mean[ch] + momentum * m;
      run_var[ch] = (S(1) - momentum) * run_var[ch] + momentum * v;
    } else {
      m = run_mean[ch];
      v = run_var[ch];
    }
    (*mean)[ch] = m;
    (*rstd)[ch] = S(1) / std::sqrt(v + eps);
  }
  Tensor<S> out(xv.shape);
  const auto& gv = g.val(gamma);
  const auto& bv = g.val(beta);
  for (int64_t b = 0; b < bt; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const S* src = xv.ptr() + (b * c + ch) * h * w;
      S* dst = out.ptr() + (b * c + ch) * h * w;
      S sc = gv[ch] * (*rstd)[ch];
      S sh = bv[ch] - (*mean)[ch] * sc;
      for (int64_t p = 0; p < h * w; ++p) dst[p] = src[p] * sc + sh;
    }
  return g.ternary(std::move(out), x, gamma, beta,
                   [&g, x, gamma, beta, mean, rstd, bt, c, h, w, nper, training](int y) {
    const auto& gy = g.grad(y);
    const auto& xv2 = g.val(x);
    const auto& gv2 = g.val(gamma);
    for (int64_t ch = 0; ch < c; ++ch) {
      S m = (*mean)[ch], rs = (*rstd)[ch];
      S sum_dy = 0, sum_dy_xhat = 0;
      for (int64_t b = 0; b < bt; ++b) {
        const S* gsrc = gy.ptr() + (b * c + ch) * h * w;
        const S* src = xv2.ptr() + (b * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) {
          sum_dy += gsrc[p];
          sum_dy_xhat += gsrc[p] * (src[p] - m) * rs;
        }
      }
      if (g.needs_grad(gamma)) g.grad(gamma)[ch] += sum_dy_xhat;
      if (g.needs_grad(beta)) g.grad(beta)[ch] += sum_dy;
      if (!g.needs_grad(x)) continue;
      S gs = gv2[ch] * rs;
      for (int64_t b = 0; b < bt; ++b) {
        const S* gsrc = gy.ptr() + (b * c + ch) * h * w;
        const S* src = xv2.ptr() + (b * c + ch) * h * w;
        S* gdst = g.grad(x).ptr() + (b * c + ch) * h * w;
        if (training) {
          for (int64_t p = 0; p < h * w; ++p) {
            S xhat = (src[p] - m) * rs;
            gdst[p] += gs * (gsrc[p] - sum_dy / S(nper) - xhat * sum_dy_xhat / S(nper));
          }
        } else {
          for (int64_t p = 0; p < h * w; ++p) gdst[p] += gs * gsrc[p];
        }
      }
    }
  });
}

/// Feature maps [N1, D, h, w] -> token rows [N1*h*w, D] (per-map transpose).
template <class S>
int map_to_tokens(Graph<S>& g, int x) {
  const auto& xv = g.val(x);
  if (xv.rank() != 4) throw std::invalid_argument("map_to_tokens: rank");
  int64_t n1 = xv.dim(0), d = xv.dim(1), p = xv.dim(2) * xv.dim(3);
  Tensor<S> out({n1 * p, d});
  for (int64_t i = 0; i < n1; ++i) {
    typename Graph<S>::CMap src(xv.ptr() + i * d * p, d, p);
    g.map2(out, n1 * p, d).middleRows(i * p, p).noalias() = src.transpose();
  }
  return g.unary_binary(std::move(out), x, -1, [&g, x, n1, d, p](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    for (int64_t i = 0; i < n1; ++i) {
      typename Graph<S>::CMap gsrc(gy.ptr() + i * p * d, p, d);
      typename Graph<S>::Map(g.grad(x).ptr() + i * d * p, d, p).noalias() +=
          gsrc.transpose();
    }
  });
}

/// Tokens [B*T*(gh*gw), D] -> feature map [B, D, gh, gw], mean over T frames.
template <class S>
int tokens_to_map(Graph<S>& g, int x, int64_t bt, int64_t t, int64_t gh, int64_t gw) {
  const auto& xv = g.val(x);
  int64_t d = xv.shape.back();
  int64_t npf = gh * gw;
  if (xv.numel() != bt * t * npf * d)
    throw std::invalid_argument("tokens_to_map: token count does not match grid");
  Tensor<S> out({bt, d, gh, gw});
  const S inv_t = S(1) / S(t);
  for (int64_t b = 0; b < bt; ++b)
    for (int64_t tt = 0; tt < t; ++tt)
      for (int64_t p = 0; p < npf; ++p) {
        const S* tok = xv.ptr() + ((b * t + tt) * npf + p) * d;
        for (int64_t j = 0; j < d; ++j) out.ptr()[(b * d + j) * npf + p] += tok[j] * inv_t;
      }
  return g.unary_binary(std::move(out), x, -1, [&g, x, bt, t, npf, d, inv_t](int y) {
    if (!g.needs_grad(x)) return;
    const auto& gy = g.grad(y);
    auto& gx = g.grad(x);
    for (int64_t b = 0; b < bt; ++b)
      for (int64_t tt = 0; tt < t; ++tt)
        for (int64_t p = 0; p < npf; ++p) {
          S* tok = gx.ptr() + ((b * t + tt) * npf + p) * d;
          for (int64_t j = 0; j < d; ++j) tok[j] += gy.ptr()[(b * d + j) * npf + p] * inv_t;
        }
  });
}

}  // namespace yieldnet
