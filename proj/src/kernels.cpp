#include "dgst/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace dgst::kern {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw shape_error(msg);
}

// Copy one item's channels into a zero-padded [C, H+2pr, W+2pc] buffer.
void pad_item_rc(const real* x, int64_t c, int64_t h, int64_t w, int64_t pr,
                 int64_t pc, std::vector<real>& out) {
  const int64_t hp = h + 2 * pr, wp = w + 2 * pc;
  out.assign(size_t(c * hp * wp), real(0));
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t r = 0; r < h; ++r)
      std::memcpy(out.data() + ((ci * hp + r + pr) * wp + pc),
                  x + (ci * h + r) * w, size_t(w) * sizeof(real));
}

void pad_item(const real* x, int64_t c, int64_t h, int64_t w, int pad,
              std::vector<real>& out) {
  pad_item_rc(x, c, h, w, pad, pad, out);
}

// Accumulate the interior of a padded gradient buffer back into gx.
void unpad_accum(const std::vector<real>& gp, int64_t c, int64_t h, int64_t w,
                 int pad, real* gx) {
  const int64_t hp = h + 2 * pad, wp = w + 2 * pad;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t r = 0; r < h; ++r) {
      const real* src = gp.data() + ((ci * hp + r + pad) * wp + pad);
      real* dst = gx + (ci * h + r) * w;
      for (int64_t col = 0; col < w; ++col) dst[col] += src[col];
    }
}

}  // namespace

void conv2d_shape_check(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad, int64_t& ho, int64_t& wo) {
  require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " +
                             shape_str(x.shape));
  require(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " +
                             shape_str(w.shape));
  require(b.rank() == 1 && b.dim(0) == w.dim(0),
          "conv2d: bias length " + shape_str(b.shape) +
              " must match weight Cout=" + std::to_string(w.dim(0)));
  require(x.dim(1) == w.dim(1),
          "conv2d: input channels (dim 1) = " + std::to_string(x.dim(1)) +
              " does not match weight Cin = " + std::to_string(w.dim(1)));
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >=1, pad >=0");
  const int64_t kh = w.dim(2), kw = w.dim(3);
  const int64_t hp = x.dim(2) + 2 * pad, wp = x.dim(3) + 2 * pad;
  require(kh <= hp && kw <= wp,
          "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
              " exceeds padded input " + std::to_string(hp) + "x" +
              std::to_string(wp));
  require((hp - kh) % stride == 0,
          "conv2d: height " + std::to_string(x.dim(2)) +
              " not compatible with kernel/stride (inexact division on dim 2)");
  require((wp - kw) % stride == 0,
          "conv2d: width " + std::to_string(x.dim(3)) +
              " not compatible with kernel/stride (inexact division on dim 3)");
  ho = (hp - kh) / stride + 1;
  wo = (wp - kw) / stride + 1;
}

namespace {

// Stride-1 convolutions run over an unfolded view col[k][pix] with
// k = (ic*kh + r)*kw + c and pix = oh*wo + ow, materialized one pixel tile
// at a time so the working set stays cache-resident. Rows are built with
// contiguous copies; the compute passes are then long unit-stride loops.
//
// Walk the output rows intersecting pixel range [p0, p0+pw).
template <class F>
void for_tile_rows(int64_t p0, int64_t pw, int64_t wo, F&& f) {
  for (int64_t oh = p0 / wo; oh * wo < p0 + pw; ++oh) {
    const int64_t jlo = std::max(p0, oh * wo);
    const int64_t jhi = std::min(p0 + pw, (oh + 1) * wo);
    f(oh, jlo, jhi - jlo);  // jlo..jhi in flat pixel coordinates
  }
}

void build_col_tile(const real* xp, int64_t ci, int64_t hp, int64_t wp,
                    int64_t kh, int64_t kw, int64_t wo, int64_t p0, int64_t pw,
                    real* tile) {
  real* out = tile;
  for (int64_t ic = 0; ic < ci; ++ic)
    for (int64_t r = 0; r < kh; ++r)
      for (int64_t c = 0; c < kw; ++c) {
        for_tile_rows(p0, pw, wo, [&](int64_t oh, int64_t jlo, int64_t len) {
          std::memcpy(out + (jlo - p0),
                      xp + (ic * hp + oh + r) * wp + c + (jlo - oh * wo),
                      size_t(len) * sizeof(real));
        });
        out += pw;
      }
}

// Pixel tile that keeps the accumulator row L1/L2-resident across the k loop.
constexpr int64_t kPixTile = 1024;

// y[j] += sum_k w[k] * col[k][stride.. slice], two k-rows per pass; `col`
// points at the tile start of row 0, rows are `stride` apart, `len` wide.
void axpy_rows(const real* w, const real* col, int64_t k, int64_t stride,
               int64_t len, real* y) {
  int64_t q = 0;
  for (; q + 1 < k; q += 2) {
    const real w0 = w[q], w1 = w[q + 1];
    const real* c0 = col + q * stride;
    const real* c1 = c0 + stride;
    for (int64_t j = 0; j < len; ++j) y[j] += w0 * c0[j] + w1 * c1[j];
  }
  if (q < k) {
    const real w0 = w[q];
    const real* c0 = col + q * stride;
    for (int64_t j = 0; j < len; ++j) y[j] += w0 * c0[j];
  }
}

// Two output rows at once: each col row is read once for both channels.
void axpy_rows2(const real* w0, const real* w1, const real* col, int64_t k,
                int64_t stride, int64_t len, real* y0, real* y1) {
  int64_t q = 0;
  for (; q + 1 < k; q += 2) {
    const real a00 = w0[q], a01 = w0[q + 1];
    const real a10 = w1[q], a11 = w1[q + 1];
    const real* c0 = col + q * stride;
    const real* c1 = c0 + stride;
    for (int64_t j = 0; j < len; ++j) {
      const real v0 = c0[j], v1 = c1[j];
      y0[j] += a00 * v0 + a01 * v1;
      y1[j] += a10 * v0 + a11 * v1;
    }
  }
  if (q < k) {
    const real a0 = w0[q], a1 = w1[q];
    const real* c0 = col + q * stride;
    for (int64_t j = 0; j < len; ++j) {
      const real v0 = c0[j];
      y0[j] += a0 * v0;
      y1[j] += a1 * v0;
    }
  }
}

// Lane-split dot products: independent per-lane accumulator chains keep the
// reduction vectorizable under strict FP semantics.
constexpr int kLanes = 8;

real dot_lanes(const real* a, const real* b, int64_t n) {
  real lanes[kLanes] = {};
  int64_t j = 0;
  for (; j + kLanes <= n; j += kLanes)
    for (int l = 0; l < kLanes; ++l) lanes[l] += a[j + l] * b[j + l];
  real s = 0;
  for (int l = 0; l < kLanes; ++l) s += lanes[l];
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                      int stride, int pad) {
  int64_t ho, wo;
  conv2d_shape_check(x, w, b, stride, pad, ho, wo);
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t hp = h + 2 * pad, wp = wd + 2 * pad;

  Tensor y = Tensor::zeros({n, co, ho, wo});
  std::vector<real> padded, col;
  for (int64_t ni = 0; ni < n; ++ni) {
    const real* xi = x.data.data() + ni * ci * h * wd;
    const real* xp = xi;
    if (pad > 0) {
      pad_item(xi, ci, h, wd, pad, padded);
      xp = padded.data();
    }
    real* yi = y.data.data() + ni * co * ho * wo;
    if (stride == 1) {
      const int64_t k = ci * kh * kw, pix = ho * wo;
      col.resize(size_t(k * std::min(kPixTile, pix)));
      for (int64_t p0 = 0; p0 < pix; p0 += kPixTile) {
        const int64_t pw = std::min(kPixTile, pix - p0);
        build_col_tile(xp, ci, hp, wp, kh, kw, wo, p0, pw, col.data());
        int64_t oc = 0;
        for (; oc + 1 < co; oc += 2) {
          real* y0 = yi + oc * pix + p0;
          real* y1 = y0 + pix;
          std::fill(y0, y0 + pw, b.data[size_t(oc)]);
          std::fill(y1, y1 + pw, b.data[size_t(oc + 1)]);
          axpy_rows2(w.data.data() + oc * k, w.data.data() + (oc + 1) * k,
                     col.data(), k, pw, pw, y0, y1);
        }
        if (oc < co) {
          real* y0 = yi + oc * pix + p0;
          std::fill(y0, y0 + pw, b.data[size_t(oc)]);
          axpy_rows(w.data.data() + oc * k, col.data(), k, pw, pw, y0);
        }
      }
      continue;
    }
    for (int64_t oc = 0; oc < co; ++oc) {
      real* ychan = yi + oc * ho * wo;
      std::fill(ychan, ychan + ho * wo, b.data[size_t(oc)]);
      for (int64_t ic = 0; ic < ci; ++ic) {
        const real* xchan = xp + ic * hp * wp;
        const real* wrow = w.data.data() + (oc * ci + ic) * kh * kw;
        for (int64_t r = 0; r < kh; ++r)
          for (int64_t c = 0; c < kw; ++c) {
            const real wv = wrow[r * kw + c];
            for (int64_t oh = 0; oh < ho; ++oh) {
              const real* src = xchan + (oh * stride + r) * wp + c;
              real* dst = ychan + oh * wo;
              for (int64_t ow = 0; ow < wo; ++ow)
                dst[ow] += wv * src[ow * stride];
            }
          }
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                     const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t ho = gy.dim(2), wo = gy.dim(3);
  const int64_t hp = h + 2 * pad, wp = wd + 2 * pad;
  const int64_t k = ci * kh * kw, pix = ho * wo;

  std::vector<real> padded, gpadded, col, dcol;
  for (int64_t ni = 0; ni < n; ++ni) {
    const real* xi = x.data.data() + ni * ci * h * wd;
    const real* xp = xi;
    if ((gw != nullptr) && pad > 0) {
      pad_item(xi, ci, h, wd, pad, padded);
      xp = padded.data();
    }
    const real* gyi = gy.data.data() + ni * co * ho * wo;

    if (gb != nullptr)
      for (int64_t oc = 0; oc < co; ++oc) {
        const real* gychan = gyi + oc * pix;
        real s = 0;
        for (int64_t i = 0; i < pix; ++i) s += gychan[i];
        gb->data[size_t(oc)] += s;
      }

    if (stride == 1) {
      if (gw != nullptr) {
        // gw[oc][q] += <gy[oc], col[q]>, one cache-resident tile at a time
        col.resize(size_t(k * std::min(kPixTile, pix)));
        for (int64_t p0 = 0; p0 < pix; p0 += kPixTile) {
          const int64_t pw = std::min(kPixTile, pix - p0);
          build_col_tile(xp, ci, hp, wp, kh, kw, wo, p0, pw, col.data());
          for (int64_t oc = 0; oc < co; ++oc) {
            const real* g = gyi + oc * pix + p0;
            real* grow = gw->data.data() + oc * k;
            for (int64_t q = 0; q < k; ++q)
              grow[q] += dot_lanes(g, col.data() + q * pw, pw);
          }
        }
      }
      if (gx != nullptr) {
        // dcol[q] = sum_oc w[oc][q] * gy[oc], folded back tile by tile
        gpadded.assign(size_t(ci * hp * wp), real(0));
        dcol.resize(size_t(k * std::min(kPixTile, pix)));
        for (int64_t p0 = 0; p0 < pix; p0 += kPixTile) {
          const int64_t pw = std::min(kPixTile, pix - p0);
          std::fill(dcol.begin(), dcol.begin() + k * pw, real(0));
          for (int64_t q = 0; q < k; ++q) {
            real* drow = dcol.data() + q * pw;
            int64_t oc = 0;
            for (; oc + 1 < co; oc += 2) {
              const real w0 = w.data[size_t(oc * k + q)];
              const real w1 = w.data[size_t((oc + 1) * k + q)];
              const real* g0 = gyi + oc * pix + p0;
              const real* g1 = g0 + pix;
              for (int64_t j = 0; j < pw; ++j)
                drow[j] += w0 * g0[j] + w1 * g1[j];
            }
            if (oc < co) {
              const real w0 = w.data[size_t(oc * k + q)];
              const real* g0 = gyi + oc * pix + p0;
              for (int64_t j = 0; j < pw; ++j) drow[j] += w0 * g0[j];
            }
          }
          const real* drow = dcol.data();
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t r = 0; r < kh; ++r)
              for (int64_t c = 0; c < kw; ++c) {
                for_tile_rows(p0, pw, wo,
                              [&](int64_t oh, int64_t jlo, int64_t len) {
                  real* dst = gpadded.data() + (ic * hp + oh + r) * wp + c +
                              (jlo - oh * wo);
                  const real* src = drow + (jlo - p0);
                  for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
                });
                drow += pw;
              }
        }
        unpad_accum(gpadded, ci, h, wd, pad, gx->data.data() + ni * ci * h * wd);
      }
      continue;
    }

    // generic strided path
    if (gw != nullptr)
      for (int64_t oc = 0; oc < co; ++oc) {
        const real* gychan = gyi + oc * pix;
        for (int64_t ic = 0; ic < ci; ++ic) {
          const real* xchan = xp + ic * hp * wp;
          for (int64_t r = 0; r < kh; ++r)
            for (int64_t c = 0; c < kw; ++c) {
              real acc = 0;
              for (int64_t oh = 0; oh < ho; ++oh) {
                const real* src = xchan + (oh * stride + r) * wp + c;
                const real* g = gychan + oh * wo;
                for (int64_t ow = 0; ow < wo; ++ow)
                  acc += g[ow] * src[ow * stride];
              }
              gw->data[size_t((oc * ci + ic) * kh * kw + r * kw + c)] += acc;
            }
        }
      }
    if (gx != nullptr) {
      gpadded.assign(size_t(ci * hp * wp), real(0));
      for (int64_t oc = 0; oc < co; ++oc) {
        const real* gychan = gyi + oc * pix;
        for (int64_t ic = 0; ic < ci; ++ic) {
          real* gxchan = gpadded.data() + ic * hp * wp;
          for (int64_t r = 0; r < kh; ++r)
            for (int64_t c = 0; c < kw; ++c) {
              const real wv =
                  w.data[size_t((oc * ci + ic) * kh * kw + r * kw + c)];
              for (int64_t oh = 0; oh < ho; ++oh) {
                real* dst = gxchan + (oh * stride + r) * wp + c;
                const real* g = gychan + oh * wo;
                for (int64_t ow = 0; ow < wo; ++ow)
                  dst[ow * stride] += wv * g[ow];
              }
            }
        }
      }
      unpad_accum(gpadded, ci, h, wd, pad, gx->data.data() + ni * ci * h * wd);
    }
  }
}

void tconv2d_shape_check(const Tensor& x, const Tensor& w, const Tensor& b,
                         int stride, int pad, int64_t& ho, int64_t& wo) {
  require(x.rank() == 4, "conv_transpose2d: input must be [N,C,H,W], got " +
                             shape_str(x.shape));
  require(w.rank() == 4,
          "conv_transpose2d: weight must be [Cin,Cout,kh,kw], got " +
              shape_str(w.shape));
  require(x.dim(1) == w.dim(0),
          "conv_transpose2d: input channels (dim 1) = " +
              std::to_string(x.dim(1)) +
              " does not match weight Cin = " + std::to_string(w.dim(0)));
  require(b.rank() == 1 && b.dim(0) == w.dim(1),
          "conv_transpose2d: bias length " + shape_str(b.shape) +
              " must match weight Cout=" + std::to_string(w.dim(1)));
  require(stride >= 1 && pad >= 0, "conv_transpose2d: stride >=1, pad >=0");
  const int64_t kh = w.dim(2), kw = w.dim(3);
  ho = (x.dim(2) - 1) * stride + kh - 2 * pad;
  wo = (x.dim(3) - 1) * stride + kw - 2 * pad;
  require(ho >= 1 && wo >= 1,
          "conv_transpose2d: output would be empty on spatial dims");
}

Tensor tconv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                       int stride, int pad) {
  int64_t ho, wo;
  tconv2d_shape_check(x, w, b, stride, pad, ho, wo);
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int64_t hp = ho + 2 * pad, wp = wo + 2 * pad;  // pre-crop extent

  Tensor y = Tensor::zeros({n, co, ho, wo});
  std::vector<real> acc;
  for (int64_t ni = 0; ni < n; ++ni) {
    acc.assign(size_t(co * hp * wp), real(0));
    const real* xi = x.data.data() + ni * ci * h * wd;
    for (int64_t ic = 0; ic < ci; ++ic) {
      const real* xchan = xi + ic * h * wd;
      for (int64_t oc = 0; oc < co; ++oc) {
        real* achan = acc.data() + oc * hp * wp;
        const real* wrow = w.data.data() + (ic * co + oc) * kh * kw;
        for (int64_t r = 0; r < kh; ++r)
          for (int64_t c = 0; c < kw; ++c) {
            const real wv = wrow[r * kw + c];
            for (int64_t ih = 0; ih < h; ++ih) {
              real* dst = achan + (ih * stride + r) * wp + c;
              const real* src = xchan + ih * wd;
              if (stride == 1)
                for (int64_t iw = 0; iw < wd; ++iw) dst[iw] += wv * src[iw];
              else
                for (int64_t iw = 0; iw < wd; ++iw)
                  dst[iw * stride] += wv * src[iw];
            }
          }
      }
    }
    real* yi = y.data.data() + ni * co * ho * wo;
    for (int64_t oc = 0; oc < co; ++oc) {
      const real bias = b.data[size_t(oc)];
      for (int64_t r = 0; r < ho; ++r) {
        const real* src = acc.data() + (oc * hp + r + pad) * wp + pad;
        real* dst = yi + (oc * ho + r) * wo;
        for (int64_t col = 0; col < wo; ++col) dst[col] = src[col] + bias;
      }
    }
  }
  return y;
}

void tconv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad,
                      const Tensor& gy, Tensor* gx, Tensor* gw, Tensor* gb) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int64_t ho = gy.dim(2), wo = gy.dim(3);
  const int64_t hp = ho + 2 * pad, wp = wo + 2 * pad;

  std::vector<real> gpad;
  for (int64_t ni = 0; ni < n; ++ni) {
    pad_item(gy.data.data() + ni * co * ho * wo, co, ho, wo, pad, gpad);
    const real* xi = x.data.data() + ni * ci * h * wd;
    const real* gyi = gy.data.data() + ni * co * ho * wo;

    if (gb != nullptr)
      for (int64_t oc = 0; oc < co; ++oc) {
        const real* g = gyi + oc * ho * wo;
        real s = 0;
        for (int64_t i = 0; i < ho * wo; ++i) s += g[i];
        gb->data[size_t(oc)] += s;
      }

    for (int64_t ic = 0; ic < ci; ++ic) {
      const real* xchan = xi + ic * h * wd;
      real* gxchan =
          gx != nullptr ? gx->data.data() + (ni * ci + ic) * h * wd : nullptr;
      for (int64_t oc = 0; oc < co; ++oc) {
        const real* gchan = gpad.data() + oc * hp * wp;
        for (int64_t r = 0; r < kh; ++r)
          for (int64_t c = 0; c < kw; ++c) {
            const real wv = w.data[size_t((ic * co + oc) * kh * kw + r * kw + c)];
            real acc_w = 0;
            for (int64_t ih = 0; ih < h; ++ih) {
              const real* g = gchan + (ih * stride + r) * wp + c;
              const real* src = xchan + ih * wd;
              real* dst = gxchan != nullptr ? gxchan + ih * wd : nullptr;
              if (stride == 1) {
                if (gw != nullptr)
                  for (int64_t iw = 0; iw < wd; ++iw) acc_w += src[iw] * g[iw];
                if (dst != nullptr)
                  for (int64_t iw = 0; iw < wd; ++iw) dst[iw] += wv * g[iw];
              } else {
                if (gw != nullptr)
                  for (int64_t iw = 0; iw < wd; ++iw)
                    acc_w += src[iw] * g[iw * stride];
                if (dst != nullptr)
                  for (int64_t iw = 0; iw < wd; ++iw)
                    dst[iw] += wv * g[iw * stride];
              }
            }
            if (gw != nullptr)
              gw->data[size_t((ic * co + oc) * kh * kw + r * kw + c)] += acc_w;
          }
      }
    }
  }
}

Tensor instance_norm_forward(const Tensor& x, const Tensor& scale,
                             const Tensor& shift, real eps, Tensor& mean_out,
                             Tensor& inv_std_out) {
  if (x.rank() != 4)
    throw shape_error("instance_norm2d: input must be [N,C,H,W], got " +
                      shape_str(x.shape));
  const int64_t n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
  if (scale.numel() != c || shift.numel() != c)
    throw shape_error("instance_norm2d: scale/shift must have length C=" +
                      std::to_string(c));
  if (m < 1) throw shape_error("instance_norm2d: empty spatial extent");

  Tensor y = Tensor::zeros(x.shape);
  mean_out = Tensor::zeros({n * c});
  inv_std_out = Tensor::zeros({n * c});
  for (int64_t i = 0; i < n * c; ++i) {
    const real* xs = x.data.data() + i * m;
    real mean = 0;
    for (int64_t j = 0; j < m; ++j) mean += xs[j];
    mean /= real(m);
    real var = 0;
    for (int64_t j = 0; j < m; ++j) {
      const real d = xs[j] - mean;
      var += d * d;
    }
    var /= real(m);  // population variance
    const real istd = real(1) / std::sqrt(var + eps);
    mean_out.data[size_t(i)] = mean;
    inv_std_out.data[size_t(i)] = istd;
    const real g = scale.data[size_t(i % c)], sh = shift.data[size_t(i % c)];
    real* ys = y.data.data() + i * m;
    for (int64_t j = 0; j < m; ++j) ys[j] = g * (xs[j] - mean) * istd + sh;
  }
  return y;
}

void instance_norm_backward(const Tensor& x, const Tensor& scale,
                            const Tensor& mean, const Tensor& inv_std,
                            const Tensor& gy, Tensor* gx, Tensor* gscale,
                            Tensor* gshift) {
  const int64_t n = x.dim(0), c = x.dim(1), m = x.dim(2) * x.dim(3);
  for (int64_t i = 0; i < n * c; ++i) {
    const real* xs = x.data.data() + i * m;
    const real* g = gy.data.data() + i * m;
    const real mu = mean.data[size_t(i)], istd = inv_std.data[size_t(i)];
    const real sc = scale.data[size_t(i % c)];

    real sum_g = 0, sum_gx = 0;
    for (int64_t j = 0; j < m; ++j) {
      const real xhat = (xs[j] - mu) * istd;
      sum_g += g[j];
      sum_gx += g[j] * xhat;
    }
    if (gshift != nullptr) gshift->data[size_t(i % c)] += sum_g;
    if (gscale != nullptr) gscale->data[size_t(i % c)] += sum_gx;
    if (gx != nullptr) {
      const real k = sc * istd;
      const real mg = sum_g / real(m), mgx = sum_gx / real(m);
      real* out = gx->data.data() + i * m;
      for (int64_t j = 0; j < m; ++j) {
        const real xhat = (xs[j] - mu) * istd;
        out[j] += k * (g[j] - mg - xhat * mgx);
      }
    }
  }
}

Tensor max_pool2d_forward(const Tensor& x, Tensor& argmax_out) {
  if (x.rank() != 4)
    throw shape_error("max_pool2d: input must be [N,C,H,W], got " +
                      shape_str(x.shape));
  const int64_t h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw shape_error("max_pool2d: spatial dims must be even, got " +
                      shape_str(x.shape));
  const int64_t nc = x.dim(0) * x.dim(1), ho = h / 2, wo = w / 2;
  Tensor y = Tensor::zeros({x.dim(0), x.dim(1), ho, wo});
  argmax_out = Tensor::zeros(y.shape);  // flat input offsets, exact in a real
  for (int64_t i = 0; i < nc; ++i) {
    const real* xs = x.data.data() + i * h * w;
    real* ys = y.data.data() + i * ho * wo;
    real* as = argmax_out.data.data() + i * ho * wo;
    for (int64_t r = 0; r < ho; ++r)
      for (int64_t c = 0; c < wo; ++c) {
        const int64_t base = (2 * r) * w + 2 * c;
        // first max in row-major window order wins (deterministic ties)
        int64_t best = base;
        real bv = xs[base];
        const int64_t cand[3] = {base + 1, base + w, base + w + 1};
        for (int64_t k : cand)
          if (xs[k] > bv) {
            bv = xs[k];
            best = k;
          }
        ys[r * wo + c] = bv;
        as[r * wo + c] = real(i * h * w + best);
      }
  }
  return y;
}

void max_pool2d_backward(const Tensor& argmax, const Tensor& gy, Tensor& gx) {
  for (int64_t i = 0; i < gy.numel(); ++i)
    gx.data[size_t(int64_t(argmax.data[size_t(i)]))] += gy.data[size_t(i)];
}

namespace {
// Apply f per channel fiber of an NCHW tensor: f(in + offsets, out + offsets)
// with channel stride hw.
template <class F>
void for_each_fiber(const Tensor& x, F&& f) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t j = 0; j < hw; ++j) f(ni * c * hw + j, hw, c);
}
}  // namespace

Tensor softmax_channel_forward(const Tensor& x) {
  if (x.rank() != 4)
    throw shape_error("softmax: input must be [N,C,H,W], got " +
                      shape_str(x.shape));
  Tensor y = Tensor::zeros(x.shape);
  for_each_fiber(x, [&](int64_t base, int64_t stride, int64_t c) {
    real mx = x.data[size_t(base)];
    for (int64_t k = 1; k < c; ++k)
      mx = std::max(mx, x.data[size_t(base + k * stride)]);
    real z = 0;
    for (int64_t k = 0; k < c; ++k) {
      const real e = std::exp(x.data[size_t(base + k * stride)] - mx);
      y.data[size_t(base + k * stride)] = e;
      z += e;
    }
    const real inv = real(1) / z;
    for (int64_t k = 0; k < c; ++k) y.data[size_t(base + k * stride)] *= inv;
  });
  return y;
}

void softmax_channel_backward(const Tensor& y, const Tensor& gy, Tensor& gx) {
  for_each_fiber(y, [&](int64_t base, int64_t stride, int64_t c) {
    real dot = 0;
    for (int64_t k = 0; k < c; ++k)
      dot += y.data[size_t(base + k * stride)] * gy.data[size_t(base + k * stride)];
    for (int64_t k = 0; k < c; ++k) {
      const size_t i = size_t(base + k * stride);
      gx.data[i] += y.data[i] * (gy.data[i] - dot);
    }
  });
}

Tensor log_softmax_channel_forward(const Tensor& x) {
  if (x.rank() != 4)
    throw shape_error("log_softmax: input must be [N,C,H,W], got " +
                      shape_str(x.shape));
  Tensor y = Tensor::zeros(x.shape);
  for_each_fiber(x, [&](int64_t base, int64_t stride, int64_t c) {
    real mx = x.data[size_t(base)];
    for (int64_t k = 1; k < c; ++k)
      mx = std::max(mx, x.data[size_t(base + k * stride)]);
    real z = 0;
    for (int64_t k = 0; k < c; ++k)
      z += std::exp(x.data[size_t(base + k * stride)] - mx);
    const real lse = mx + std::log(z);
    for (int64_t k = 0; k < c; ++k) {
      const size_t i = size_t(base + k * stride);
      y.data[i] = x.data[i] - lse;
    }
  });
  return y;
}

void log_softmax_channel_backward(const Tensor& y, const Tensor& gy,
                                  Tensor& gx) {
  for_each_fiber(y, [&](int64_t base, int64_t stride, int64_t c) {
    real sum_g = 0;
    for (int64_t k = 0; k < c; ++k) sum_g += gy.data[size_t(base + k * stride)];
    for (int64_t k = 0; k < c; ++k) {
      const size_t i = size_t(base + k * stride);
      gx.data[i] += gy.data[i] - std::exp(y.data[i]) * sum_g;
    }
  });
}

Tensor matmul_forward(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape) +
                      " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const real av = a.data[size_t(i * k + p)];
      const real* brow = b.data.data() + p * n;
      real* crow = c.data.data() + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return c;
}

void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gc,
                     Tensor* ga, Tensor* gb) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (ga != nullptr)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        const real* grow = gc.data.data() + i * n;
        const real* brow = b.data.data() + p * n;
        real acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        ga->data[size_t(i * k + p)] += acc;
      }
  if (gb != nullptr)
    for (int64_t p = 0; p < k; ++p)
      for (int64_t i = 0; i < m; ++i) {
        const real av = a.data[size_t(i * k + p)];
        const real* grow = gc.data.data() + i * n;
        real* brow = gb->data.data() + p * n;
        for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
      }
}

}  // namespace dgst::kern
