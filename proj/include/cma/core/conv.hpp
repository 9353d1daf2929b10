#pragma once

// Spatial ops on [B, C, H, W] tensors: conv2d (im2col + GEMM), batch norm,
// nearest upsampling, adaptive average pooling. The im2col buffers are
// recomputed in the backward pass instead of cached, keeping graph memory
// proportional to activations.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cma/core/ops.hpp"
#include "cma/core/tensor.hpp"

namespace cma {

struct Conv2dSpec {
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t dilation = 1;
};

namespace detail {

inline int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t pad, int64_t dil) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

inline void im2col(const real* x, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                   const Conv2dSpec& sp, int64_t OH, int64_t OW, real* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t kh = 0; kh < KH; ++kh) {
      for (int64_t kw = 0; kw < KW; ++kw) {
        real* row = col + ((c * KH + kh) * KW + kw) * OH * OW;
        const int64_t ih0 = kh * sp.dilation - sp.pad;
        const int64_t iw0 = kw * sp.dilation - sp.pad;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = ih0 + oh * sp.stride;
          real* dst = row + oh * OW;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst, OW, 0.0);
            continue;
          }
          const real* src = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = iw0 + ow * sp.stride;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const real* col, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                       const Conv2dSpec& sp, int64_t OH, int64_t OW, real* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t kh = 0; kh < KH; ++kh) {
      for (int64_t kw = 0; kw < KW; ++kw) {
        const real* row = col + ((c * KH + kh) * KW + kw) * OH * OW;
        const int64_t ih0 = kh * sp.dilation - sp.pad;
        const int64_t iw0 = kw * sp.dilation - sp.pad;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = ih0 + oh * sp.stride;
          if (ih < 0 || ih >= H) continue;
          const real* src = row + oh * OW;
          real* dst = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = iw0 + ow * sp.stride;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dSpec& sp = {}) {
  CMA_CHECK_SHAPE(x.ndim() == 4, "conv2d input must be [B,C,H,W], got " << shape_str(x.shape()));
  CMA_CHECK_SHAPE(w.ndim() == 4, "conv2d weight must be [O,C,KH,KW]");
  CMA_CHECK_SHAPE(x.dim(1) == w.dim(1),
                  "conv2d channels: input " << x.dim(1) << " vs weight " << w.dim(1));
  CMA_CHECK_CFG(sp.stride >= 1 && sp.dilation >= 1 && sp.pad >= 0, "bad conv2d spec");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t OH = detail::conv_out_size(H, KH, sp.stride, sp.pad, sp.dilation);
  const int64_t OW = detail::conv_out_size(W, KW, sp.stride, sp.pad, sp.dilation);
  CMA_CHECK_SHAPE(OH >= 1 && OW >= 1, "conv2d output collapsed to zero size");
  if (bias.defined()) CMA_CHECK_SHAPE(bias.numel() == O, "conv2d bias size mismatch");
  const int64_t ckk = C * KH * KW;

  auto px = x.node();
  auto pw = w.node();
  auto vx = x.node()->value;
  auto vw = w.node()->value;
  std::shared_ptr<TensorNode> pbias = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> deps = bias.defined() ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};

  Tensor out = detail::make_result(
      {B, O, OH, OW}, deps,
      [px, pw, pbias, vx, vw, B, C, H, W, O, KH, KW, OH, OW, ckk, sp](TensorNode& self) {
        std::vector<real> col(static_cast<size_t>(ckk * OH * OW));
        std::vector<real> colg;
        if (px->requires_grad) {
          px->ensure_grad();
          colg.resize(static_cast<size_t>(ckk * OH * OW));
        }
        if (pw->requires_grad) pw->ensure_grad();
        if (pbias && pbias->requires_grad) pbias->ensure_grad();
        for (int64_t b = 0; b < B; ++b) {
          MapC G(self.grad.data() + b * O * OH * OW, O, OH * OW);
          if (pw->requires_grad || px->requires_grad)
            detail::im2col(vx->data() + b * C * H * W, C, H, W, KH, KW, sp, OH, OW, col.data());
          if (pw->requires_grad) {
            MapM GW(pw->grad.data(), O, ckk);
            MapC Col(col.data(), ckk, OH * OW);
            GW.noalias() += G * Col.transpose();
          }
          if (px->requires_grad) {
            MapM ColG(colg.data(), ckk, OH * OW);
            MapC Wm(vw->data(), O, ckk);
            ColG.noalias() = Wm.transpose() * G;
            detail::col2im_add(colg.data(), C, H, W, KH, KW, sp, OH, OW,
                               px->grad.data() + b * C * H * W);
          }
          if (pbias && pbias->requires_grad) {
            for (int64_t o = 0; o < O; ++o) {
              real acc = 0.0;
              const real* gp = self.grad.data() + (b * O + o) * OH * OW;
              for (int64_t i = 0; i < OH * OW; ++i) acc += gp[i];
              pbias->grad[static_cast<size_t>(o)] += acc;
            }
          }
        }
      });

  std::vector<real> col(static_cast<size_t>(ckk * OH * OW));
  for (int64_t b = 0; b < B; ++b) {
    detail::im2col(vx->data() + b * C * H * W, C, H, W, KH, KW, sp, OH, OW, col.data());
    MapM Om(out.data() + b * O * OH * OW, O, OH * OW);
    MapC Wm(vw->data(), O, ckk);
    MapC Col(col.data(), ckk, OH * OW);
    Om.noalias() = Wm * Col;
    if (bias.defined()) {
      for (int64_t o = 0; o < O; ++o) {
        real* row = out.data() + (b * O + o) * OH * OW;
        const real bv = bias.data()[o];
        for (int64_t i = 0; i < OH * OW; ++i) row[i] += bv;
      }
    }
  }
  return out;
}

// Batch norm over (B, H, W) per channel. `running_mean`/`running_var` are
// plain buffers updated in training mode; PyTorch conventions (biased batch
// variance for normalization, unbiased for the running estimate).
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           Tensor& running_mean, Tensor& running_var, bool training,
                           real momentum = 0.1, real eps = 1e-5) {
  CMA_CHECK_SHAPE(x.ndim() == 4, "batch_norm2d input must be [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  CMA_CHECK_SHAPE(gamma.numel() == C && beta.numel() == C, "batch_norm2d affine width mismatch");
  const int64_t spatial = H * W;
  const int64_t n = B * spatial;
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto vx = x.node()->value;
  auto vg = gamma.node()->value;

  std::vector<real> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      real m = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const real* p = vx->data() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) m += p[i];
      }
      m /= static_cast<real>(n);
      real v = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const real* p = vx->data() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          const real d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<real>(n);
      mean[static_cast<size_t>(c)] = m;
      var[static_cast<size_t>(c)] = v;
      const real unbiased = n > 1 ? v * static_cast<real>(n) / static_cast<real>(n - 1) : v;
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = running_mean.data()[c];
      var[static_cast<size_t>(c)] = running_var.data()[c];
    }
  }

  auto xhat = std::make_shared<std::vector<real>>(static_cast<size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<real>>(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c)
    (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);

  Tensor out = detail::make_result(
      x.shape(), {x, gamma, beta},
      [px, pg, pb, vg, xhat, invstd, B, C, spatial, n, training](TensorNode& self) {
        const real* g = self.grad.data();
        const real* xh = xhat->data();
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          real sum_g = 0.0, sum_gx = 0.0;
          for (int64_t b = 0; b < B; ++b) {
            const int64_t base = (b * C + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xh[base + i];
            }
          }
          if (pg->requires_grad) pg->grad[static_cast<size_t>(c)] += sum_gx;
          if (pb->requires_grad) pb->grad[static_cast<size_t>(c)] += sum_g;
          if (px->requires_grad) {
            const real gm = vg->data()[c];
            const real istd = (*invstd)[static_cast<size_t>(c)];
            if (training) {
              const real inv_n = 1.0 / static_cast<real>(n);
              for (int64_t b = 0; b < B; ++b) {
                const int64_t base = (b * C + c) * spatial;
                real* gx = px->grad.data() + base;
                for (int64_t i = 0; i < spatial; ++i)
                  gx[i] += gm * istd * (g[base + i] - inv_n * sum_g - xh[base + i] * inv_n * sum_gx);
              }
            } else {
              for (int64_t b = 0; b < B; ++b) {
                const int64_t base = (b * C + c) * spatial;
                real* gx = px->grad.data() + base;
                for (int64_t i = 0; i < spatial; ++i) gx[i] += gm * istd * g[base + i];
              }
            }
          }
        }
      });
  real* o = out.data();
  const real* xp = vx->data();
  for (int64_t c = 0; c < C; ++c) {
    const real m = mean[static_cast<size_t>(c)];
    const real istd = (*invstd)[static_cast<size_t>(c)];
    const real gm = gamma.data()[c];
    const real bt = beta.data()[c];
    for (int64_t b = 0; b < B; ++b) {
      const int64_t base = (b * C + c) * spatial;
      real* xh = xhat->data() + base;
      for (int64_t i = 0; i < spatial; ++i) {
        xh[i] = (xp[base + i] - m) * istd;
        o[base + i] = xh[i] * gm + bt;
      }
    }
  }
  return out;
}

inline Tensor upsample_nearest(const Tensor& x, int64_t scale) {
  CMA_CHECK_SHAPE(x.ndim() == 4, "upsample_nearest input must be [B,C,H,W]");
  CMA_CHECK_CFG(scale >= 1, "upsample scale must be >= 1");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = H * scale, OW = W * scale;
  auto px = x.node();
  auto vx = x.node()->value;
  Tensor out = detail::make_result({B, C, OH, OW}, {x}, [px, B, C, H, W, scale](TensorNode& self) {
    px->ensure_grad();
    const int64_t OW = W * scale;
    const real* g = self.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      real* gx = px->grad.data() + bc * H * W;
      const real* go = g + bc * (H * scale) * OW;
      for (int64_t oh = 0; oh < H * scale; ++oh) {
        const int64_t ih = oh / scale;
        for (int64_t ow = 0; ow < OW; ++ow) gx[ih * W + ow / scale] += go[oh * OW + ow];
      }
    }
  });
  real* o = out.data();
  const real* xp = vx->data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const real* src = xp + bc * H * W;
    real* dst = o + bc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
      const real* srow = src + (oh / scale) * W;
      real* drow = dst + oh * OW;
      for (int64_t ow = 0; ow < OW; ++ow) drow[ow] = srow[ow / scale];
    }
  }
  return out;
}

// PyTorch-style adaptive bins: cell (i,j) averages rows [i*H/oh, ceil((i+1)*H/oh)).
inline Tensor adaptive_avg_pool2d(const Tensor& x, int64_t oh, int64_t ow) {
  CMA_CHECK_SHAPE(x.ndim() == 4, "adaptive_avg_pool2d input must be [B,C,H,W]");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  CMA_CHECK_CFG(oh >= 1 && ow >= 1 && oh <= H && ow <= W, "bad adaptive pool target");
  auto start = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
  auto end = [](int64_t i, int64_t in, int64_t out) { return ((i + 1) * in + out - 1) / out; };
  auto px = x.node();
  auto vx = x.node()->value;
  Tensor out = detail::make_result({B, C, oh, ow}, {x}, [px, B, C, H, W, oh, ow, start, end](TensorNode& self) {
    px->ensure_grad();
    const real* g = self.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      real* gx = px->grad.data() + bc * H * W;
      const real* go = g + bc * oh * ow;
      for (int64_t i = 0; i < oh; ++i) {
        const int64_t h0 = start(i, H, oh), h1 = end(i, H, oh);
        for (int64_t j = 0; j < ow; ++j) {
          const int64_t w0 = start(j, W, ow), w1 = end(j, W, ow);
          const real share = go[i * ow + j] / static_cast<real>((h1 - h0) * (w1 - w0));
          for (int64_t h = h0; h < h1; ++h)
            for (int64_t w = w0; w < w1; ++w) gx[h * W + w] += share;
        }
      }
    }
  });
  real* o = out.data();
  const real* xp = vx->data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const real* src = xp + bc * H * W;
    real* dst = o + bc * oh * ow;
    for (int64_t i = 0; i < oh; ++i) {
      const int64_t h0 = start(i, H, oh), h1 = end(i, H, oh);
      for (int64_t j = 0; j < ow; ++j) {
        const int64_t w0 = start(j, W, ow), w1 = end(j, W, ow);
        real acc = 0.0;
        for (int64_t h = h0; h < h1; ++h)
          for (int64_t w = w0; w < w1; ++w) acc += src[h * W + w];
        dst[i * ow + j] = acc / static_cast<real>((h1 - h0) * (w1 - w0));
      }
    }
  }
  return out;
}

// [B,C,H,W] -> [B,C]
inline Tensor global_avg_pool(const Tensor& x) {
  Tensor pooled = adaptive_avg_pool2d(x, 1, 1);
  return reshape(pooled, {x.dim(0), x.dim(1)});
}

}  // namespace cma
