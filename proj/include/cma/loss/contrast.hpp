#pragma once

// Boundary-aware contrastive machinery: exact signed distance maps from
// binary masks (two-pass Felzenszwalb-Huttenlocher transform), pooled
// projection heads over the SDM, and the InfoNCE objective between teacher
// and student embeddings.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cma/core/nn.hpp"
#include "cma/core/ops.hpp"

namespace cma::loss {

namespace detail {

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas); exact for integer-valued inputs.
inline void dt1d(const std::vector<real>& f, std::vector<real>& d, std::vector<int>& v,
                 std::vector<real>& z) {
  const int n = static_cast<int>(f.size());
  constexpr real kInf = std::numeric_limits<real>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    real s = ((f[static_cast<size_t>(q)] + static_cast<real>(q) * q) -
              (f[static_cast<size_t>(v[static_cast<size_t>(k)])] +
               static_cast<real>(v[static_cast<size_t>(k)]) * v[static_cast<size_t>(k)])) /
             (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
    while (s <= z[static_cast<size_t>(k)]) {
      --k;
      s = ((f[static_cast<size_t>(q)] + static_cast<real>(q) * q) -
           (f[static_cast<size_t>(v[static_cast<size_t>(k)])] +
            static_cast<real>(v[static_cast<size_t>(k)]) * v[static_cast<size_t>(k)])) /
          (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k + 1)] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k + 1)] < q) ++k;
    const real dq = static_cast<real>(q - v[static_cast<size_t>(k)]);
    d[static_cast<size_t>(q)] = dq * dq + f[static_cast<size_t>(v[static_cast<size_t>(k)])];
  }
}

}  // namespace detail

// Boundary pixels: foreground with a 4-neighbor that is background or lies
// outside the image.
inline std::vector<uint8_t> boundary_pixels(const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
  std::vector<uint8_t> b(mask.size(), 0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (!mask[static_cast<size_t>(y * w + x)]) continue;
      const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
      const bool bg_nb = (y > 0 && !mask[static_cast<size_t>((y - 1) * w + x)]) ||
                         (y < h - 1 && !mask[static_cast<size_t>((y + 1) * w + x)]) ||
                         (x > 0 && !mask[static_cast<size_t>(y * w + x - 1)]) ||
                         (x < w - 1 && !mask[static_cast<size_t>(y * w + x + 1)]);
      if (edge || bg_nb) b[static_cast<size_t>(y * w + x)] = 1;
    }
  return b;
}

// Exact squared Euclidean distance to the nearest boundary pixel. Two 1-D
// passes (rows then columns). Cells use a finite pseudo-infinity larger than
// any reachable squared distance, which keeps the parabola intersections
// finite and the reachable results exact.
inline std::vector<real> boundary_distance_sq(const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
  const real big = static_cast<real>(4 * (h * h + w * w) + 16);
  const std::vector<uint8_t> boundary = boundary_pixels(mask, h, w);
  std::vector<real> dist(static_cast<size_t>(h * w), big);
  for (size_t i = 0; i < boundary.size(); ++i)
    if (boundary[i]) dist[i] = 0.0;

  const size_t maxdim = static_cast<size_t>(std::max(h, w));
  std::vector<int> v(maxdim);
  std::vector<real> z(maxdim + 1);
  std::vector<real> f(static_cast<size_t>(w)), d(static_cast<size_t>(w));

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) f[static_cast<size_t>(x)] = dist[static_cast<size_t>(y * w + x)];
    detail::dt1d(f, d, v, z);
    for (int64_t x = 0; x < w; ++x) dist[static_cast<size_t>(y * w + x)] = d[static_cast<size_t>(x)];
  }
  f.resize(static_cast<size_t>(h));
  d.resize(static_cast<size_t>(h));
  for (int64_t x = 0; x < w; ++x) {
    for (int64_t y = 0; y < h; ++y) f[static_cast<size_t>(y)] = dist[static_cast<size_t>(y * w + x)];
    detail::dt1d(f, d, v, z);
    for (int64_t y = 0; y < h; ++y) dist[static_cast<size_t>(y * w + x)] = d[static_cast<size_t>(y)];
  }
  return dist;
}

// Signed distance map normalized to [-1, 1]: negative inside the foreground,
// zero on boundary pixels, positive outside; an empty mask maps to +1
// everywhere by convention.
inline Tensor signed_distance_map(const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
  CMA_CHECK_INPUT(static_cast<int64_t>(mask.size()) == h * w, "mask size does not match dims");
  bool any_fg = false;
  for (uint8_t m : mask) {
    CMA_CHECK_INPUT(m == 0 || m == 1, "signed_distance_map requires a binary mask");
    any_fg = any_fg || m == 1;
  }
  Tensor out = Tensor::zeros({h, w});
  if (!any_fg) {
    std::fill_n(out.data(), h * w, 1.0);
    return out;
  }
  const std::vector<real> sq = boundary_distance_sq(mask, h, w);
  real max_abs = 0.0;
  for (int64_t i = 0; i < h * w; ++i) {
    const real d = std::sqrt(sq[static_cast<size_t>(i)]);
    const real s = (d == 0.0) ? 0.0 : (mask[static_cast<size_t>(i)] ? -d : d);
    out.data()[i] = s;
    max_abs = std::max(max_abs, std::abs(s));
  }
  if (max_abs > 0.0)
    for (int64_t i = 0; i < h * w; ++i) out.data()[i] /= max_abs;
  return out;
}

// SDMs for a batch of predicted probabilities: foreground = classes 1..C-1
// combined, hard-thresholded at `threshold`. Output [B,1,H,W], no gradient.
inline Tensor sdm_from_probs(const Tensor& probs, real threshold = 0.5) {
  CMA_CHECK_SHAPE(probs.ndim() == 4 && probs.dim(1) >= 2, "sdm_from_probs expects [B,C,H,W]");
  const int64_t b = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  Tensor out = Tensor::zeros({b, 1, h, w});
  std::vector<uint8_t> mask(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = 0; j < h * w; ++j) {
      real fg = 0.0;
      for (int64_t ch = 1; ch < c; ++ch) fg += probs.data()[(i * c + ch) * h * w + j];
      mask[static_cast<size_t>(j)] = fg > threshold ? 1 : 0;
    }
    Tensor sdm = signed_distance_map(mask, h, w);
    std::copy_n(sdm.data(), h * w, out.data() + i * h * w);
  }
  return out;
}

// Pooled SDM features -> fixed-width L2-normalized embedding.
class ProjectionHead : public nn::Module {
public:
  ProjectionHead(Rng& rng, int64_t pool_grid = 8, int64_t hidden = 64, int64_t embed_dim = 32)
      : pool_grid_(pool_grid),
        fc1(pool_grid * pool_grid, hidden, rng),
        fc2(hidden, embed_dim, rng) {
    CMA_CHECK_CFG(pool_grid >= 1 && hidden >= 1 && embed_dim >= 1, "bad projection head dims");
    register_module("fc1", fc1);
    register_module("fc2", fc2);
  }

  // [B,1,H,W] -> [B, embed_dim], rows normalized to unit length.
  Tensor forward(const Tensor& sdm) const {
    CMA_CHECK_SHAPE(sdm.ndim() == 4 && sdm.dim(1) == 1, "projection head expects [B,1,H,W]");
    CMA_CHECK_SHAPE(sdm.dim(2) >= pool_grid_ && sdm.dim(3) >= pool_grid_,
                    "input smaller than the projection head pool grid");
    Tensor pooled = adaptive_avg_pool2d(sdm, pool_grid_, pool_grid_);
    Tensor flat = reshape(pooled, {sdm.dim(0), pool_grid_ * pool_grid_});
    return l2_normalize_rows(fc2.forward(gelu(fc1.forward(flat))));
  }

  int64_t pool_grid() const { return pool_grid_; }

  nn::Linear fc1, fc2;

private:
  int64_t pool_grid_;
};

// Teacher/student embeddings with a shared temperature.
struct EmbeddingBatch {
  Tensor teacher;  // [N, D]
  Tensor student;  // [N, D]
  real tau = 0.1;

  void validate() const {
    CMA_CHECK_CFG(tau > 0.0, "temperature must be positive, got " << tau);
    CMA_CHECK_SHAPE(teacher.ndim() == 2 && student.ndim() == 2 && teacher.shape() == student.shape(),
                    "teacher/student embeddings must both be [N, D]");
    for (const Tensor* t : {&teacher, &student}) {
      const int64_t n = t->dim(0), d = t->dim(1);
      for (int64_t i = 0; i < n; ++i) {
        real sq = 0.0;
        for (int64_t j = 0; j < d; ++j) sq += t->data()[i * d + j] * t->data()[i * d + j];
        CMA_CHECK_INPUT(std::abs(std::sqrt(sq) - 1.0) <= 1e-6, "embedding row " << i << " not unit length");
      }
    }
  }
};

// InfoNCE: each teacher row i is contrasted against all student rows, with
// (i, i) as the positive pair; averaged over rows.
inline Tensor info_nce(const Tensor& teacher, const Tensor& student, real tau) {
  CMA_CHECK_CFG(tau > 0.0, "temperature must be positive, got " << tau);
  CMA_CHECK_SHAPE(teacher.ndim() == 2 && student.ndim() == 2 && teacher.shape() == student.shape(),
                  "info_nce expects matching [N, D] embeddings");
  Tensor sims = mul_scalar(matmul(teacher, permute(student, {1, 0})), 1.0 / tau);
  Tensor lse = logsumexp(sims, 1);   // [N]
  Tensor pos = diag2d(sims);         // [N]
  return mean_all(sub(lse, pos));
}

inline Tensor info_nce(const EmbeddingBatch& batch) {
  batch.validate();
  return info_nce(batch.teacher, batch.student, batch.tau);
}

}  // namespace cma::loss
