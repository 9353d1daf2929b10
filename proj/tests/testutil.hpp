#pragma once

// Shared test helpers: finite-difference gradient checking and the
// independent straight-line oracles the module tests compare against. The
// oracles deliberately avoid the library's op layer: plain loops only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "cma/core/tensor.hpp"

namespace testutil {

using cma::real;
using cma::Tensor;

// Central finite differences vs autodiff. `forward` must rebuild the graph
// from the current contents of `inputs` and return a scalar. Elements are
// subsampled with a stride so large tensors stay cheap.
inline double max_rel_grad_error(const std::function<Tensor()>& forward, std::vector<Tensor> inputs,
                                 double h = 1e-5, int64_t max_checks_per_input = 64) {
  Tensor loss = forward();
  loss.backward();
  std::vector<std::vector<real>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  double worst = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    const int64_t n = t.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_checks_per_input);
    for (int64_t i = 0; i < n; i += stride) {
      const real saved = t.data()[i];
      t.data()[i] = saved + h;
      const real fp = forward().item();
      t.data()[i] = saved - h;
      const real fm = forward().item();
      t.data()[i] = saved;
      const real numeric = (fp - fm) / (2.0 * h);
      const real a = analytic[k][static_cast<size_t>(i)];
      const real scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, static_cast<double>(std::abs(a - numeric) / scale));
    }
    t.zero_grad();
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Plain-loop linear algebra for oracles

// y[r, o] = sum_i x[r, i] w[i, o] + b[o]
inline std::vector<real> oracle_linear(const std::vector<real>& x, int64_t rows, int64_t in,
                                       const std::vector<real>& w, const std::vector<real>& b, int64_t out) {
  std::vector<real> y(static_cast<size_t>(rows * out), 0.0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t o = 0; o < out; ++o) {
      real acc = b.empty() ? 0.0 : b[static_cast<size_t>(o)];
      for (int64_t i = 0; i < in; ++i)
        acc += x[static_cast<size_t>(r * in + i)] * w[static_cast<size_t>(i * out + o)];
      y[static_cast<size_t>(r * out + o)] = acc;
    }
  return y;
}

inline void oracle_softmax_row(std::vector<real>& row) {
  real mx = row[0];
  for (real v : row) mx = std::max(mx, v);
  real sum = 0.0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : row) v /= sum;
}

inline real oracle_gelu(real x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Straight-line softmax(QK^T/sqrt(dk) + P)V over one head's matrices.
// q:[tq,dk] k,v:[tk,dk] bias:[tq,tk] (may be empty)
inline std::vector<real> oracle_attention_head(const std::vector<real>& q, const std::vector<real>& k,
                                               const std::vector<real>& v, const std::vector<real>& bias,
                                               int64_t tq, int64_t tk, int64_t dk) {
  std::vector<real> out(static_cast<size_t>(tq * dk), 0.0);
  const real scale = 1.0 / std::sqrt(static_cast<real>(dk));
  for (int64_t a = 0; a < tq; ++a) {
    std::vector<real> row(static_cast<size_t>(tk));
    for (int64_t b = 0; b < tk; ++b) {
      real dot = 0.0;
      for (int64_t d = 0; d < dk; ++d)
        dot += q[static_cast<size_t>(a * dk + d)] * k[static_cast<size_t>(b * dk + d)];
      row[static_cast<size_t>(b)] =
          dot * scale + (bias.empty() ? 0.0 : bias[static_cast<size_t>(a * tk + b)]);
    }
    oracle_softmax_row(row);
    for (int64_t b = 0; b < tk; ++b)
      for (int64_t d = 0; d < dk; ++d)
        out[static_cast<size_t>(a * dk + d)] += row[static_cast<size_t>(b)] * v[static_cast<size_t>(b * dk + d)];
  }
  return out;
}

// Dilated 3x3 convolution with same-size zero padding, one output channel
// position at a time.
inline std::vector<real> oracle_dilated_conv3x3(const std::vector<real>& x, int64_t cin, int64_t h, int64_t w,
                                                const std::vector<real>& weight, const std::vector<real>& bias,
                                                int64_t cout, int64_t rate) {
  std::vector<real> y(static_cast<size_t>(cout * h * w), 0.0);
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t oy = 0; oy < h; ++oy)
      for (int64_t ox = 0; ox < w; ++ox) {
        real acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(co)];
        for (int64_t ci = 0; ci < cin; ++ci)
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t iy = oy + (ky - 1) * rate;
              const int64_t ix = ox + (kx - 1) * rate;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[static_cast<size_t>((ci * h + iy) * w + ix)] *
                     weight[static_cast<size_t>(((co * cin + ci) * 3 + ky) * 3 + kx)];
            }
        y[static_cast<size_t>((co * h + oy) * w + ox)] = acc;
      }
  return y;
}

// Eq-style weighted BCE-Dice consistency loss, straight off the formula.
inline real oracle_consistency_loss(const std::vector<real>& p1, const std::vector<real>& p2,
                                    const std::vector<real>& y1, const std::vector<real>& y2, real alpha,
                                    real beta1, real beta2, real eps) {
  const size_t n = p1.size();
  real acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const real q1 = std::min(std::max(p1[i], eps), 1.0 - eps);
    const real q2 = std::min(std::max(p2[i], eps), 1.0 - eps);
    const real bce = y1[i] * std::log(q1) + y2[i] * std::log(q2);
    const real d1 = (y1[i] + q1) == 0.0 ? 0.0 : y1[i] * q1 / (y1[i] + q1);
    const real d2 = (y2[i] + q2) == 0.0 ? 0.0 : y2[i] * q2 / (y2[i] + q2);
    acc += alpha * bce + beta1 * d1 + beta2 * d2;
  }
  return -acc / static_cast<real>(n);
}

// Brute-force active-set enumeration for the box + sum-cap projection:
// every {lower, upper, free} pattern, cap active or not, feasibility-checked,
// minimum squared distance wins.
struct OracleProjection {
  std::vector<real> p_star;
  bool feasible = false;
};

inline OracleProjection oracle_project_enum(const std::vector<real>& p, const std::vector<real>& lo,
                                            const std::vector<real>& hi, real cap) {
  const int n = static_cast<int>(p.size());
  OracleProjection best;
  real best_obj = 0.0;

  real sum_lo = 0.0;
  for (real l : lo) sum_lo += std::max(l, 0.0);
  if (sum_lo > cap + 1e-12) return best;  // infeasible

  std::vector<int> pattern(static_cast<size_t>(n), 0);  // 0 free, 1 at lower, 2 at upper
  std::vector<real> q(static_cast<size_t>(n));
  const real tol = 1e-9;

  auto consider = [&](const std::vector<real>& cand) {
    real sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const real l = std::max(lo[static_cast<size_t>(i)], 0.0);
      if (cand[static_cast<size_t>(i)] < l - tol || cand[static_cast<size_t>(i)] > hi[static_cast<size_t>(i)] + tol)
        return;
      sum += cand[static_cast<size_t>(i)];
    }
    if (sum > cap + 1e-7) return;
    real obj = 0.0;
    for (int i = 0; i < n; ++i) {
      const real d = cand[static_cast<size_t>(i)] - p[static_cast<size_t>(i)];
      obj += d * d;
    }
    if (!best.feasible || obj < best_obj - 1e-15) {
      best.feasible = true;
      best_obj = obj;
      best.p_star = cand;
    }
  };

  const int total = static_cast<int>(std::pow(3, n));
  for (int mask = 0; mask < total; ++mask) {
    int m = mask;
    int free_count = 0;
    real fixed_sum = 0.0, free_sum = 0.0;
    for (int i = 0; i < n; ++i) {
      pattern[static_cast<size_t>(i)] = m % 3;
      m /= 3;
      if (pattern[static_cast<size_t>(i)] == 0) {
        free_count++;
        free_sum += p[static_cast<size_t>(i)];
      } else if (pattern[static_cast<size_t>(i)] == 1) {
        fixed_sum += std::max(lo[static_cast<size_t>(i)], 0.0);
      } else {
        fixed_sum += hi[static_cast<size_t>(i)];
      }
    }
    // cap inactive: free coords keep p_i
    for (int i = 0; i < n; ++i) {
      const real l = std::max(lo[static_cast<size_t>(i)], 0.0);
      q[static_cast<size_t>(i)] = pattern[static_cast<size_t>(i)] == 0
                                      ? p[static_cast<size_t>(i)]
                                      : (pattern[static_cast<size_t>(i)] == 1 ? l : hi[static_cast<size_t>(i)]);
    }
    consider(q);
    // cap active: free coords share a uniform shift so the sum hits the cap
    if (free_count > 0) {
      const real shift = (free_sum + fixed_sum - cap) / static_cast<real>(free_count);
      if (shift >= -tol) {
        for (int i = 0; i < n; ++i)
          if (pattern[static_cast<size_t>(i)] == 0)
            q[static_cast<size_t>(i)] = p[static_cast<size_t>(i)] - shift;
        consider(q);
      }
    }
  }
  return best;
}

// All-pairs nearest-boundary squared distances (O(n^2) reference).
inline std::vector<real> oracle_boundary_dist_sq(const std::vector<uint8_t>& boundary, int64_t h, int64_t w) {
  std::vector<std::pair<int64_t, int64_t>> pts;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      if (boundary[static_cast<size_t>(y * w + x)]) pts.emplace_back(y, x);
  std::vector<real> d(static_cast<size_t>(h * w), std::numeric_limits<real>::infinity());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      real best = std::numeric_limits<real>::infinity();
      for (const auto& [py, px] : pts) {
        const real dy = static_cast<real>(y - py), dx = static_cast<real>(x - px);
        best = std::min(best, dy * dy + dx * dx);
      }
      d[static_cast<size_t>(y * w + x)] = best;
    }
  return d;
}

// InfoNCE straight off the formula: anchor i against every student row.
inline real oracle_info_nce(const std::vector<real>& ht, const std::vector<real>& hs, int64_t n, int64_t dim,
                            real tau) {
  real total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    real pos = 0.0;
    for (int64_t d = 0; d < dim; ++d)
      pos += ht[static_cast<size_t>(i * dim + d)] * hs[static_cast<size_t>(i * dim + d)];
    real denom = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      real dot = 0.0;
      for (int64_t d = 0; d < dim; ++d)
        dot += ht[static_cast<size_t>(i * dim + d)] * hs[static_cast<size_t>(k * dim + d)];
      denom += std::exp(dot / tau);
    }
    total += -std::log(std::exp(pos / tau) / denom);
  }
  return total / static_cast<real>(n);
}

}  // namespace testutil
