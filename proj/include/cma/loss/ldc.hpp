#pragma once

// Lagrange Duality Consistency loss: the weighted BCE-Dice consistency
// objective, a KKT projection of predictions onto box + sum-cap constraints,
// and the L2 ball projection for the parameter-norm constraint.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cma/core/ops.hpp"
#include "cma/core/tensor.hpp"

namespace cma::loss {

struct LdcParams {
  real alpha = 1.0;
  real beta1 = 0.314;
  real beta2 = 0.685;
  real eps = 1e-7;

  void validate() const {
    CMA_CHECK_CFG(alpha > 0.0, "alpha must be positive");
    CMA_CHECK_CFG(beta1 >= 0.0 && beta2 >= 0.0, "dice weights must be nonnegative");
    CMA_CHECK_CFG(eps > 0.0 && eps < 0.5, "probability clamp eps must be in (0, 0.5)");
  }
};

// Box bounds (size 1 => shared by all elements), a cap on the element sum,
// and the cap on the squared parameter norm.
struct ConstraintSet {
  std::vector<real> lower{0.0};
  std::vector<real> upper{1.0};
  real sum_cap = 1.0;
  real weight_norm_cap = 1e4;

  void validate(int64_t n) const {
    CMA_CHECK_CFG(sum_cap > 0.0, "sum cap S must be positive");
    CMA_CHECK_CFG(weight_norm_cap > 0.0, "weight norm cap C must be positive");
    CMA_CHECK_CFG(lower.size() == 1 || static_cast<int64_t>(lower.size()) == n, "lower bound size mismatch");
    CMA_CHECK_CFG(upper.size() == 1 || static_cast<int64_t>(upper.size()) == n, "upper bound size mismatch");
    for (size_t i = 0; i < std::max(lower.size(), upper.size()); ++i) {
      const real l = lower[lower.size() == 1 ? 0 : i];
      const real u = upper[upper.size() == 1 ? 0 : i];
      CMA_CHECK_CFG(l >= 0.0, "lower bound must be nonnegative, got " << l);
      CMA_CHECK_CFG(l <= u, "lower bound " << l << " exceeds upper bound " << u);
    }
  }

  real lo(int64_t i) const { return lower[lower.size() == 1 ? 0 : static_cast<size_t>(i)]; }
  real hi(int64_t i) const { return upper[upper.size() == 1 ? 0 : static_cast<size_t>(i)]; }
};

// Multipliers recovered from the active constraints of the projection,
// together with the projected point.
struct DualSolution {
  std::vector<real> p_star;
  std::vector<real> mu_plus;   // upper-bound multipliers
  std::vector<real> mu_minus;  // lower-bound multipliers (l_i > 0)
  std::vector<real> zeta;      // nonnegativity multipliers (l_i == 0)
  real lambda = 0.0;           // sum-cap multiplier
  real eta = 0.0;              // parameter-ball multiplier; handled separately

  real max_stationarity_residual = 0.0;
  real max_feasibility_residual = 0.0;
  real max_slackness_residual = 0.0;
};

namespace detail {

// clip(p - shift, l, u) summed over elements.
inline real shifted_clip_sum(const std::vector<real>& p, const ConstraintSet& c, real shift,
                             std::vector<real>* out = nullptr) {
  real acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const real v = std::min(std::max(p[i] - shift, c.lo(static_cast<int64_t>(i))), c.hi(static_cast<int64_t>(i)));
    if (out) (*out)[i] = v;
    acc += v;
  }
  return acc;
}

}  // namespace detail

// Euclidean projection of p onto { q : l <= q <= u, sum(q) <= S } via the
// shifted clip q_i = clip(p_i - lambda, l_i, u_i); lambda = 0 when the clip
// already satisfies the cap, otherwise found by monotone bisection.
inline DualSolution project_kkt(const std::vector<real>& p, const ConstraintSet& c) {
  const int64_t n = static_cast<int64_t>(p.size());
  CMA_CHECK_INPUT(n >= 1, "cannot project an empty vector");
  c.validate(n);

  real sum_lo = 0.0;
  for (int64_t i = 0; i < n; ++i) sum_lo += std::max(c.lo(i), 0.0);
  CMA_CHECK(sum_lo <= c.sum_cap + 1e-12, InfeasibilityError,
            "sum of lower bounds " << sum_lo << " exceeds sum cap " << c.sum_cap);

  DualSolution sol;
  sol.p_star.assign(p.size(), 0.0);
  sol.mu_plus.assign(p.size(), 0.0);
  sol.mu_minus.assign(p.size(), 0.0);
  sol.zeta.assign(p.size(), 0.0);

  real lambda = 0.0;
  if (detail::shifted_clip_sum(p, c, 0.0, &sol.p_star) > c.sum_cap) {
    real lo = 0.0, hi = 0.0;
    for (int64_t i = 0; i < n; ++i) hi = std::max(hi, p[static_cast<size_t>(i)] - c.lo(i));
    for (int iter = 0; iter < 200; ++iter) {
      const real mid = 0.5 * (lo + hi);
      if (detail::shifted_clip_sum(p, c, mid) > c.sum_cap)
        lo = mid;
      else
        hi = mid;
    }
    lambda = hi;
    detail::shifted_clip_sum(p, c, lambda, &sol.p_star);
  }
  sol.lambda = lambda;

  real sum_p = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const real shifted = p[static_cast<size_t>(i)] - lambda;
    const real l = c.lo(i), u = c.hi(i);
    if (shifted >= u) {
      sol.mu_plus[static_cast<size_t>(i)] = shifted - u;
    } else if (shifted <= l) {
      const real deficit = l - shifted;
      if (l == 0.0)
        sol.zeta[static_cast<size_t>(i)] = deficit;
      else
        sol.mu_minus[static_cast<size_t>(i)] = deficit;
    }
    sum_p += sol.p_star[static_cast<size_t>(i)];

    // stationarity: (q - p) + lambda + mu_plus - mu_minus - zeta = 0
    const real st = (sol.p_star[static_cast<size_t>(i)] - p[static_cast<size_t>(i)]) + lambda +
                    sol.mu_plus[static_cast<size_t>(i)] - sol.mu_minus[static_cast<size_t>(i)] -
                    sol.zeta[static_cast<size_t>(i)];
    sol.max_stationarity_residual = std::max(sol.max_stationarity_residual, std::abs(st));
    sol.max_feasibility_residual = std::max(
        sol.max_feasibility_residual,
        std::max(l - sol.p_star[static_cast<size_t>(i)], sol.p_star[static_cast<size_t>(i)] - u));
    // box complementary slackness
    sol.max_slackness_residual =
        std::max(sol.max_slackness_residual,
                 std::abs(sol.mu_plus[static_cast<size_t>(i)] * (sol.p_star[static_cast<size_t>(i)] - u)));
    sol.max_slackness_residual =
        std::max(sol.max_slackness_residual,
                 std::abs(sol.mu_minus[static_cast<size_t>(i)] * (l - sol.p_star[static_cast<size_t>(i)])));
    sol.max_slackness_residual = std::max(
        sol.max_slackness_residual, std::abs(sol.zeta[static_cast<size_t>(i)] * sol.p_star[static_cast<size_t>(i)]));
  }
  sol.max_feasibility_residual = std::max(sol.max_feasibility_residual, sum_p - c.sum_cap);
  sol.max_slackness_residual = std::max(sol.max_slackness_residual, std::abs(lambda * (sum_p - c.sum_cap)));
  return sol;
}

// w scaled onto the ball of squared norm <= cap; direction preserved.
inline std::vector<real> project_weights_l2ball(const std::vector<real>& w, real cap) {
  CMA_CHECK_CFG(cap > 0.0, "norm cap must be positive");
  real sq = 0.0;
  for (real v : w) sq += v * v;
  if (sq <= cap) return w;
  const real scale = std::sqrt(cap / sq);
  std::vector<real> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) out[i] = w[i] * scale;
  return out;
}

// In-place variant over a list of parameter spans (the model's weight vector
// is the concatenation); returns the scale that was applied.
inline real project_weights_l2ball_inplace(const std::vector<std::pair<real*, int64_t>>& spans, real cap) {
  CMA_CHECK_CFG(cap > 0.0, "norm cap must be positive");
  real sq = 0.0;
  for (const auto& [ptr, len] : spans)
    for (int64_t i = 0; i < len; ++i) sq += ptr[i] * ptr[i];
  if (sq <= cap) return 1.0;
  const real scale = std::sqrt(cap / sq);
  for (const auto& [ptr, len] : spans)
    for (int64_t i = 0; i < len; ++i) ptr[i] *= scale;
  return scale;
}

// Autograd-visible batched projection: rows of `p` [R, L] projected
// independently with per-row sum caps. Gradient passes through the clip as
// its piecewise-linear subgradient; lambda is treated as a constant.
inline Tensor kkt_project_rows(const Tensor& p, const ConstraintSet& c, const std::vector<real>& row_caps) {
  CMA_CHECK_SHAPE(p.ndim() == 2, "kkt_project_rows expects [rows, len]");
  const int64_t rows = p.dim(0), len = p.dim(1);
  CMA_CHECK_INPUT(static_cast<int64_t>(row_caps.size()) == rows, "one sum cap per row required");
  auto mask = std::make_shared<std::vector<real>>(static_cast<size_t>(p.numel()), 0.0);
  Tensor out = Tensor::zeros(p.shape());

  std::vector<real> row(static_cast<size_t>(len));
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(p.data() + r * len, len, row.begin());
    ConstraintSet cr = c;
    cr.sum_cap = row_caps[static_cast<size_t>(r)];
    DualSolution sol = project_kkt(row, cr);
    for (int64_t i = 0; i < len; ++i) {
      out.data()[r * len + i] = sol.p_star[static_cast<size_t>(i)];
      const real shifted = row[static_cast<size_t>(i)] - sol.lambda;
      const bool interior = shifted > cr.lo(i) && shifted < cr.hi(i);
      (*mask)[static_cast<size_t>(r * len + i)] = interior ? 1.0 : 0.0;
    }
  }

  if (autograd_enabled() && p.requires_grad()) {
    auto pp = p.node();
    out.node()->requires_grad = true;
    out.node()->parents = {pp};
    out.node()->backward = [pp, mask](TensorNode& self) {
      pp->ensure_grad();
      const real* g = self.grad.data();
      const real* m = mask->data();
      real* gp = pp->grad.data();
      const int64_t n = self.numel();
      for (int64_t i = 0; i < n; ++i) gp[i] += g[i] * m[i];
    };
  }
  return out;
}

// Eq-style weighted BCE-Dice consistency loss over two class channels.
// All four tensors share one shape; the BCE term sums both channels.
inline Tensor consistency_loss(const Tensor& p1, const Tensor& p2, const Tensor& y1, const Tensor& y2,
                               const LdcParams& prm) {
  prm.validate();
  CMA_CHECK_INPUT(p1.shape() == p2.shape() && p1.shape() == y1.shape() && p1.shape() == y2.shape(),
                  "consistency_loss operands must share a shape");
  for (const Tensor* t : {&p1, &p2, &y1, &y2})
    for (real v : t->vec())
      CMA_CHECK_INPUT(v >= -1e-12 && v <= 1.0 + 1e-12, "probability " << v << " outside [0,1]");

  Tensor pc1 = clamp(p1, prm.eps, 1.0 - prm.eps);
  Tensor pc2 = clamp(p2, prm.eps, 1.0 - prm.eps);
  Tensor bce = add(mul(y1, log(pc1)), mul(y2, log(pc2)));
  Tensor dice1 = div(mul(y1, pc1), add(y1, pc1));
  Tensor dice2 = div(mul(y2, pc2), add(y2, pc2));
  Tensor per_elem = add(mul_scalar(bce, prm.alpha),
                        add(mul_scalar(dice1, prm.beta1), mul_scalar(dice2, prm.beta2)));
  return neg(mean_all(per_elem));
}

struct LdcKnobs {
  real s_factor = 1.05;  // sum cap = s_factor * teacher foreground mass per image
  ConstraintSet constraints;
};

struct LdcResult {
  Tensor loss;
  Tensor projected1, projected2;  // student channels after projection
  std::vector<real> sum_caps;
};

// Student probabilities pass through the KKT projection per image and per
// foreground class; the consistency loss is then evaluated against the
// teacher's (detached) probabilities.
inline LdcResult ldc_loss(const Tensor& student_probs, const Tensor& teacher_probs, const LdcKnobs& knobs,
                          const LdcParams& prm) {
  CMA_CHECK_SHAPE(student_probs.ndim() == 4 && teacher_probs.ndim() == 4,
                  "ldc_loss expects [B,C,H,W] probabilities");
  CMA_CHECK_SHAPE(student_probs.shape() == teacher_probs.shape(), "student/teacher shape mismatch");
  CMA_CHECK_SHAPE(student_probs.dim(1) >= 3, "ldc_loss needs two foreground channels (classes 1 and 2)");
  const int64_t b = student_probs.dim(0);
  const int64_t hw = student_probs.dim(2) * student_probs.dim(3);

  Tensor s1 = reshape(narrow(student_probs, 1, 1, 1), {b, hw});
  Tensor s2 = reshape(narrow(student_probs, 1, 2, 1), {b, hw});
  Tensor t1 = reshape(narrow(teacher_probs, 1, 1, 1), {b, hw}).detach();
  Tensor t2 = reshape(narrow(teacher_probs, 1, 2, 1), {b, hw}).detach();

  LdcResult res;
  res.sum_caps.reserve(static_cast<size_t>(2 * b));
  auto caps_for = [&](const Tensor& teacher_ch) {
    std::vector<real> caps(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
      real mass = 0.0;
      const real* row = teacher_ch.data() + i * hw;
      for (int64_t j = 0; j < hw; ++j) mass += row[j];
      caps[static_cast<size_t>(i)] = std::max(knobs.s_factor * mass, 1e-6);
    }
    return caps;
  };
  std::vector<real> caps1 = caps_for(t1);
  std::vector<real> caps2 = caps_for(t2);
  res.sum_caps.insert(res.sum_caps.end(), caps1.begin(), caps1.end());
  res.sum_caps.insert(res.sum_caps.end(), caps2.begin(), caps2.end());

  res.projected1 = kkt_project_rows(s1, knobs.constraints, caps1);
  res.projected2 = kkt_project_rows(s2, knobs.constraints, caps2);
  res.loss = consistency_loss(reshape(res.projected1, {b * hw}), reshape(res.projected2, {b * hw}),
                              reshape(t1, {b * hw}), reshape(t2, {b * hw}), prm);
  return res;
}

}  // namespace cma::loss
