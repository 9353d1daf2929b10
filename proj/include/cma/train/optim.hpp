#pragma once

// SGD with momentum and weight decay, the poly learning-rate schedule, the
// EMA teacher update, and the consistency-weight ramp.

#include <cmath>
#include <utility>
#include <vector>

#include "cma/core/common.hpp"
#include "cma/core/tensor.hpp"

namespace cma::train {

// base_lr * (1 - step/max_steps)^power, clamped to 0 past max_steps.
inline real poly_lr(int64_t step, int64_t max_steps, real base_lr, real power = 0.9) {
  CMA_CHECK_INPUT(step >= 0 && max_steps >= 1, "poly_lr needs step >= 0 and max_steps >= 1");
  CMA_CHECK_CFG(power > 0.0, "poly power must be positive");
  if (step >= max_steps) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<real>(step) / static_cast<real>(max_steps), power);
}

// Standard mean-teacher ramp, ~0 at x=0 and exactly 1 at x=1.
inline real sigmoid_rampup(int64_t step, int64_t ramp_steps) {
  if (ramp_steps <= 0 || step >= ramp_steps) return 1.0;
  const real x = 1.0 - static_cast<real>(step) / static_cast<real>(ramp_steps);
  return std::exp(-5.0 * x * x);
}

struct SgdConfig {
  real lr = 1e-3;
  real momentum = 0.99;
  real weight_decay = 3e-5;

  void validate() const {
    CMA_CHECK_CFG(lr > 0.0, "learning rate must be positive");
    CMA_CHECK_CFG(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0,1)");
    CMA_CHECK_CFG(weight_decay >= 0.0, "weight decay must be nonnegative");
  }
};

// buf = momentum * buf + (grad + wd * param); param -= lr * buf
class SgdMomentum {
public:
  SgdMomentum(std::vector<std::pair<std::string, Tensor*>> params, SgdConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    buffers_.reserve(params_.size());
    for (auto& [name, t] : params_) buffers_.emplace_back(t->numel(), 0.0);
  }

  void step(real lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i].second;
      const auto& g = p->grad();
      auto& buf = buffers_[i];
      real* v = p->data();
      for (size_t j = 0; j < buf.size(); ++j) {
        buf[j] = cfg_.momentum * buf[j] + (g[j] + cfg_.weight_decay * v[j]);
        v[j] -= lr * buf[j];
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t->zero_grad();
  }

  const SgdConfig& config() const { return cfg_; }
  std::vector<std::vector<real>>& buffers() { return buffers_; }
  const std::vector<std::pair<std::string, Tensor*>>& params() const { return params_; }

private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::vector<real>> buffers_;
  SgdConfig cfg_;
};

// teacher <- decay * teacher + (1 - decay) * student, elementwise over the
// full state (parameters and running statistics alike).
inline void ema_update(const std::vector<std::pair<std::string, Tensor*>>& teacher,
                       const std::vector<std::pair<std::string, Tensor*>>& student, real decay) {
  CMA_CHECK_INPUT(decay >= 0.0 && decay <= 1.0, "ema decay must be in [0,1]");
  CMA_CHECK_SHAPE(teacher.size() == student.size(), "teacher/student state size mismatch");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Tensor* t = teacher[i].second;
    const Tensor* s = student[i].second;
    CMA_CHECK_SHAPE(t->numel() == s->numel(),
                    "state entry " << teacher[i].first << " shape mismatch in ema_update");
    real* tv = t->data();
    const real* sv = s->data();
    for (int64_t j = 0; j < t->numel(); ++j) tv[j] = decay * tv[j] + (1.0 - decay) * sv[j];
  }
}

inline void copy_state(const std::vector<std::pair<std::string, Tensor*>>& dst,
                       const std::vector<std::pair<std::string, Tensor*>>& src) {
  ema_update(dst, src, 0.0);
}

}  // namespace cma::train
