#pragma once

// Minimal module system: parameter/buffer registries with deterministic
// ordering, plus the handful of layers the model needs.

#include <string>
#include <utility>
#include <vector>

#include "cma/core/conv.hpp"
#include "cma/core/ops.hpp"
#include "cma/core/tensor.hpp"

namespace cma::nn {

class Module {
public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void register_parameter(const std::string& name, Tensor& t) {
    t.set_requires_grad(true);
    params_.emplace_back(name, &t);
  }

  void register_buffer(const std::string& name, Tensor& t) { buffers_.emplace_back(name, &t); }

  void register_module(const std::string& name, Module& m) { children_.emplace_back(name, &m); }

  // Slash-joined names in registration order.
  void named_parameters(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix = "") const {
    for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
    for (const auto& [name, m] : children_) m->named_parameters(out, prefix + name + "/");
  }

  void named_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix = "") const {
    for (const auto& [name, t] : buffers_) out.emplace_back(prefix + name, t);
    for (const auto& [name, m] : children_) m->named_buffers(out, prefix + name + "/");
  }

  std::vector<std::pair<std::string, Tensor*>> parameters() const {
    std::vector<std::pair<std::string, Tensor*>> out;
    named_parameters(out);
    return out;
  }

  // Parameters followed by buffers; the full mutable state of the module.
  std::vector<std::pair<std::string, Tensor*>> state() const {
    std::vector<std::pair<std::string, Tensor*>> out;
    named_parameters(out);
    named_buffers(out);
    return out;
  }

  void set_training(bool v) {
    training_ = v;
    for (auto& [name, m] : children_) m->set_training(v);
  }

  bool training() const { return training_; }

  void zero_grad() {
    for (auto& [name, t] : parameters()) t->zero_grad();
  }

  void set_requires_grad(bool v) {
    for (auto& [name, t] : parameters()) t->set_requires_grad(v);
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t->numel();
    return n;
  }

private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

inline Tensor xavier_uniform(Shape shape, Rng& rng, int64_t fan_in, int64_t fan_out) {
  const real limit = std::sqrt(6.0 / static_cast<real>(fan_in + fan_out));
  return Tensor::rand_uniform(std::move(shape), rng, -limit, limit);
}

class Linear : public Module {
public:
  Linear(int64_t in, int64_t out, Rng& rng, bool bias = true) : in_(in), out_(out) {
    weight = xavier_uniform({in, out}, rng, in, out);
    register_parameter("weight", weight);
    if (bias) {
      this->bias = Tensor::zeros({out});
      register_parameter("bias", this->bias);
    }
  }

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

  Tensor weight;
  Tensor bias;  // undefined when bias=false

private:
  int64_t in_, out_;
};

class Conv2d : public Module {
public:
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, Rng& rng, Conv2dSpec spec = {}, bool bias = true)
      : spec_(spec) {
    const int64_t fan_in = in_ch * kernel * kernel;
    weight = Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, std::sqrt(2.0 / static_cast<real>(fan_in)));
    register_parameter("weight", weight);
    if (bias) {
      this->bias = Tensor::zeros({out_ch});
      register_parameter("bias", this->bias);
    }
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, spec_); }

  const Conv2dSpec& spec() const { return spec_; }

  Tensor weight;
  Tensor bias;

private:
  Conv2dSpec spec_;
};

class BatchNorm2d : public Module {
public:
  explicit BatchNorm2d(int64_t channels, real momentum = 0.1, real eps = 1e-5)
      : momentum_(momentum), eps_(eps) {
    gamma = Tensor::full({channels}, 1.0);
    beta = Tensor::zeros({channels});
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
    register_parameter("gamma", gamma);
    register_parameter("beta", beta);
    register_buffer("running_mean", running_mean);
    register_buffer("running_var", running_var);
  }

  Tensor forward(const Tensor& x) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training(), momentum_, eps_);
  }

  Tensor gamma, beta, running_mean, running_var;

private:
  real momentum_, eps_;
};

class LayerNorm : public Module {
public:
  explicit LayerNorm(int64_t width, real eps = 1e-5) : eps_(eps) {
    gamma = Tensor::full({width}, 1.0);
    beta = Tensor::zeros({width});
    register_parameter("gamma", gamma);
    register_parameter("beta", beta);
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps_); }

  Tensor gamma, beta;

private:
  real eps_;
};

}  // namespace cma::nn
