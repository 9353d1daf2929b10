#pragma once

// Dense double tensors with dynamic reverse-mode autodiff. Contiguous
// row-major storage only; views are materialized. The graph is a DAG of
// shared_ptr nodes, freed when the last root goes out of scope.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cma/core/common.hpp"
#include "cma/core/rng.hpp"

namespace cma {

using real = double;
using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<real>> value;
  std::vector<real> grad;  // sized lazily by ensure_grad()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  int64_t numel() const { return static_cast<int64_t>(value->size()); }

  void ensure_grad() {
    if (grad.size() != value->size()) grad.assign(value->size(), 0.0);
  }
};

// Ops consult this to skip graph construction (teacher forward, eval loops).
inline bool& autograd_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(autograd_enabled()) { autograd_enabled() = false; }
  ~NoGradGuard() { autograd_enabled() = prev; }
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, real v) {
    auto n = std::make_shared<TensorNode>();
    const int64_t count = numel_of(shape);
    CMA_CHECK_SHAPE(count >= 0, "negative element count for shape " << shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<real>>(static_cast<size_t>(count), v);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<real> data) {
    CMA_CHECK_SHAPE(numel_of(shape) == static_cast<int64_t>(data.size()),
                    "data size " << data.size() << " does not match shape " << shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<real>>(std::move(data));
    return Tensor(std::move(n));
  }

  static Tensor scalar(real v) { return full({}, v); }

  static Tensor randn(Shape shape, Rng& rng, real stddev = 1.0, real mean = 0.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.vec()) x = rng.normal(mean, stddev);
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, real lo, real hi) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.vec()) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  int64_t dim(int i) const {
    const int nd = ndim();
    if (i < 0) i += nd;
    CMA_CHECK_SHAPE(i >= 0 && i < nd, "dim index " << i << " out of range for " << shape_str(shape()));
    return n_->shape[static_cast<size_t>(i)];
  }

  int64_t numel() const { return n_->numel(); }

  real* data() { return n_->value->data(); }
  const real* data() const { return n_->value->data(); }
  std::vector<real>& vec() { return *n_->value; }
  const std::vector<real>& vec() const { return *n_->value; }

  real item() const {
    CMA_CHECK_SHAPE(numel() == 1, "item() on tensor of shape " << shape_str(shape()));
    return (*n_->value)[0];
  }

  bool requires_grad() const { return n_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    if (v) n_->ensure_grad();
    return *this;
  }

  const std::vector<real>& grad() const {
    CMA_CHECK(n_->grad.size() == n_->value->size(), Error, "grad not populated; call backward() first");
    return n_->grad;
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // Shares the value buffer, drops the graph.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(std::move(n));
  }

  Tensor clone() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = n_->shape;
    n->value = std::make_shared<std::vector<real>>(*n_->value);
    return Tensor(std::move(n));
  }

  void backward() {
    CMA_CHECK(numel() == 1, Error, "backward() requires a scalar root, got " << shape_str(shape()));
    CMA_CHECK(n_->requires_grad, Error, "backward() on a tensor that does not require grad");
    std::vector<TensorNode*> order = topo_order();
    n_->ensure_grad();
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* node = *it;
      if (node->backward) node->backward(*node);
    }
  }

  const std::shared_ptr<TensorNode>& node() const { return n_; }

private:
  std::vector<TensorNode*> topo_order() const {
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
      TensorNode* n;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        TensorNode* p = f.n->parents[f.next_parent++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<TensorNode> n_;
};

namespace detail {

// Allocates the output node of an op; parents/backward attached only when the
// graph is live.
inline Tensor make_result(Shape shape, const std::vector<Tensor>& inputs,
                          std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  const int64_t count = numel_of(shape);
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<real>>(static_cast<size_t>(count), 0.0);
  bool needs = false;
  if (autograd_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline void accumulate(const std::shared_ptr<TensorNode>& target, const real* g, int64_t count) {
  if (!target->requires_grad) return;
  target->ensure_grad();
  real* dst = target->grad.data();
  for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
}

}  // namespace detail

}  // namespace cma
