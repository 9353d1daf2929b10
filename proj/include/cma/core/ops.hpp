#pragma once

// Differentiable tensor ops. Each op fills the forward value and, when the
// graph is live, attaches a closure that pulls grad from the result node and
// accumulates into the parents.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cma/core/tensor.hpp"

namespace cma {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

namespace detail {

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

struct BcastPlan {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
  bool same_shape = false;
};

inline BcastPlan make_bcast(const Shape& a, const Shape& b) {
  BcastPlan p;
  if (a == b) {
    p.out = a;
    p.same_shape = true;
    return p;
  }
  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  p.out.assign(static_cast<size_t>(nd), 1);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  p.stride_a.assign(static_cast<size_t>(nd), 0);
  p.stride_b.assign(static_cast<size_t>(nd), 0);
  for (int d = 0; d < nd; ++d) {
    const int ia = static_cast<int>(a.size()) - nd + d;
    const int ib = static_cast<int>(b.size()) - nd + d;
    const int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
    const int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
    CMA_CHECK_SHAPE(da == db || da == 1 || db == 1,
                    "cannot broadcast " << shape_str(a) << " with " << shape_str(b));
    p.out[static_cast<size_t>(d)] = std::max(da, db);
    if (da != 1 && ia >= 0) p.stride_a[static_cast<size_t>(d)] = sa[static_cast<size_t>(ia)];
    if (db != 1 && ib >= 0) p.stride_b[static_cast<size_t>(d)] = sb[static_cast<size_t>(ib)];
  }
  return p;
}

template <class F>
inline void bcast_iterate(const BcastPlan& p, F&& f) {
  const int nd = static_cast<int>(p.out.size());
  const int64_t total = numel_of(p.out);
  if (total == 0) return;
  if (nd == 0) {
    f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t off_a = 0, off_b = 0;
  for (int64_t lin = 0;;) {
    f(lin, off_a, off_b);
    if (++lin >= total) break;
    int d = nd - 1;
    for (;;) {
      idx[static_cast<size_t>(d)]++;
      off_a += p.stride_a[static_cast<size_t>(d)];
      off_b += p.stride_b[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < p.out[static_cast<size_t>(d)]) break;
      off_a -= p.stride_a[static_cast<size_t>(d)] * p.out[static_cast<size_t>(d)];
      off_b -= p.stride_b[static_cast<size_t>(d)] * p.out[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
      --d;
    }
  }
}

enum class BinKind { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  BcastPlan plan = make_bcast(a.shape(), b.shape());
  auto pa = a.node();
  auto pb = b.node();
  auto va = a.node()->value;
  auto vb = b.node()->value;
  Tensor out = make_result(
      plan.out, {a, b}, [plan, pa, pb, va, vb, kind](TensorNode& self) {
        const real* g = self.grad.data();
        const real* da = va->data();
        const real* db = vb->data();
        const bool need_a = pa->requires_grad;
        const bool need_b = pb->requires_grad;
        if (need_a) pa->ensure_grad();
        if (need_b) pb->ensure_grad();
        real* ga = need_a ? pa->grad.data() : nullptr;
        real* gb = need_b ? pb->grad.data() : nullptr;
        auto visit = [&](int64_t lin, int64_t ia, int64_t ib) {
          const real go = g[lin];
          switch (kind) {
            case BinKind::Add:
              if (need_a) ga[ia] += go;
              if (need_b) gb[ib] += go;
              break;
            case BinKind::Sub:
              if (need_a) ga[ia] += go;
              if (need_b) gb[ib] -= go;
              break;
            case BinKind::Mul:
              if (need_a) ga[ia] += go * db[ib];
              if (need_b) gb[ib] += go * da[ia];
              break;
            case BinKind::Div: {
              const real inv = 1.0 / db[ib];
              if (need_a) ga[ia] += go * inv;
              if (need_b) gb[ib] -= go * da[ia] * inv * inv;
              break;
            }
          }
        };
        if (plan.same_shape) {
          const int64_t n = self.numel();
          for (int64_t i = 0; i < n; ++i) visit(i, i, i);
        } else {
          bcast_iterate(plan, visit);
        }
      });
  real* o = out.data();
  const real* da = va->data();
  const real* db = vb->data();
  auto apply = [&](int64_t lin, int64_t ia, int64_t ib) {
    switch (kind) {
      case BinKind::Add: o[lin] = da[ia] + db[ib]; break;
      case BinKind::Sub: o[lin] = da[ia] - db[ib]; break;
      case BinKind::Mul: o[lin] = da[ia] * db[ib]; break;
      case BinKind::Div: o[lin] = da[ia] / db[ib]; break;
    }
  };
  if (plan.same_shape) {
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) apply(i, i, i);
  } else {
    bcast_iterate(plan, apply);
  }
  return out;
}

// Unary op scaffold: forward map + backward factor as functions of (x, y).
template <class FwdF, class BwdF>
inline Tensor unary_op(const Tensor& a, FwdF&& fwd, BwdF&& dydx_from_xy) {
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = Tensor::zeros(a.shape());
  real* o = out.node()->value->data();
  const real* x = va->data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = fwd(x[i]);
  if (autograd_enabled() && a.requires_grad()) {
    auto vy = out.node()->value;
    out.node()->requires_grad = true;
    out.node()->parents = {pa};
    out.node()->backward = [pa, va, vy, dydx_from_xy](TensorNode& self) {
      pa->ensure_grad();
      real* ga = pa->grad.data();
      const real* g = self.grad.data();
      const real* x = va->data();
      const real* y = vy->data();
      const int64_t n = self.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * dydx_from_xy(x[i], y[i]);
    };
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Div); }

inline Tensor add_scalar(const Tensor& a, real c) {
  return detail::unary_op(a, [c](real x) { return x + c; }, [](real, real) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, real c) {
  return detail::unary_op(a, [c](real x) { return x * c; }, [c](real, real) { return c; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor pow_scalar(const Tensor& a, real p) {
  return detail::unary_op(
      a, [p](real x) { return std::pow(x, p); },
      [p](real x, real) { return p * std::pow(x, p - 1.0); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](real x) { return std::log(x); }, [](real x, real) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(a, [](real x) { return std::sqrt(x); },
                          [](real, real y) { return 0.5 / y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(a, [](real x) { return 1.0 / (1.0 + std::exp(-x)); },
                          [](real, real y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](real x) { return x > 0.0 ? x : 0.0; },
                          [](real x, real) { return x > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr real kInvSqrt2 = 0.70710678118654752440;
  constexpr real kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      a, [](real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](real x, real) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

// Subgradient zero outside the open interval.
inline Tensor clamp(const Tensor& a, real lo, real hi) {
  return detail::unary_op(
      a, [lo, hi](real x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](real x, real) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor detach(const Tensor& a) { return a.detach(); }

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  // -1 wildcard on at most one dim.
  int64_t known = 1;
  int wild = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      CMA_CHECK_SHAPE(wild < 0, "multiple -1 dims in reshape");
      wild = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (wild >= 0) shape[static_cast<size_t>(wild)] = a.numel() / known;
  CMA_CHECK_SHAPE(numel_of(shape) == a.numel(),
                  "reshape " << shape_str(a.shape()) << " -> " << shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = a.node()->value;  // same buffer
  if (autograd_enabled() && a.requires_grad()) {
    auto pa = a.node();
    n->requires_grad = true;
    n->parents = {pa};
    n->backward = [pa](TensorNode& self) {
      detail::accumulate(pa, self.grad.data(), self.numel());
    };
  }
  return Tensor(std::move(n));
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int nd = a.ndim();
  CMA_CHECK_SHAPE(static_cast<int>(perm.size()) == nd, "permute rank mismatch");
  Shape out_shape(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) out_shape[static_cast<size_t>(d)] = a.dim(perm[static_cast<size_t>(d)]);
  const auto in_strides = detail::contiguous_strides(a.shape());
  // stride in the input for each output dim
  std::vector<int64_t> gather_stride(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) gather_stride[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(d)])];
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = detail::make_result(out_shape, {a}, [pa, out_shape, gather_stride](TensorNode& self) {
    pa->ensure_grad();
    real* ga = pa->grad.data();
    const real* g = self.grad.data();
    const int nd = static_cast<int>(out_shape.size());
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t src = 0;
    const int64_t total = self.numel();
    for (int64_t lin = 0;;) {
      ga[src] += g[lin];
      if (++lin >= total) break;
      int d = nd - 1;
      for (;;) {
        idx[static_cast<size_t>(d)]++;
        src += gather_stride[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
        src -= gather_stride[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
        idx[static_cast<size_t>(d)] = 0;
        --d;
      }
    }
  });
  real* o = out.data();
  const real* x = va->data();
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t src = 0;
  const int64_t total = out.numel();
  for (int64_t lin = 0;;) {
    o[lin] = x[src];
    if (++lin >= total) break;
    int d = nd - 1;
    for (;;) {
      idx[static_cast<size_t>(d)]++;
      src += gather_stride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src -= gather_stride[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
      --d;
    }
  }
  return out;
}

inline Tensor narrow(const Tensor& a, int dim, int64_t start, int64_t len) {
  const int nd = a.ndim();
  if (dim < 0) dim += nd;
  CMA_CHECK_SHAPE(dim >= 0 && dim < nd, "narrow dim out of range");
  CMA_CHECK_SHAPE(start >= 0 && start + len <= a.dim(dim), "narrow slice out of bounds");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(dim)] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= a.dim(d);
  for (int d = dim + 1; d < nd; ++d) inner *= a.dim(d);
  const int64_t src_len = a.dim(dim);
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = detail::make_result(out_shape, {a}, [pa, outer, inner, src_len, start, len](TensorNode& self) {
    pa->ensure_grad();
    real* ga = pa->grad.data();
    const real* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len; ++j) {
        const real* gs = g + (o * len + j) * inner;
        real* gd = ga + (o * src_len + start + j) * inner;
        for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i];
      }
  });
  real* o = out.data();
  const real* x = va->data();
  for (int64_t ot = 0; ot < outer; ++ot)
    for (int64_t j = 0; j < len; ++j)
      std::copy_n(x + (ot * src_len + start + j) * inner, inner, o + (ot * len + j) * inner);
  return out;
}

inline Tensor concat(const std::vector<Tensor>& xs, int dim) {
  CMA_CHECK_SHAPE(!xs.empty(), "concat of empty list");
  const int nd = xs[0].ndim();
  if (dim < 0) dim += nd;
  Shape out_shape = xs[0].shape();
  int64_t total_dim = 0;
  for (const auto& t : xs) {
    CMA_CHECK_SHAPE(t.ndim() == nd, "concat rank mismatch");
    for (int d = 0; d < nd; ++d)
      CMA_CHECK_SHAPE(d == dim || t.dim(d) == out_shape[static_cast<size_t>(d)], "concat shape mismatch");
    total_dim += t.dim(dim);
  }
  out_shape[static_cast<size_t>(dim)] = total_dim;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = dim + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<int64_t> lens;
  for (const auto& t : xs) {
    parents.push_back(t.node());
    lens.push_back(t.dim(dim));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = out_shape;
  n->value = std::make_shared<std::vector<real>>(static_cast<size_t>(numel_of(out_shape)), 0.0);
  bool needs = false;
  if (autograd_enabled())
    for (const auto& t : xs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents = parents;
    n->backward = [parents, lens, outer, inner, total_dim](TensorNode& self) {
      const real* g = self.grad.data();
      int64_t offset = 0;
      for (size_t k = 0; k < parents.size(); ++k) {
        auto& p = parents[k];
        const int64_t len = lens[k];
        if (p->requires_grad) {
          p->ensure_grad();
          real* gp = p->grad.data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < len; ++j) {
              const real* gs = g + (o * total_dim + offset + j) * inner;
              real* gd = gp + (o * len + j) * inner;
              for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i];
            }
        }
        offset += len;
      }
    };
  }
  Tensor out(std::move(n));
  real* o = out.data();
  int64_t offset = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const real* x = xs[k].data();
    const int64_t len = lens[k];
    for (int64_t ot = 0; ot < outer; ++ot)
      for (int64_t j = 0; j < len; ++j)
        std::copy_n(x + (ot * len + j) * inner, inner, o + (ot * total_dim + offset + j) * inner);
    offset += len;
  }
  return out;
}

inline Tensor diag2d(const Tensor& a) {
  CMA_CHECK_SHAPE(a.ndim() == 2 && a.dim(0) == a.dim(1), "diag2d needs a square matrix");
  const int64_t n = a.dim(0);
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = detail::make_result({n}, {a}, [pa, n](TensorNode& self) {
    pa->ensure_grad();
    for (int64_t i = 0; i < n; ++i) pa->grad[static_cast<size_t>(i * n + i)] += self.grad[static_cast<size_t>(i)];
  });
  for (int64_t i = 0; i < n; ++i) out.data()[i] = (*va)[static_cast<size_t>(i * n + i)];
  return out;
}

// rows of `table` gathered by integer index; scatter-add on backward.
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& idx) {
  CMA_CHECK_SHAPE(table.ndim() == 2, "gather_rows expects [rows, width]");
  const int64_t rows = table.dim(0), width = table.dim(1);
  for (int64_t i : idx) CMA_CHECK_SHAPE(i >= 0 && i < rows, "gather_rows index " << i << " out of range");
  const int64_t m = static_cast<int64_t>(idx.size());
  auto pt = table.node();
  auto vt = table.node()->value;
  Tensor out = detail::make_result({m, width}, {table}, [pt, idx, width](TensorNode& self) {
    pt->ensure_grad();
    real* gt = pt->grad.data();
    const real* g = self.grad.data();
    for (size_t r = 0; r < idx.size(); ++r) {
      real* dst = gt + idx[r] * width;
      const real* src = g + static_cast<int64_t>(r) * width;
      for (int64_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
  real* o = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(vt->data() + idx[r] * width, width, o + static_cast<int64_t>(r) * width);
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& a) {
  auto pa = a.node();
  Tensor out = detail::make_result({}, {a}, [pa](TensorNode& self) {
    pa->ensure_grad();
    const real g = self.grad[0];
    for (auto& v : pa->grad) v += g;
  });
  real acc = 0.0;
  for (real v : a.vec()) acc += v;
  out.data()[0] = acc;
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  const real inv = 1.0 / static_cast<real>(a.numel());
  return mul_scalar(sum_all(a), inv);
}

namespace detail {
struct DimSpan {
  int64_t outer, len, inner;
};
inline DimSpan dim_span(const Shape& s, int dim) {
  DimSpan d{1, s[static_cast<size_t>(dim)], 1};
  for (int i = 0; i < dim; ++i) d.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(dim) + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}
inline int norm_dim(int dim, int nd) {
  if (dim < 0) dim += nd;
  CMA_CHECK_SHAPE(dim >= 0 && dim < nd, "dim out of range");
  return dim;
}
}  // namespace detail

inline Tensor sum_dim(const Tensor& a, int dim, bool keepdim) {
  dim = detail::norm_dim(dim, a.ndim());
  const auto span = detail::dim_span(a.shape(), dim);
  Shape out_shape = a.shape();
  if (keepdim)
    out_shape[static_cast<size_t>(dim)] = 1;
  else
    out_shape.erase(out_shape.begin() + dim);
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = detail::make_result(out_shape, {a}, [pa, span](TensorNode& self) {
    pa->ensure_grad();
    real* ga = pa->grad.data();
    const real* g = self.grad.data();
    for (int64_t o = 0; o < span.outer; ++o)
      for (int64_t j = 0; j < span.len; ++j) {
        const real* gs = g + o * span.inner;
        real* gd = ga + (o * span.len + j) * span.inner;
        for (int64_t i = 0; i < span.inner; ++i) gd[i] += gs[i];
      }
  });
  real* o = out.data();
  const real* x = va->data();
  std::fill_n(o, out.numel(), 0.0);
  for (int64_t ot = 0; ot < span.outer; ++ot)
    for (int64_t j = 0; j < span.len; ++j) {
      const real* xs = x + (ot * span.len + j) * span.inner;
      real* od = o + ot * span.inner;
      for (int64_t i = 0; i < span.inner; ++i) od[i] += xs[i];
    }
  return out;
}

inline Tensor mean_dim(const Tensor& a, int dim, bool keepdim) {
  dim = detail::norm_dim(dim, a.ndim());
  return mul_scalar(sum_dim(a, dim, keepdim), 1.0 / static_cast<real>(a.dim(dim)));
}

// ---------------------------------------------------------------------------
// Softmax family (numerically stable along `dim`)

inline Tensor softmax(const Tensor& a, int dim) {
  dim = detail::norm_dim(dim, a.ndim());
  const auto span = detail::dim_span(a.shape(), dim);
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = Tensor::zeros(a.shape());
  real* y = out.data();
  const real* x = va->data();
  for (int64_t o = 0; o < span.outer; ++o)
    for (int64_t i = 0; i < span.inner; ++i) {
      const int64_t base = o * span.len * span.inner + i;
      real mx = -std::numeric_limits<real>::infinity();
      for (int64_t j = 0; j < span.len; ++j) mx = std::max(mx, x[base + j * span.inner]);
      real denom = 0.0;
      for (int64_t j = 0; j < span.len; ++j) {
        const real e = std::exp(x[base + j * span.inner] - mx);
        y[base + j * span.inner] = e;
        denom += e;
      }
      const real inv = 1.0 / denom;
      for (int64_t j = 0; j < span.len; ++j) y[base + j * span.inner] *= inv;
    }
  if (autograd_enabled() && a.requires_grad()) {
    auto vy = out.node()->value;
    out.node()->requires_grad = true;
    out.node()->parents = {pa};
    out.node()->backward = [pa, vy, span](TensorNode& self) {
      pa->ensure_grad();
      real* ga = pa->grad.data();
      const real* g = self.grad.data();
      const real* y = vy->data();
      for (int64_t o = 0; o < span.outer; ++o)
        for (int64_t i = 0; i < span.inner; ++i) {
          const int64_t base = o * span.len * span.inner + i;
          real dot = 0.0;
          for (int64_t j = 0; j < span.len; ++j) {
            const int64_t k = base + j * span.inner;
            dot += g[k] * y[k];
          }
          for (int64_t j = 0; j < span.len; ++j) {
            const int64_t k = base + j * span.inner;
            ga[k] += y[k] * (g[k] - dot);
          }
        }
    };
  }
  return out;
}

inline Tensor logsumexp(const Tensor& a, int dim) {
  dim = detail::norm_dim(dim, a.ndim());
  const auto span = detail::dim_span(a.shape(), dim);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + dim);
  auto pa = a.node();
  auto va = a.node()->value;
  Tensor out = detail::make_result(out_shape, {a}, [pa, va, span](TensorNode& self) {
    pa->ensure_grad();
    real* ga = pa->grad.data();
    const real* g = self.grad.data();
    const real* x = va->data();
    const real* lse = self.value->data();
    for (int64_t o = 0; o < span.outer; ++o)
      for (int64_t i = 0; i < span.inner; ++i) {
        const int64_t base = o * span.len * span.inner + i;
        const real go = g[o * span.inner + i];
        const real l = lse[o * span.inner + i];
        for (int64_t j = 0; j < span.len; ++j) {
          const int64_t k = base + j * span.inner;
          ga[k] += go * std::exp(x[k] - l);
        }
      }
  });
  real* o = out.data();
  const real* x = va->data();
  for (int64_t ot = 0; ot < span.outer; ++ot)
    for (int64_t i = 0; i < span.inner; ++i) {
      const int64_t base = ot * span.len * span.inner + i;
      real mx = -std::numeric_limits<real>::infinity();
      for (int64_t j = 0; j < span.len; ++j) mx = std::max(mx, x[base + j * span.inner]);
      real acc = 0.0;
      for (int64_t j = 0; j < span.len; ++j) acc += std::exp(x[base + j * span.inner] - mx);
      o[ot * span.inner + i] = mx + std::log(acc);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  CMA_CHECK_SHAPE(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D operands");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  CMA_CHECK_SHAPE(b.dim(0) == k,
                  "matmul inner dims differ: " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
  auto pa = a.node();
  auto pb = b.node();
  auto va = a.node()->value;
  auto vb = b.node()->value;
  Tensor out = detail::make_result({m, n}, {a, b}, [pa, pb, va, vb, m, k, n](TensorNode& self) {
    MapC G(self.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      MapM GA(pa->grad.data(), m, k);
      MapC B(vb->data(), k, n);
      GA.noalias() += G * B.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      MapM GB(pb->grad.data(), k, n);
      MapC A(va->data(), m, k);
      GB.noalias() += A.transpose() * G;
    }
  });
  MapM O(out.data(), m, n);
  MapC A(va->data(), m, k);
  MapC B(vb->data(), k, n);
  O.noalias() = A * B;
  return out;
}

inline Tensor bmm(const Tensor& a, const Tensor& b) {
  CMA_CHECK_SHAPE(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm shape mismatch: " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  auto pa = a.node();
  auto pb = b.node();
  auto va = a.node()->value;
  auto vb = b.node()->value;
  Tensor out = detail::make_result({bs, m, n}, {a, b}, [pa, pb, va, vb, bs, m, k, n](TensorNode& self) {
    for (int64_t i = 0; i < bs; ++i) {
      MapC G(self.grad.data() + i * m * n, m, n);
      if (pa->requires_grad) {
        pa->ensure_grad();
        MapM GA(pa->grad.data() + i * m * k, m, k);
        MapC B(vb->data() + i * k * n, k, n);
        GA.noalias() += G * B.transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MapM GB(pb->grad.data() + i * k * n, k, n);
        MapC A(va->data() + i * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
  for (int64_t i = 0; i < bs; ++i) {
    MapM O(out.data() + i * m * n, m, n);
    MapC A(va->data() + i * m * k, m, k);
    MapC B(vb->data() + i * k * n, k, n);
    O.noalias() = A * B;
  }
  return out;
}

// x: [..., in] -> [..., out]; bias optional (undefined Tensor to skip).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  CMA_CHECK_SHAPE(w.ndim() == 2, "linear weight must be [in, out]");
  const int64_t in = w.dim(0), outw = w.dim(1);
  CMA_CHECK_SHAPE(x.dim(-1) == in, "linear input width " << x.dim(-1) << " != weight rows " << in);
  if (bias.defined()) CMA_CHECK_SHAPE(bias.ndim() == 1 && bias.dim(0) == outw, "linear bias width mismatch");
  const int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  auto px = x.node();
  auto pw = w.node();
  auto vx = x.node()->value;
  auto vw = w.node()->value;
  std::shared_ptr<TensorNode> pbias = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> deps = bias.defined() ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};
  Tensor out = detail::make_result(out_shape, deps, [px, pw, pbias, vx, vw, rows, in, outw](TensorNode& self) {
    MapC G(self.grad.data(), rows, outw);
    if (px->requires_grad) {
      px->ensure_grad();
      MapM GX(px->grad.data(), rows, in);
      MapC W(vw->data(), in, outw);
      GX.noalias() += G * W.transpose();
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      MapM GW(pw->grad.data(), in, outw);
      MapC X(vx->data(), rows, in);
      GW.noalias() += X.transpose() * G;
    }
    if (pbias && pbias->requires_grad) {
      pbias->ensure_grad();
      Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, 1>> GB(pbias->grad.data(), outw);
      GB.noalias() += G.colwise().sum().transpose();
    }
  });
  MapM O(out.data(), rows, outw);
  MapC X(vx->data(), rows, in);
  MapC W(vw->data(), in, outw);
  O.noalias() = X * W;
  if (bias.defined()) O.rowwise() += Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>>(bias.data(), outw);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

// Layer norm over the last dim with affine params gamma/beta of shape [C].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5) {
  const int64_t c = x.dim(-1);
  CMA_CHECK_SHAPE(gamma.numel() == c && beta.numel() == c, "layer_norm affine width mismatch");
  const int64_t rows = x.numel() / c;
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto vx = x.node()->value;
  auto vg = gamma.node()->value;
  // Cache normalized values and inverse stddev for backward.
  auto xhat = std::make_shared<std::vector<real>>(static_cast<size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<real>>(static_cast<size_t>(rows));
  Tensor out = detail::make_result(x.shape(), {x, gamma, beta}, [px, pg, pb, vg, xhat, invstd, rows, c](TensorNode& self) {
    const real* g = self.grad.data();
    const real* gm = vg->data();
    const real* xh = xhat->data();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    if (px->requires_grad) px->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const real* gr = g + r * c;
      const real* xr = xh + r * c;
      if (pg->requires_grad || pb->requires_grad) {
        for (int64_t j = 0; j < c; ++j) {
          if (pg->requires_grad) pg->grad[static_cast<size_t>(j)] += gr[j] * xr[j];
          if (pb->requires_grad) pb->grad[static_cast<size_t>(j)] += gr[j];
        }
      }
      if (px->requires_grad) {
        real mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          const real dxh = gr[j] * gm[j];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xr[j];
        }
        mean_dxhat /= static_cast<real>(c);
        mean_dxhat_xhat /= static_cast<real>(c);
        real* gx = px->grad.data() + r * c;
        const real istd = (*invstd)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < c; ++j) {
          const real dxh = gr[j] * gm[j];
          gx[j] += istd * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
      }
    }
  });
  real* o = out.data();
  const real* xp = vx->data();
  const real* gm = vg->data();
  const real* bt = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = xp + r * c;
    real mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<real>(c);
    real var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const real d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<real>(c);
    const real istd = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(r)] = istd;
    real* xh = xhat->data() + r * c;
    real* orow = o + r * c;
    for (int64_t j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mean) * istd;
      orow[j] = xh[j] * gm[j] + bt[j];
    }
  }
  return out;
}

// Inverted dropout; identity when rate == 0.
inline Tensor dropout(const Tensor& x, real rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  CMA_CHECK_CFG(rate < 1.0, "dropout rate must be < 1");
  auto mask = std::make_shared<std::vector<real>>(static_cast<size_t>(x.numel()));
  const real scale = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = rng.uniform() >= rate ? scale : 0.0;
  auto px = x.node();
  auto vx = x.node()->value;
  Tensor out = detail::make_result(x.shape(), {x}, [px, mask](TensorNode& self) {
    px->ensure_grad();
    const real* g = self.grad.data();
    const real* m = mask->data();
    real* gx = px->grad.data();
    const int64_t n = self.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * m[i];
  });
  real* o = out.data();
  const real* xp = vx->data();
  const real* m = mask->data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = xp[i] * m[i];
  return out;
}

// ---------------------------------------------------------------------------
// Small conveniences used by losses

inline Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

inline Tensor l2_normalize_rows(const Tensor& x, real eps = 1e-12) {
  Tensor sq = sum_dim(mul(x, x), -1, /*keepdim=*/true);
  return div(x, sqrt(add_scalar(sq, eps)));
}

inline bool all_finite(const Tensor& t) {
  for (real v : t.vec())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace cma
