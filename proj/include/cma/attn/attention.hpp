#pragma once

// The four attention mechanisms the network composes: multi-head
// self-attention with an optional relative-position bias, SE-style channel
// gating, cross-attention between feature maps, and multi-rate dilated
// spatial attention.

#include <cmath>
#include <optional>
#include <vector>

#include "cma/core/nn.hpp"

namespace cma::attn {

using nn::Conv2d;
using nn::Linear;
using nn::Module;

struct AttentionConfig {
  int64_t dim = 0;
  int64_t heads = 1;
  real dropout_rate = 0.0;

  int64_t d_k() const { return dim / heads; }

  void validate() const {
    CMA_CHECK_CFG(dim >= 1, "attention dim must be positive, got " << dim);
    CMA_CHECK_CFG(heads >= 1, "attention heads must be positive, got " << heads);
    CMA_CHECK_CFG(dim % heads == 0, "heads " << heads << " must divide dim " << dim);
    CMA_CHECK_CFG(d_k() >= 1, "per-head width must be >= 1");
    CMA_CHECK_CFG(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout must be in [0,1)");
  }
};

// Learnable per-head bias indexed by the relative (row, col) offset between
// tokens on a square grid; added to the attention logits pre-softmax.
class RelPosBias : public Module {
public:
  RelPosBias(int64_t grid_size, int64_t heads) : grid_(grid_size), heads_(heads) {
    CMA_CHECK_CFG(grid_size >= 1, "grid_size must be >= 1");
    const int64_t span = 2 * grid_size - 1;
    table = Tensor::zeros({span * span, heads});
    register_parameter("table", table);
    const int64_t t = grid_ * grid_;
    index_.reserve(static_cast<size_t>(t * t));
    for (int64_t a = 0; a < t; ++a) {
      const int64_t ra = a / grid_, ca = a % grid_;
      for (int64_t b = 0; b < t; ++b) {
        const int64_t rb = b / grid_, cb = b % grid_;
        index_.push_back((ra - rb + grid_ - 1) * span + (ca - cb + grid_ - 1));
      }
    }
  }

  int64_t grid_size() const { return grid_; }
  int64_t tokens() const { return grid_ * grid_; }

  // [heads, T, T]
  Tensor expand() const {
    const int64_t t = tokens();
    Tensor rows = gather_rows(table, index_);        // [T*T, heads]
    return permute(reshape(rows, {t, t, heads_}), {2, 0, 1});
  }

  Tensor table;

private:
  int64_t grid_, heads_;
  std::vector<int64_t> index_;
};

namespace detail {
// [B,T,C] -> [B*heads, T, d_k]
inline Tensor split_heads(const Tensor& x, int64_t heads) {
  const int64_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
  return reshape(permute(reshape(x, {b, t, heads, c / heads}), {0, 2, 1, 3}), {b * heads, t, c / heads});
}

// [B*heads, T, d_k] -> [B,T,C]
inline Tensor merge_heads(const Tensor& x, int64_t batch, int64_t heads) {
  const int64_t t = x.dim(1), dk = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, t, dk}), {0, 2, 1, 3}), {batch, t, heads * dk});
}
}  // namespace detail

// Pre-softmax attention logits Q K^T / sqrt(d_k) for per-head operands
// [BH, T, d_k]; exposed separately so the scaling contract is testable.
inline Tensor scaled_qk_logits(const Tensor& q, const Tensor& k) {
  const int64_t dk = q.dim(2);
  Tensor kt = permute(k, {0, 2, 1});
  return mul_scalar(bmm(q, kt), 1.0 / std::sqrt(static_cast<real>(dk)));
}

struct MsaTrace {
  Tensor logits;   // [B, heads, Tq, Tk], bias included
  Tensor weights;  // softmax of logits
};

// softmax(Q K^T / sqrt(d_k) + P) V with learned input/output projections.
class MultiHeadSelfAttention : public Module {
public:
  MultiHeadSelfAttention(const AttentionConfig& cfg, Rng& rng)
      : cfg_(cfg),
        proj_q(cfg.dim, cfg.dim, rng),
        proj_k(cfg.dim, cfg.dim, rng),
        proj_v(cfg.dim, cfg.dim, rng),
        proj_out(cfg.dim, cfg.dim, rng) {
    cfg.validate();
    register_module("proj_q", proj_q);
    register_module("proj_k", proj_k);
    register_module("proj_v", proj_v);
    register_module("proj_out", proj_out);
  }

  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v, const RelPosBias* bias = nullptr,
                 MsaTrace* trace = nullptr, Rng* dropout_rng = nullptr) {
    CMA_CHECK_SHAPE(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
                    "attention operands must be [B, tokens, dim]");
    CMA_CHECK_SHAPE(q.dim(0) == k.dim(0) && q.dim(0) == v.dim(0), "attention batch mismatch");
    CMA_CHECK_SHAPE(k.dim(1) == v.dim(1), "key/value token counts differ");
    CMA_CHECK_CFG(q.dim(2) == cfg_.dim && k.dim(2) == cfg_.dim && v.dim(2) == cfg_.dim,
                  "operand dim " << q.dim(2) << " does not match configured dim " << cfg_.dim);
    const int64_t b = q.dim(0), tq = q.dim(1), tk = k.dim(1);
    if (bias) {
      CMA_CHECK_CFG(tq == bias->tokens() && tk == bias->tokens(),
                    "relative position bias built for " << bias->tokens() << " tokens, got " << tq);
    }
    Tensor qh = detail::split_heads(proj_q.forward(q), cfg_.heads);
    Tensor kh = detail::split_heads(proj_k.forward(k), cfg_.heads);
    Tensor vh = detail::split_heads(proj_v.forward(v), cfg_.heads);
    Tensor logits = scaled_qk_logits(qh, kh);  // [B*h, Tq, Tk]
    logits = reshape(logits, {b, cfg_.heads, tq, tk});
    if (bias) logits = add(logits, bias->expand());
    Tensor weights = softmax(logits, -1);
    if (trace) {
      trace->logits = logits;
      trace->weights = weights;
    }
    Tensor attn = reshape(weights, {b * cfg_.heads, tq, tk});
    if (cfg_.dropout_rate > 0.0 && training()) {
      CMA_CHECK_CFG(dropout_rng != nullptr, "dropout enabled but no RNG supplied");
      attn = dropout(attn, cfg_.dropout_rate, *dropout_rng, true);
    }
    Tensor out = detail::merge_heads(bmm(attn, vh), b, cfg_.heads);
    return proj_out.forward(out);
  }

  const AttentionConfig& config() const { return cfg_; }

  Linear proj_q, proj_k, proj_v, proj_out;

private:
  AttentionConfig cfg_;
};

// SE-style per-channel gating: squeeze (global average pool), excite
// (bottleneck MLP), sigmoid gate in (0,1), multiply per channel.
class SqueezeExcite : public Module {
public:
  SqueezeExcite(int64_t channels, Rng& rng, int64_t reduce_ratio = 4)
      : channels_(channels),
        fc_reduce(channels, std::max<int64_t>(1, channels / reduce_ratio), rng),
        fc_expand(std::max<int64_t>(1, channels / reduce_ratio), channels, rng) {
    CMA_CHECK_CFG(reduce_ratio >= 1, "reduce_ratio must be >= 1");
    register_module("fc_reduce", fc_reduce);
    register_module("fc_expand", fc_expand);
  }

  // [B,C] gates, strictly inside (0,1)
  Tensor compute_gates(const Tensor& x) const {
    CMA_CHECK_SHAPE(x.ndim() == 4 && x.dim(1) == channels_,
                    "SqueezeExcite expects [B," << channels_ << ",H,W], got " << shape_str(x.shape()));
    CMA_CHECK_SHAPE(x.dim(1) >= 1, "input must have at least one channel");
    Tensor pooled = global_avg_pool(x);
    return sigmoid(fc_expand.forward(relu(fc_reduce.forward(pooled))));
  }

  static Tensor apply_gates(const Tensor& x, const Tensor& gates) {
    CMA_CHECK_SHAPE(gates.ndim() == 2 && gates.dim(0) == x.dim(0) && gates.dim(1) == x.dim(1),
                    "gates must be [B,C] matching the feature map");
    return mul(x, reshape(gates, {x.dim(0), x.dim(1), 1, 1}));
  }

  Tensor forward(const Tensor& x) const { return apply_gates(x, compute_gates(x)); }

  Linear fc_reduce, fc_expand;

private:
  int64_t channels_;
};

// Queries from one feature stream, keys/values from another, both mapped to a
// shared width before a bias-free attention call and an output projection.
class CrossAttention : public Module {
public:
  CrossAttention(int64_t q_dim, int64_t kv_dim, const AttentionConfig& cfg, Rng& rng)
      : pre_q(q_dim, cfg.dim, rng), pre_kv(kv_dim, cfg.dim, rng), attn(cfg, rng), post(cfg.dim, cfg.dim, rng) {
    register_module("pre_q", pre_q);
    register_module("pre_kv", pre_kv);
    register_module("attn", attn);
    register_module("post", post);
  }

  Tensor forward(const Tensor& q_src, const Tensor& kv_src, Rng* dropout_rng = nullptr) {
    CMA_CHECK_SHAPE(q_src.ndim() == 3 && kv_src.ndim() == 3, "cross attention operands must be [B,T,C]");
    CMA_CHECK_SHAPE(q_src.dim(0) == kv_src.dim(0),
                    "cross attention batch sizes differ: " << q_src.dim(0) << " vs " << kv_src.dim(0));
    Tensor q = pre_q.forward(q_src);
    Tensor kv = pre_kv.forward(kv_src);
    Tensor fused = attn.forward(q, kv, kv, nullptr, nullptr, dropout_rng);
    return post.forward(fused);
  }

  Linear pre_q, pre_kv;
  MultiHeadSelfAttention attn;
  Linear post;
};

// ASPP-style multi-rate context: parallel dilated 3x3 branches over the same
// input, concatenated and fused by a 1x1 convolution. Purely linear; callers
// add normalization/activation around it.
class DilatedSpatialAttention : public Module {
public:
  DilatedSpatialAttention(int64_t in_ch, int64_t out_ch, const std::vector<int64_t>& rates, Rng& rng)
      : rates_(rates) {
    CMA_CHECK_CFG(!rates.empty(), "spatial attention needs at least one dilation rate");
    for (int64_t r : rates) CMA_CHECK_CFG(r >= 1, "dilation rate must be >= 1, got " << r);
    branches_.reserve(rates.size());
    for (size_t i = 0; i < rates.size(); ++i) {
      auto conv = std::make_unique<Conv2d>(in_ch, in_ch, 3, rng, Conv2dSpec{1, rates[i], rates[i]});
      register_module("branch" + std::to_string(i), *conv);
      branches_.push_back(std::move(conv));
    }
    fuse_ = std::make_unique<Conv2d>(in_ch * static_cast<int64_t>(rates.size()), out_ch, 1, rng);
    register_module("fuse", *fuse_);
  }

  Tensor forward(const Tensor& x) const {
    std::vector<Tensor> outs;
    outs.reserve(branches_.size());
    for (const auto& b : branches_) outs.push_back(b->forward(x));
    return fuse_->forward(concat(outs, 1));
  }

  const std::vector<int64_t>& rates() const { return rates_; }
  Conv2d& branch(size_t i) { return *branches_[i]; }
  Conv2d& fuse() { return *fuse_; }

private:
  std::vector<int64_t> rates_;
  std::vector<std::unique_ptr<Conv2d>> branches_;
  std::unique_ptr<Conv2d> fuse_;
};

}  // namespace cma::attn
