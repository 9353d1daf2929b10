#pragma once

// CMAformer: residual blocks with channel attention, patch embedding with a
// learned coordinate table, transformer blocks (query-side layer norm and
// query skip), a multi-rate dilated bottleneck, and a decoder that fuses
// encoder skips through cross-attention.

#include <memory>
#include <utility>
#include <vector>

#include "cma/attn/attention.hpp"
#include "cma/core/nn.hpp"

namespace cma::model {

using attn::AttentionConfig;
using attn::CrossAttention;
using attn::DilatedSpatialAttention;
using attn::MultiHeadSelfAttention;
using attn::RelPosBias;
using attn::SqueezeExcite;
using nn::BatchNorm2d;
using nn::Conv2d;
using nn::LayerNorm;
using nn::Linear;
using nn::Module;

struct ModelConfig {
  int64_t in_channels = 1;
  int64_t num_classes = 3;
  int64_t image_size = 64;
  int64_t patch_size = 4;
  std::vector<int64_t> stage_widths = {32, 64, 128};
  std::vector<int64_t> depths = {1, 1, 1};
  std::vector<int64_t> heads = {2, 4, 8};
  int64_t mlp_ratio = 4;
  std::vector<int64_t> aspp_rates = {1, 6, 12};
  int64_t reduce_ratio = 4;
  real dropout_rate = 0.0;
  bool use_transformer = true;      // ablation toggle: ViT blocks + dilated bottleneck
  bool use_cross_attention = true;  // ablation toggle: decoder skip fusion

  int64_t num_stages() const { return static_cast<int64_t>(stage_widths.size()); }

  void validate() const {
    CMA_CHECK_CFG(in_channels >= 1 && num_classes >= 2, "need >=1 input channel and >=2 classes");
    CMA_CHECK_CFG(patch_size >= 1, "patch_size must be >= 1");
    CMA_CHECK_CFG(!stage_widths.empty(), "at least one stage required");
    CMA_CHECK_CFG(depths.size() == stage_widths.size() && heads.size() == stage_widths.size(),
                  "depths/heads must match stage count");
    for (size_t i = 1; i < stage_widths.size(); ++i)
      CMA_CHECK_CFG(stage_widths[i] > stage_widths[i - 1], "stage_widths must be strictly increasing");
    for (size_t i = 0; i < stage_widths.size(); ++i) {
      CMA_CHECK_CFG(heads[i] >= 1 && stage_widths[i] % heads[i] == 0,
                    "heads must divide width at stage " << i);
      CMA_CHECK_CFG(depths[i] >= 0, "negative depth");
    }
    CMA_CHECK_CFG(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    const int64_t halvings = int64_t{1} << (num_stages() - 1);
    CMA_CHECK_CFG(image_size % patch_size == 0 && image_size % halvings == 0 &&
                      (image_size / patch_size) % halvings == 0,
                  "image_size " << image_size << " incompatible with patch " << patch_size << " and "
                                << num_stages() << " stages");
  }
};

// Bijection between token index and (row, col) on the patch grid.
struct PositionMap {
  int64_t grid_h = 0, grid_w = 0;

  int64_t tokens() const { return grid_h * grid_w; }
  std::pair<int64_t, int64_t> to_rc(int64_t token) const { return {token / grid_w, token % grid_w}; }
  int64_t to_token(int64_t r, int64_t c) const { return r * grid_w + c; }
};

// [B,C,H,W] <-> [B,H*W,C]
inline Tensor tokens_from_map(const Tensor& x) {
  CMA_CHECK_SHAPE(x.ndim() == 4, "expected [B,C,H,W]");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {b, h * w, c});
}

inline Tensor map_from_tokens(const Tensor& t, int64_t h, int64_t w) {
  CMA_CHECK_SHAPE(t.ndim() == 3 && t.dim(1) == h * w, "token count does not match grid");
  const int64_t b = t.dim(0), c = t.dim(2);
  return permute(reshape(t, {b, h, w, c}), {0, 3, 1, 2});
}

// Non-overlapping p x p patches projected to `width`, plus a learned
// embedding of each patch's (row, col) coordinate added to the tokens.
class PatchEmbed : public Module {
public:
  PatchEmbed(int64_t in_ch, int64_t width, int64_t patch, int64_t grid, Rng& rng)
      : patch_(patch), grid_(grid), proj(in_ch, width, patch, rng, Conv2dSpec{patch, 0, 1}) {
    pos_table = Tensor::randn({grid * grid, width}, rng, 0.02);
    register_module("proj", proj);
    register_parameter("pos_table", pos_table);
  }

  std::pair<Tensor, PositionMap> forward(const Tensor& x) const {
    CMA_CHECK_SHAPE(x.dim(2) % patch_ == 0 && x.dim(3) % patch_ == 0,
                    "spatial dims " << x.dim(2) << "x" << x.dim(3) << " not divisible by patch " << patch_);
    Tensor fm = proj.forward(x);
    PositionMap pm{fm.dim(2), fm.dim(3)};
    CMA_CHECK_SHAPE(pm.tokens() == grid_ * grid_, "input size does not match configured grid");
    Tensor tokens = add(tokens_from_map(fm), pos_table);
    return {tokens, pm};
  }

  Conv2d proj;
  Tensor pos_table;

private:
  int64_t patch_, grid_;
};

// Two 3x3 convolutions with batch norm, channel attention on the main branch,
// projection shortcut when the width changes. No activation after the sum.
class ResidualBlock : public Module {
public:
  ResidualBlock(int64_t in_ch, int64_t out_ch, Rng& rng, int64_t reduce_ratio = 4)
      : conv1(in_ch, out_ch, 3, rng, Conv2dSpec{1, 1, 1}),
        bn1(out_ch),
        conv2(out_ch, out_ch, 3, rng, Conv2dSpec{1, 1, 1}),
        bn2(out_ch),
        se(out_ch, rng, reduce_ratio) {
    register_module("conv1", conv1);
    register_module("bn1", bn1);
    register_module("conv2", conv2);
    register_module("bn2", bn2);
    register_module("se", se);
    if (in_ch != out_ch) {
      skip_proj = std::make_unique<Conv2d>(in_ch, out_ch, 1, rng);
      skip_bn = std::make_unique<BatchNorm2d>(out_ch);
      register_module("skip_proj", *skip_proj);
      register_module("skip_bn", *skip_bn);
    }
  }

  Tensor main_path(const Tensor& x) {
    return se.forward(bn2.forward(conv2.forward(relu(bn1.forward(conv1.forward(x))))));
  }

  Tensor skip_path(const Tensor& x) {
    if (skip_proj) return skip_bn->forward(skip_proj->forward(x));
    return x;
  }

  Tensor forward(const Tensor& x) { return add(skip_path(x), main_path(x)); }

  Conv2d conv1;
  BatchNorm2d bn1;
  Conv2d conv2;
  BatchNorm2d bn2;
  SqueezeExcite se;
  std::unique_ptr<Conv2d> skip_proj;
  std::unique_ptr<BatchNorm2d> skip_bn;
};

// Layer norm is applied to the query path only; keys and values see the raw
// input, and the normalized query is what the residual skip adds back.
class TransformerBlock : public Module {
public:
  TransformerBlock(const AttentionConfig& cfg, int64_t mlp_ratio, int64_t grid, Rng& rng)
      : ln_q(cfg.dim),
        bias(grid, cfg.heads),
        msa(cfg, rng),
        ln_mlp(cfg.dim),
        fc1(cfg.dim, cfg.dim * mlp_ratio, rng),
        fc2(cfg.dim * mlp_ratio, cfg.dim, rng) {
    register_module("ln_q", ln_q);
    register_module("bias", bias);
    register_module("msa", msa);
    register_module("ln_mlp", ln_mlp);
    register_module("fc1", fc1);
    register_module("fc2", fc2);
  }

  Tensor mlp(const Tensor& y) const { return fc2.forward(gelu(fc1.forward(ln_mlp.forward(y)))); }

  Tensor forward(const Tensor& x, Rng* dropout_rng = nullptr) {
    CMA_CHECK_SHAPE(x.ndim() == 3, "transformer block expects [B, H*W, C], got " << shape_str(x.shape()));
    Tensor q = ln_q.forward(x);
    Tensor y = add(q, msa.forward(q, x, x, &bias, nullptr, dropout_rng));
    return add(y, mlp(y));
  }

  LayerNorm ln_q;
  RelPosBias bias;
  MultiHeadSelfAttention msa;
  LayerNorm ln_mlp;
  Linear fc1, fc2;
};

// Two convolutions with a stride-2 second, then channel attention to remap
// positional content onto the new channel layout.
class Downsample : public Module {
public:
  Downsample(int64_t in_ch, int64_t out_ch, Rng& rng, int64_t reduce_ratio = 4)
      : conv1(in_ch, out_ch, 3, rng, Conv2dSpec{1, 1, 1}),
        bn1(out_ch),
        conv2(out_ch, out_ch, 3, rng, Conv2dSpec{2, 1, 1}),
        bn2(out_ch),
        se(out_ch, rng, reduce_ratio) {
    register_module("conv1", conv1);
    register_module("bn1", bn1);
    register_module("conv2", conv2);
    register_module("bn2", bn2);
    register_module("se", se);
  }

  Tensor forward(const Tensor& x) {
    Tensor y = relu(bn1.forward(conv1.forward(x)));
    y = relu(bn2.forward(conv2.forward(y)));
    return se.forward(y);
  }

  Conv2d conv1;
  BatchNorm2d bn1;
  Conv2d conv2;
  BatchNorm2d bn2;
  SqueezeExcite se;
};

// Nearest x2 upsample + conv, skip fusion (cross-attention or a 1x1
// projection when ablated), then a residual block.
class DecoderStage : public Module {
public:
  DecoderStage(int64_t in_ch, int64_t out_ch, int64_t heads, real dropout, bool use_cross, Rng& rng,
               int64_t reduce_ratio = 4)
      : up_conv(in_ch, out_ch, 3, rng, Conv2dSpec{1, 1, 1}), up_bn(out_ch), res(out_ch, out_ch, rng, reduce_ratio) {
    register_module("up_conv", up_conv);
    register_module("up_bn", up_bn);
    if (use_cross) {
      AttentionConfig cfg{out_ch, heads, dropout};
      cross = std::make_unique<CrossAttention>(out_ch, out_ch, cfg, rng);
      register_module("cross", *cross);
    } else {
      skip_proj = std::make_unique<Conv2d>(out_ch, out_ch, 1, rng);
      register_module("skip_proj", *skip_proj);
    }
    register_module("res", res);
  }

  Tensor forward(const Tensor& x, const Tensor& skip, Rng* dropout_rng = nullptr) {
    Tensor y = relu(up_bn.forward(up_conv.forward(upsample_nearest(x, 2))));
    CMA_CHECK_SHAPE(y.dim(2) == skip.dim(2) && y.dim(3) == skip.dim(3), "decoder/skip spatial mismatch");
    if (cross) {
      const int64_t h = y.dim(2), w = y.dim(3);
      Tensor fused = cross->forward(tokens_from_map(y), tokens_from_map(skip), dropout_rng);
      y = add(y, map_from_tokens(fused, h, w));
    } else {
      y = add(y, skip_proj->forward(skip));
    }
    return res.forward(y);
  }

  Conv2d up_conv;
  BatchNorm2d up_bn;
  std::unique_ptr<CrossAttention> cross;
  std::unique_ptr<Conv2d> skip_proj;
  ResidualBlock res;
};

// Encoder stage outputs retained for decoder fusion.
struct FeaturePyramid {
  std::vector<Tensor> stages;
};

class CMAformer : public Module {
public:
  CMAformer(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(Rng::derive(seed, 0xC0DE));
    const int64_t s = cfg.num_stages();
    const int64_t grid0 = cfg.image_size / cfg.patch_size;

    embed_ = std::make_unique<PatchEmbed>(cfg.in_channels, cfg.stage_widths[0], cfg.patch_size, grid0, rng);
    register_module("embed", *embed_);

    int64_t grid = grid0;
    for (int64_t i = 0; i < s; ++i) {
      if (i > 0) {
        auto down = std::make_unique<Downsample>(cfg.stage_widths[i - 1], cfg.stage_widths[i], rng, cfg.reduce_ratio);
        register_module("down" + std::to_string(i), *down);
        downs_.push_back(std::move(down));
        grid /= 2;
      }
      auto res = std::make_unique<ResidualBlock>(cfg.stage_widths[i], cfg.stage_widths[i], rng, cfg.reduce_ratio);
      register_module("stage" + std::to_string(i) + "_res", *res);
      stage_res_.push_back(std::move(res));
      grids_.push_back(grid);

      std::vector<std::unique_ptr<TransformerBlock>> blocks;
      if (cfg.use_transformer) {
        for (int64_t d = 0; d < cfg.depths[i]; ++d) {
          AttentionConfig acfg{cfg.stage_widths[i], cfg.heads[i], cfg.dropout_rate};
          auto blk = std::make_unique<TransformerBlock>(acfg, cfg.mlp_ratio, grid, rng);
          register_module("stage" + std::to_string(i) + "_blk" + std::to_string(d), *blk);
          blocks.push_back(std::move(blk));
        }
      }
      stage_blocks_.push_back(std::move(blocks));
    }

    if (cfg.use_transformer) {
      const int64_t wlast = cfg.stage_widths.back();
      bottleneck_ = std::make_unique<DilatedSpatialAttention>(wlast, wlast, cfg.aspp_rates, rng);
      bottleneck_bn_ = std::make_unique<BatchNorm2d>(wlast);
      register_module("bottleneck", *bottleneck_);
      register_module("bottleneck_bn", *bottleneck_bn_);
    }

    for (int64_t i = s - 2; i >= 0; --i) {
      auto dec = std::make_unique<DecoderStage>(cfg.stage_widths[i + 1], cfg.stage_widths[i], cfg.heads[i],
                                                cfg.dropout_rate, cfg.use_cross_attention, rng, cfg.reduce_ratio);
      register_module("dec" + std::to_string(i), *dec);
      decoder_.push_back(std::move(dec));
    }

    const int64_t refine_ch = std::max<int64_t>(8, cfg.stage_widths[0] / 2);
    refine_conv_ = std::make_unique<Conv2d>(cfg.stage_widths[0], refine_ch, 3, rng, Conv2dSpec{1, 1, 1});
    refine_bn_ = std::make_unique<BatchNorm2d>(refine_ch);
    head_ = std::make_unique<Conv2d>(refine_ch, cfg.num_classes, 1, rng);
    register_module("refine_conv", *refine_conv_);
    register_module("refine_bn", *refine_bn_);
    register_module("head", *head_);
  }

  const ModelConfig& config() const { return cfg_; }

  // Per-pixel class logits [B, num_classes, H, W].
  Tensor forward(const Tensor& x, Rng* dropout_rng = nullptr, FeaturePyramid* pyramid = nullptr) {
    CMA_CHECK_SHAPE(x.ndim() == 4, "model input must be [B,C,H,W]");
    CMA_CHECK_SHAPE(x.dim(1) == cfg_.in_channels, "input channels " << x.dim(1) << " != configured "
                                                                    << cfg_.in_channels);
    CMA_CHECK_SHAPE(x.dim(2) == cfg_.image_size && x.dim(3) == cfg_.image_size,
                    "input " << x.dim(2) << "x" << x.dim(3) << " != configured image_size " << cfg_.image_size);
    const int64_t s = cfg_.num_stages();

    auto [tokens, pmap] = embed_->forward(x);
    Tensor fm = map_from_tokens(tokens, pmap.grid_h, pmap.grid_w);

    std::vector<Tensor> skips;
    for (int64_t i = 0; i < s; ++i) {
      if (i > 0) fm = downs_[static_cast<size_t>(i - 1)]->forward(fm);
      fm = stage_res_[static_cast<size_t>(i)]->forward(fm);
      if (!stage_blocks_[static_cast<size_t>(i)].empty()) {
        const int64_t g = grids_[static_cast<size_t>(i)];
        Tensor t = tokens_from_map(fm);
        for (auto& blk : stage_blocks_[static_cast<size_t>(i)]) t = blk->forward(t, dropout_rng);
        fm = map_from_tokens(t, g, g);
      }
      skips.push_back(fm);
    }
    if (pyramid) pyramid->stages = skips;

    if (bottleneck_) fm = relu(bottleneck_bn_->forward(bottleneck_->forward(fm)));

    for (size_t d = 0; d < decoder_.size(); ++d) {
      const Tensor& skip = skips[static_cast<size_t>(s - 2 - static_cast<int64_t>(d))];
      fm = decoder_[d]->forward(fm, skip, dropout_rng);
    }

    fm = upsample_nearest(fm, cfg_.patch_size);
    fm = relu(refine_bn_->forward(refine_conv_->forward(fm)));
    return head_->forward(fm);
  }

  PatchEmbed& embed() { return *embed_; }

private:
  ModelConfig cfg_;
  std::unique_ptr<PatchEmbed> embed_;
  std::vector<std::unique_ptr<Downsample>> downs_;
  std::vector<std::unique_ptr<ResidualBlock>> stage_res_;
  std::vector<std::vector<std::unique_ptr<TransformerBlock>>> stage_blocks_;
  std::vector<int64_t> grids_;
  std::unique_ptr<DilatedSpatialAttention> bottleneck_;
  std::unique_ptr<BatchNorm2d> bottleneck_bn_;
  std::vector<std::unique_ptr<DecoderStage>> decoder_;
  std::unique_ptr<Conv2d> refine_conv_;
  std::unique_ptr<BatchNorm2d> refine_bn_;
  std::unique_ptr<Conv2d> head_;
};

}  // namespace cma::model
