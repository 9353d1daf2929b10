#pragma once

// Teacher-student semi-supervised trainer: Eq-style total objective
// (supervised MSE + boundary contrastive + LDC consistency), SGD with a poly
// schedule, EMA teacher, and the parameter-ball projection after each step.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "cma/data/synth.hpp"
#include "cma/eval/metrics.hpp"
#include "cma/loss/contrast.hpp"
#include "cma/loss/ldc.hpp"
#include "cma/model/cmaformer.hpp"
#include "cma/train/optim.hpp"

namespace cma::train {

struct LossWeights {
  real lambda_sup = 1.0;
  real beta_contrast = 0.1;
  real gamma_con = 1.0;
  real ramp_frac = 0.2;  // fraction of max_steps over which gamma ramps up

  void validate() const {
    CMA_CHECK_CFG(lambda_sup >= 0.0 && beta_contrast >= 0.0 && gamma_con >= 0.0,
                  "loss weights must be nonnegative");
    CMA_CHECK_CFG(ramp_frac >= 0.0 && ramp_frac <= 1.0, "ramp_frac must be in [0,1]");
  }
};

struct TrainerOptions {
  SgdConfig sgd;
  LossWeights weights;
  loss::LdcParams ldc;
  real s_factor = 1.05;
  real weight_norm_cap = 1e4;
  bool project_weights = true;
  real tau = 0.1;
  real ema_decay = 0.99;
  int64_t batch_size = 4;
  int64_t epochs = 50;
  real lr_power = 0.9;
  real aug_noise = 0.03;
  int64_t head_pool = 8;
  int64_t head_hidden = 64;
  int64_t head_embed = 32;

  void validate() const {
    sgd.validate();
    weights.validate();
    ldc.validate();
    CMA_CHECK_CFG(s_factor > 0.0, "s_factor must be positive");
    CMA_CHECK_CFG(weight_norm_cap > 0.0, "weight_norm_cap must be positive");
    CMA_CHECK_CFG(tau > 0.0, "tau must be positive");
    CMA_CHECK_CFG(ema_decay >= 0.0 && ema_decay <= 1.0, "ema_decay must be in [0,1]");
    CMA_CHECK_CFG(batch_size >= 1 && epochs >= 1, "batch_size and epochs must be >= 1");
    CMA_CHECK_CFG(aug_noise >= 0.0, "aug_noise must be nonnegative");
  }
};

struct Batch {
  Tensor images;                                      // [B,1,H,W]
  std::vector<const std::vector<uint8_t>*> labels;    // empty for unlabeled batches

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

struct StepMetrics {
  int64_t step = 0;
  real lr = 0.0;
  real total = 0.0, sup = 0.0, contrast = 0.0, con = 0.0;
  real gamma_eff = 0.0;
  double wall_ms = 0.0;
};

inline Tensor onehot_labels(const std::vector<const std::vector<uint8_t>*>& labels, int64_t num_classes,
                            int64_t h, int64_t w) {
  const int64_t b = static_cast<int64_t>(labels.size());
  Tensor t = Tensor::zeros({b, num_classes, h, w});
  for (int64_t i = 0; i < b; ++i) {
    const auto& lab = *labels[static_cast<size_t>(i)];
    CMA_CHECK_INPUT(static_cast<int64_t>(lab.size()) == h * w, "label size mismatch");
    for (int64_t j = 0; j < h * w; ++j)
      t.data()[(i * num_classes + lab[static_cast<size_t>(j)]) * h * w + j] = 1.0;
  }
  return t;
}

class Trainer {
public:
  Trainer(const model::ModelConfig& mcfg, const TrainerOptions& opt, uint64_t seed)
      : opt_(opt),
        student_(mcfg, seed),
        teacher_(mcfg, seed),
        head_rng_(Rng::derive(seed, 0x4EAD)),
        head_s_(head_rng_, opt.head_pool, opt.head_hidden, opt.head_embed),
        head_t_(head_rng_, opt.head_pool, opt.head_hidden, opt.head_embed),
        noise_lab_rng_(Rng::derive(seed, 0xA001)),
        noise_unlab_rng_(Rng::derive(seed, 0xA002)),
        dropout_rng_(Rng::derive(seed, 0xD0)),
        sgd_(merged_params(), opt.sgd) {
    opt.validate();
    teacher_.set_requires_grad(false);
    teacher_.set_training(false);
    head_t_.set_requires_grad(false);
    head_t_.set_training(false);
    copy_state(teacher_.state(), student_.state());
    copy_state(head_t_.state(), head_s_.state());
  }

  void set_max_steps(int64_t max_steps) {
    CMA_CHECK_CFG(max_steps >= 1, "max_steps must be >= 1");
    max_steps_ = max_steps;
  }

  int64_t max_steps() const { return max_steps_; }
  int64_t step_count() const { return step_; }

  model::CMAformer& student() { return student_; }
  model::CMAformer& teacher() { return teacher_; }
  loss::ProjectionHead& student_head() { return head_s_; }
  loss::ProjectionHead& teacher_head() { return head_t_; }
  SgdMomentum& optimizer() { return sgd_; }
  const TrainerOptions& options() const { return opt_; }

  real gamma_at(int64_t step) const {
    const auto ramp = static_cast<int64_t>(opt_.weights.ramp_frac * static_cast<real>(max_steps_));
    return opt_.weights.gamma_con * sigmoid_rampup(step, ramp);
  }

  struct LossTerms {
    Tensor sup, contrast, con, total;
    real gamma_eff = 0.0;
    bool has_contrast = false, has_con = false;
  };

  // Builds the loss graph for one batch pair without touching the optimizer.
  // Pure given fixed parameters when aug_noise and dropout are zero.
  LossTerms compute_losses(const Batch& labeled, const Batch& unlabeled) {
    CMA_CHECK_INPUT(labeled.size() >= 1, "training error: empty labeled batch");
    CMA_CHECK(max_steps_ >= 1, ConfigError, "call set_max_steps() before stepping");
    const int64_t n_lab = labeled.size();
    const int64_t n_unlab = unlabeled.size();
    const int64_t num_classes = student_.config().num_classes;
    const int64_t h = labeled.images.dim(2), w = labeled.images.dim(3);

    student_.set_training(true);
    head_s_.set_training(true);

    Tensor student_in = with_noise(labeled.images, noise_lab_rng_);
    if (n_unlab > 0) student_in = concat({student_in, with_noise(unlabeled.images, noise_unlab_rng_)}, 0);

    Tensor logits = student_.forward(student_in, &dropout_rng_);
    Tensor probs = softmax(logits, 1);
    Tensor probs_lab = n_unlab > 0 ? narrow(probs, 0, 0, n_lab) : probs;

    LossTerms terms;
    terms.gamma_eff = gamma_at(step_);

    // L_sup: MSE between student probabilities and one-hot labels.
    Tensor target = onehot_labels(labeled.labels, num_classes, h, w);
    terms.sup = mse(probs_lab, target);

    // Teacher predictions, graph-free.
    Tensor teacher_probs_unlab;
    terms.has_con = terms.gamma_eff > 0.0 && n_unlab > 0;
    terms.has_contrast = opt_.weights.beta_contrast > 0.0;
    if (terms.has_con || (terms.has_contrast && n_unlab > 0)) {
      NoGradGuard ng;
      teacher_probs_unlab = softmax(teacher_.forward(unlabeled.images), 1);
    }

    // L_con: KKT-projected student vs teacher targets on unlabeled data.
    terms.con = Tensor::scalar(0.0);
    if (terms.has_con) {
      loss::LdcKnobs knobs;
      knobs.s_factor = opt_.s_factor;
      knobs.constraints.weight_norm_cap = opt_.weight_norm_cap;
      Tensor probs_unlab = narrow(probs, 0, n_lab, n_unlab);
      terms.con = loss::ldc_loss(probs_unlab, teacher_probs_unlab, knobs, opt_.ldc).loss;
    }

    // L_contrast: InfoNCE between teacher and student SDM embeddings over
    // the whole batch (labeled + unlabeled).
    terms.contrast = Tensor::scalar(0.0);
    if (terms.has_contrast) {
      Tensor sdm_s = loss::sdm_from_probs(probs.detach());
      Tensor teacher_probs_all;
      {
        NoGradGuard ng;
        Tensor teacher_probs_lab = softmax(teacher_.forward(labeled.images), 1);
        teacher_probs_all = n_unlab > 0 ? concat({teacher_probs_lab, teacher_probs_unlab}, 0)
                                        : teacher_probs_lab;
      }
      Tensor sdm_t = loss::sdm_from_probs(teacher_probs_all);
      Tensor h_t;
      {
        NoGradGuard ng;
        h_t = head_t_.forward(sdm_t);
      }
      Tensor h_s = head_s_.forward(sdm_s);
      terms.contrast = loss::info_nce(h_t, h_s, opt_.tau);
    }

    check_finite(terms.sup, "L_sup");
    check_finite(terms.contrast, "L_contrast");
    check_finite(terms.con, "L_con");

    terms.total = mul_scalar(terms.sup, opt_.weights.lambda_sup);
    if (terms.has_contrast)
      terms.total = add(terms.total, mul_scalar(terms.contrast, opt_.weights.beta_contrast));
    if (terms.has_con) terms.total = add(terms.total, mul_scalar(terms.con, terms.gamma_eff));
    return terms;
  }

  // One optimizer step on the combined objective. The unlabeled batch may be
  // empty, in which case the consistency term vanishes.
  StepMetrics step(const Batch& labeled, const Batch& unlabeled) {
    const auto t0 = std::chrono::steady_clock::now();
    LossTerms terms = compute_losses(labeled, unlabeled);

    StepMetrics m;
    m.step = step_;
    m.lr = poly_lr(step_, max_steps_, opt_.sgd.lr, opt_.lr_power);
    m.gamma_eff = terms.gamma_eff;

    sgd_.zero_grad();
    terms.total.backward();
    sgd_.step(m.lr);

    if (opt_.project_weights) {
      std::vector<std::pair<real*, int64_t>> spans;
      for (auto& [name, t] : student_.parameters()) spans.emplace_back(t->data(), t->numel());
      loss::project_weights_l2ball_inplace(spans, opt_.weight_norm_cap);
    }

    ema_update(teacher_.state(), student_.state(), opt_.ema_decay);
    ema_update(head_t_.state(), head_s_.state(), opt_.ema_decay);

    m.sup = terms.sup.item();
    m.contrast = terms.contrast.item();
    m.con = terms.con.item();
    m.total = terms.total.item();
    ++step_;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return m;
  }

private:
  std::vector<std::pair<std::string, Tensor*>> merged_params() {
    auto out = student_.parameters();
    auto heads = head_s_.parameters();
    out.insert(out.end(), heads.begin(), heads.end());
    return out;
  }

  Tensor with_noise(const Tensor& images, Rng& rng) {
    if (opt_.aug_noise <= 0.0) return images;
    Tensor noisy = images.clone();
    for (auto& v : noisy.vec()) v = std::min(1.0, std::max(0.0, v + rng.normal(0.0, opt_.aug_noise)));
    return noisy;
  }

  static void check_finite(const Tensor& t, const char* term) {
    CMA_CHECK(std::isfinite(t.item()), NumericError, "non-finite loss term " << term);
  }

  TrainerOptions opt_;
  model::CMAformer student_;
  model::CMAformer teacher_;
  Rng head_rng_;
  loss::ProjectionHead head_s_;
  loss::ProjectionHead head_t_;
  Rng noise_lab_rng_, noise_unlab_rng_, dropout_rng_;
  SgdMomentum sgd_;
  int64_t step_ = 0;
  int64_t max_steps_ = 0;
};

// Dice over a split, aggregated over all its samples.
inline eval::DiceReport evaluate(model::CMAformer& m, const data::Dataset& ds, data::Split split,
                                 int64_t batch = 8) {
  const auto idx = ds.indices_of(split);
  CMA_CHECK_INPUT(!idx.empty(), "evaluate called on an empty split");
  const bool was_training = m.training();
  m.set_training(false);
  eval::DiceAccumulator acc(static_cast<int>(m.config().num_classes));
  {
    NoGradGuard ng;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
      std::vector<size_t> chunk(idx.begin() + static_cast<int64_t>(start),
                                idx.begin() + static_cast<int64_t>(std::min(idx.size(), start + static_cast<size_t>(batch))));
      Tensor images = ds.images_for(chunk);
      Tensor logits = m.forward(images);
      const auto preds = eval::argmax_labels(logits);
      for (size_t i = 0; i < chunk.size(); ++i) acc.add(preds[i], ds.samples[chunk[i]].label);
    }
  }
  m.set_training(was_training);
  return eval::dice_report(acc);
}

}  // namespace cma::train
