// Trainer mechanics: schedules, EMA, loss composition and its gradient
// linearity, optimizer defaults, determinism, the weight-ball invariant, the
// label-provenance audit, and a short overfit run.

#include <catch_amalgamated.hpp>

#include "cma/data/synth.hpp"
#include "cma/train/trainer.hpp"
#include "testutil.hpp"

using namespace cma;
using data::Dataset;
using train::Batch;
using train::StepMetrics;
using train::Trainer;
using train::TrainerOptions;

namespace {

model::ModelConfig mini_model(int64_t size = 32) {
  model::ModelConfig cfg;
  cfg.image_size = size;
  cfg.stage_widths = {8, 16};
  cfg.depths = {1, 1};
  cfg.heads = {2, 4};
  cfg.aspp_rates = {1, 3};
  return cfg;
}

TrainerOptions quiet_options() {
  TrainerOptions opt;
  opt.aug_noise = 0.0;
  opt.batch_size = 4;
  opt.epochs = 1;
  opt.head_pool = 4;
  opt.head_hidden = 16;
  opt.head_embed = 8;
  return opt;
}

Batch labeled_batch(const Dataset& ds, const std::vector<size_t>& idx) {
  return Batch{ds.images_for(idx), ds.labels_for(idx)};
}

Batch unlabeled_batch(const Dataset& ds, const std::vector<size_t>& idx) {
  return Batch{ds.images_for(idx), {}};
}

}  // namespace

TEST_CASE("poly schedule endpoints and closed-form midpoint") {
  REQUIRE(train::poly_lr(0, 100, 1e-3) == Catch::Approx(1e-3).margin(1e-15));
  REQUIRE(train::poly_lr(100, 100, 1e-3) == 0.0);
  REQUIRE(train::poly_lr(150, 100, 1e-3) == 0.0);  // clamped past the end
  REQUIRE(train::poly_lr(50, 100, 1e-3, 0.9) ==
          Catch::Approx(1e-3 * std::pow(0.5, 0.9)).margin(1e-15));
  REQUIRE(train::poly_lr(50, 100, 1e-3, 0.9) == Catch::Approx(5.359e-4).margin(1e-6));
  real prev = 1e9;
  for (int64_t s = 0; s <= 200; s += 5) {
    const real lr = train::poly_lr(s, 200, 1e-3, 0.9);
    REQUIRE(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("sigmoid ramp starts near zero and saturates at one") {
  REQUIRE(train::sigmoid_rampup(0, 100) == Catch::Approx(std::exp(-5.0)).margin(1e-12));
  REQUIRE(train::sigmoid_rampup(100, 100) == 1.0);
  REQUIRE(train::sigmoid_rampup(250, 100) == 1.0);
  REQUIRE(train::sigmoid_rampup(5, 0) == 1.0);  // no ramp configured
  real prev = 0.0;
  for (int64_t s = 0; s <= 100; s += 10) {
    const real v = train::sigmoid_rampup(s, 100);
    REQUIRE(v >= prev);
    prev = v;
  }
}

TEST_CASE("ema endpoints and geometric decay") {
  Rng rng(1);
  Tensor t = Tensor::randn({8}, rng);
  Tensor s = Tensor::randn({8}, rng);
  std::vector<std::pair<std::string, Tensor*>> teacher = {{"w", &t}};
  std::vector<std::pair<std::string, Tensor*>> student = {{"w", &s}};

  Tensor t0 = t.clone();
  train::ema_update(teacher, student, 1.0);
  REQUIRE(t.vec() == t0.vec());  // decay 1: unchanged

  train::ema_update(teacher, student, 0.0);
  REQUIRE(t.vec() == s.vec());  // decay 0: copies the student

  // constant student: the gap shrinks by decay^k
  t = Tensor::randn({8}, rng);
  teacher[0].second = &t;
  real gap0 = 0.0;
  for (int64_t i = 0; i < 8; ++i) gap0 += (t.data()[i] - s.data()[i]) * (t.data()[i] - s.data()[i]);
  const real decay = 0.9;
  const int k = 7;
  for (int i = 0; i < k; ++i) train::ema_update(teacher, student, decay);
  real gap = 0.0;
  for (int64_t i = 0; i < 8; ++i) gap += (t.data()[i] - s.data()[i]) * (t.data()[i] - s.data()[i]);
  REQUIRE(std::sqrt(gap) == Catch::Approx(std::sqrt(gap0) * std::pow(decay, k)).margin(1e-9));

  REQUIRE_THROWS_AS(train::ema_update(teacher, student, 1.5), InputError);
}

TEST_CASE("optimizer defaults match the published settings") {
  train::SgdConfig cfg;
  REQUIRE(cfg.lr == 1e-3);
  REQUIRE(cfg.momentum == 0.99);
  REQUIRE(cfg.weight_decay == 3e-5);
}

TEST_CASE("supervised-only weights reduce the total to lambda * L_sup") {
  Dataset ds = data::generate_dataset(20, 32, 32, 31);
  TrainerOptions opt = quiet_options();
  opt.weights.beta_contrast = 0.0;
  opt.weights.gamma_con = 0.0;
  opt.weights.lambda_sup = 1.7;
  Trainer trainer(mini_model(), opt, 5);
  trainer.set_max_steps(10);
  StepMetrics m = trainer.step(labeled_batch(ds, {0, 1, 2, 3}), Batch{});
  REQUIRE(m.total == Catch::Approx(1.7 * m.sup).margin(1e-12));
  REQUIRE(m.contrast == 0.0);
  REQUIRE(m.con == 0.0);
}

TEST_CASE("first step on a random batch keeps every term finite") {
  Dataset ds = data::generate_dataset(20, 32, 32, 33);
  data::mark_labeled_fraction(ds, 0.5, 33);
  TrainerOptions opt = quiet_options();
  opt.weights.ramp_frac = 0.0;  // activate the consistency term immediately
  Trainer trainer(mini_model(), opt, 7);
  trainer.set_max_steps(10);
  const auto lab = ds.train_indices(true);
  const auto unlab = ds.train_indices(false);
  StepMetrics m = trainer.step(labeled_batch(ds, {lab[0], lab[1]}), unlabeled_batch(ds, {unlab[0], unlab[1]}));
  REQUIRE(std::isfinite(m.total));
  REQUIRE(std::isfinite(m.sup));
  REQUIRE(std::isfinite(m.contrast));
  REQUIRE(std::isfinite(m.con));
  REQUIRE(m.con != 0.0);
  REQUIRE(m.contrast != 0.0);
}

TEST_CASE("doubling gamma doubles the consistency contribution") {
  Dataset ds = data::generate_dataset(20, 32, 32, 35);
  data::mark_labeled_fraction(ds, 0.5, 35);
  const auto lab = ds.train_indices(true);
  const auto unlab = ds.train_indices(false);

  auto run_once = [&](real gamma) {
    TrainerOptions opt = quiet_options();
    opt.weights.ramp_frac = 0.0;
    opt.weights.gamma_con = gamma;
    Trainer trainer(mini_model(), opt, 11);
    trainer.set_max_steps(10);
    return trainer.step(labeled_batch(ds, {lab[0], lab[1]}), unlabeled_batch(ds, {unlab[0], unlab[1]}));
  };
  StepMetrics a = run_once(1.0);
  StepMetrics b = run_once(2.0);
  REQUIRE(a.con == Catch::Approx(b.con).margin(1e-12));  // same raw term
  const real contrib_a = a.total - a.sup - 0.1 * a.contrast;
  const real contrib_b = b.total - b.sup - 0.1 * b.contrast;
  REQUIRE(contrib_b == Catch::Approx(2.0 * contrib_a).margin(1e-9));
}

TEST_CASE("total gradient equals the sum of per-term gradients") {
  Dataset ds = data::generate_dataset(20, 32, 32, 37);
  data::mark_labeled_fraction(ds, 0.5, 37);
  const auto lab = ds.train_indices(true);
  const auto unlab = ds.train_indices(false);
  TrainerOptions opt = quiet_options();
  opt.weights.ramp_frac = 0.0;
  opt.s_factor = 1e6;  // keep the projection inactive so terms stay smooth
  Trainer trainer(mini_model(), opt, 13);
  trainer.set_max_steps(10);
  Batch lb = labeled_batch(ds, {lab[0], lab[1]});
  Batch ub = unlabeled_batch(ds, {unlab[0], unlab[1]});

  auto params = trainer.student().parameters();
  auto terms = trainer.compute_losses(lb, ub);
  trainer.optimizer().zero_grad();
  terms.total.backward();
  std::vector<std::vector<real>> combined;
  for (auto& [n, t] : params) combined.push_back(t->grad());

  trainer.optimizer().zero_grad();
  auto terms2 = trainer.compute_losses(lb, ub);
  mul_scalar(terms2.sup, opt.weights.lambda_sup).backward();
  auto terms3 = trainer.compute_losses(lb, ub);
  mul_scalar(terms3.contrast, opt.weights.beta_contrast).backward();
  auto terms4 = trainer.compute_losses(lb, ub);
  mul_scalar(terms4.con, terms4.gamma_eff).backward();

  for (size_t i = 0; i < params.size(); ++i) {
    const auto& sum_grad = params[i].second->grad();
    for (size_t j = 0; j < sum_grad.size(); ++j)
      REQUIRE(std::abs(sum_grad[j] - combined[i][j]) <= 1e-10);
  }
}

TEST_CASE("teacher changes only through the EMA update") {
  Dataset ds = data::generate_dataset(20, 32, 32, 39);
  data::mark_labeled_fraction(ds, 0.5, 39);
  const auto lab = ds.train_indices(true);
  TrainerOptions opt = quiet_options();
  opt.ema_decay = 0.9;
  Trainer trainer(mini_model(), opt, 17);
  trainer.set_max_steps(10);

  // teacher parameters never require grad
  for (auto& [n, t] : trainer.teacher().parameters()) REQUIRE_FALSE(t->requires_grad());

  std::vector<std::vector<real>> teacher_before;
  for (auto& [n, t] : trainer.teacher().state()) teacher_before.push_back(t->vec());
  trainer.step(labeled_batch(ds, {lab[0], lab[1]}), Batch{});
  auto student_after = trainer.student().state();
  auto teacher_after = trainer.teacher().state();
  for (size_t i = 0; i < teacher_after.size(); ++i) {
    const auto& tb = teacher_before[i];
    const auto& ta = teacher_after[i].second->vec();
    const auto& sa = student_after[i].second->vec();
    for (size_t j = 0; j < ta.size(); ++j)
      REQUIRE(ta[j] == Catch::Approx(0.9 * tb[j] + 0.1 * sa[j]).margin(1e-12));
  }
}

TEST_CASE("non-finite losses abort with the offending term named") {
  Dataset ds = data::generate_dataset(20, 32, 32, 41);
  TrainerOptions opt = quiet_options();
  opt.weights.beta_contrast = 0.0;
  opt.weights.gamma_con = 0.0;
  Trainer trainer(mini_model(), opt, 19);
  trainer.set_max_steps(10);
  // poison one student parameter
  trainer.student().parameters()[0].second->data()[0] = std::numeric_limits<real>::quiet_NaN();
  try {
    trainer.step(labeled_batch(ds, {0, 1}), Batch{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("L_sup") != std::string::npos);
  }
}

TEST_CASE("weight-ball projection keeps the student inside the cap") {
  Dataset ds = data::generate_dataset(20, 32, 32, 43);
  TrainerOptions opt = quiet_options();
  opt.weights.beta_contrast = 0.0;
  opt.weights.gamma_con = 0.0;
  opt.weight_norm_cap = 25.0;  // deliberately tight
  Trainer trainer(mini_model(), opt, 23);
  trainer.set_max_steps(10);
  for (int i = 0; i < 3; ++i) {
    trainer.step(labeled_batch(ds, {0, 1, 2, 3}), Batch{});
    real sq = 0.0;
    for (auto& [n, t] : trainer.student().parameters())
      for (real v : t->vec()) sq += v * v;
    REQUIRE(sq <= opt.weight_norm_cap + 1e-9);
  }
}

TEST_CASE("same seed and config reproduce the loss trajectory bitwise") {
  Dataset ds = data::generate_dataset(24, 32, 32, 45);
  data::mark_labeled_fraction(ds, 0.5, 45);
  const auto lab = ds.train_indices(true);
  const auto unlab = ds.train_indices(false);
  auto run = [&] {
    TrainerOptions opt = quiet_options();
    opt.aug_noise = 0.03;  // exercise the noise stream too
    opt.weights.ramp_frac = 0.0;
    Trainer trainer(mini_model(), opt, 29);
    trainer.set_max_steps(16);
    std::vector<real> losses;
    for (int s = 0; s < 10; ++s) {
      const size_t a = static_cast<size_t>(s) % lab.size();
      const size_t b = static_cast<size_t>(s) % unlab.size();
      StepMetrics m = trainer.step(labeled_batch(ds, {lab[a], lab[(a + 1) % lab.size()]}),
                                   unlabeled_batch(ds, {unlab[b], unlab[(b + 1) % unlab.size()]}));
      losses.push_back(m.total);
      losses.push_back(m.sup);
      losses.push_back(m.contrast);
      losses.push_back(m.con);
    }
    return losses;
  };
  REQUIRE(run() == run());
}

TEST_CASE("unlabeled sample labels never reach any loss term") {
  Dataset ds = data::generate_dataset(24, 32, 32, 47);
  data::mark_labeled_fraction(ds, 0.5, 47);
  const auto lab = ds.train_indices(true);
  const auto unlab = ds.train_indices(false);

  Dataset poisoned = ds;
  Rng scramble(99);
  for (size_t i : unlab)
    for (auto& v : poisoned.samples[i].label) v = static_cast<uint8_t>(scramble.below(3));

  auto run = [&](const Dataset& d) {
    TrainerOptions opt = quiet_options();
    opt.weights.ramp_frac = 0.0;
    Trainer trainer(mini_model(), opt, 31);
    trainer.set_max_steps(10);
    std::vector<real> out;
    for (int s = 0; s < 3; ++s) {
      StepMetrics m = trainer.step(labeled_batch(d, {lab[0], lab[1]}),
                                   unlabeled_batch(d, {unlab[0], unlab[1]}));
      out.push_back(m.total);
      out.push_back(m.con);
      out.push_back(m.contrast);
    }
    return out;
  };
  REQUIRE(run(ds) == run(poisoned));
}

TEST_CASE("dice accumulator: identity, disjoint, symmetry, range") {
  eval::DiceAccumulator acc(3);
  std::vector<uint8_t> a = {0, 1, 1, 2, 0, 2};
  acc.add(a, a);
  REQUIRE(acc.dice(1) == 100.0);
  REQUIRE(acc.dice(2) == 100.0);

  eval::DiceAccumulator disjoint(3);
  std::vector<uint8_t> p = {1, 1, 0, 0};
  std::vector<uint8_t> t = {0, 0, 1, 1};
  disjoint.add(p, t);
  REQUIRE(disjoint.dice(1) == 0.0);

  Rng rng(51);
  std::vector<uint8_t> x(64), y(64);
  for (size_t i = 0; i < 64; ++i) {
    x[i] = static_cast<uint8_t>(rng.below(3));
    y[i] = static_cast<uint8_t>(rng.below(3));
  }
  eval::DiceAccumulator ab(3), ba(3);
  ab.add(x, y);
  ba.add(y, x);
  for (int c = 1; c < 3; ++c) {
    REQUIRE(ab.dice(c) == ba.dice(c));
    REQUIRE(ab.dice(c) >= 0.0);
    REQUIRE(ab.dice(c) <= 100.0);
  }
  // both-empty class counts as a perfect match
  eval::DiceAccumulator empty(3);
  std::vector<uint8_t> zeros(8, 0);
  empty.add(zeros, zeros);
  REQUIRE(empty.dice(2) == 100.0);
}

TEST_CASE("100 steps on one fixed batch cut the loss by at least half") {
  // tiny config at 32px, supervised only
  model::ModelConfig cfg;  // tiny: widths 32/64/128, p=4
  cfg.image_size = 32;
  Dataset ds = data::generate_dataset(20, 32, 32, 53);
  TrainerOptions opt;
  opt.aug_noise = 0.0;
  opt.weights.beta_contrast = 0.0;
  opt.weights.gamma_con = 0.0;
  opt.epochs = 1;
  Trainer trainer(cfg, opt, 37);
  trainer.set_max_steps(400);  // keep the poly schedule from decaying to 0
  Batch batch = labeled_batch(ds, {0, 1, 2, 3});
  real first = 0.0, last = 0.0;
  for (int s = 0; s < 100; ++s) {
    StepMetrics m = trainer.step(batch, Batch{});
    if (s == 0) first = m.total;
    last = m.total;
  }
  INFO("first " << first << " last " << last);
  REQUIRE(last <= 0.5 * first);
}
