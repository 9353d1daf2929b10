// LDC loss machinery: the printed consistency formula against a straight-line
// oracle, the KKT projection against active-set enumeration, multiplier
// certificates, and the L2 parameter-ball projection.

#include <catch_amalgamated.hpp>

#include "cma/loss/ldc.hpp"
#include "testutil.hpp"

using namespace cma;
using loss::ConstraintSet;
using loss::DualSolution;
using loss::LdcKnobs;
using loss::LdcParams;
using testutil::max_rel_grad_error;

namespace {

Tensor t1(std::vector<real> v) {
  const auto n = static_cast<int64_t>(v.size());
  return Tensor::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("consistency loss at the all-ones point is -0.4995") {
  LdcParams prm;  // alpha 1, beta1 0.314, beta2 0.685
  Tensor one = t1({1.0});
  Tensor loss = loss::consistency_loss(one, one, one, one, prm);
  REQUIRE(std::abs(loss.item() - (-0.4995)) <= 1e-9);
}

TEST_CASE("probability clamp keeps the BCE term finite at p = 0") {
  LdcParams prm;
  Tensor p1 = t1({0.0});
  Tensor p2 = t1({0.5});
  Tensor y1 = t1({1.0});
  Tensor y2 = t1({0.0});
  Tensor loss = loss::consistency_loss(p1, p2, y1, y2, prm);
  REQUIRE(std::isfinite(loss.item()));
  // BCE term is alpha * log(eps); dice terms: beta1 * eps/(1+eps), beta2 * 0
  const real eps = prm.eps;
  const real expected = -(std::log(eps) + prm.beta1 * eps / (1.0 + eps));
  REQUIRE(loss.item() == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("consistency loss rejects inputs outside [0,1] and length mismatches") {
  LdcParams prm;
  REQUIRE_THROWS_AS(loss::consistency_loss(t1({1.2}), t1({0.5}), t1({1.0}), t1({0.0}), prm), InputError);
  REQUIRE_THROWS_AS(loss::consistency_loss(t1({0.5}), t1({0.5}), t1({1.0, 0.0}), t1({0.0}), prm),
                    InputError);
}

TEST_CASE("consistency loss matches the straight-line oracle on random vectors") {
  Rng rng(1);
  LdcParams prm;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<real> p1(4), p2(4), y1(4), y2(4);
    for (int i = 0; i < 4; ++i) {
      p1[i] = rng.uniform();
      p2[i] = rng.uniform();
      y1[i] = rng.uniform();
      y2[i] = rng.uniform();
    }
    Tensor loss = loss::consistency_loss(t1(p1), t1(p2), t1(y1), t1(y2), prm);
    const real expected =
        testutil::oracle_consistency_loss(p1, p2, y1, y2, prm.alpha, prm.beta1, prm.beta2, prm.eps);
    REQUIRE(loss.item() == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("BCE part decreases strictly as p rises toward the label") {
  LdcParams prm;
  prm.beta1 = 0.0;
  prm.beta2 = 0.0;  // isolate the BCE part
  real prev = std::numeric_limits<real>::infinity();
  for (real p = 0.1; p < 1.0; p += 0.1) {
    Tensor loss = loss::consistency_loss(t1({p}), t1({0.5}), t1({1.0}), t1({0.0}), prm);
    REQUIRE(loss.item() < prev);
    prev = loss.item();
  }
}

TEST_CASE("consistency loss gradient vs finite differences") {
  Rng rng(2);
  LdcParams prm;
  Tensor p1 = Tensor::rand_uniform({6}, rng, 0.2, 0.8);
  Tensor p2 = Tensor::rand_uniform({6}, rng, 0.2, 0.8);
  Tensor y1 = Tensor::rand_uniform({6}, rng, 0.1, 0.9);
  Tensor y2 = Tensor::rand_uniform({6}, rng, 0.1, 0.9);
  p1.set_requires_grad(true);
  p2.set_requires_grad(true);
  auto fwd = [&] { return loss::consistency_loss(p1, p2, y1, y2, prm); };
  REQUIRE(max_rel_grad_error(fwd, {p1, p2}) < 1e-4);
}

TEST_CASE("project_kkt leaves interior points alone with zero multipliers") {
  ConstraintSet c;
  c.sum_cap = 10.0;
  DualSolution sol = loss::project_kkt({0.25, 0.5, 0.1}, c);
  REQUIRE(sol.lambda == 0.0);
  for (size_t i = 0; i < 3; ++i) {
    REQUIRE(sol.p_star[i] == Catch::Approx(std::vector<real>{0.25, 0.5, 0.1}[i]).margin(1e-15));
    REQUIRE(sol.mu_plus[i] == 0.0);
    REQUIRE(sol.mu_minus[i] == 0.0);
    REQUIRE(sol.zeta[i] == 0.0);
  }
}

TEST_CASE("project_kkt symmetric shift example: (0.9, 0.9) with cap 1") {
  ConstraintSet c;
  c.sum_cap = 1.0;
  DualSolution sol = loss::project_kkt({0.9, 0.9}, c);
  REQUIRE(sol.p_star[0] == Catch::Approx(0.5).margin(1e-10));
  REQUIRE(sol.p_star[1] == Catch::Approx(0.5).margin(1e-10));
  REQUIRE(sol.lambda == Catch::Approx(0.4).margin(1e-10));
  REQUIRE(sol.max_slackness_residual <= 1e-8);
}

TEST_CASE("project_kkt detects infeasible constraint sets") {
  ConstraintSet c;
  c.lower = {0.6};
  c.upper = {1.0};
  c.sum_cap = 1.0;
  REQUIRE_THROWS_AS(loss::project_kkt({0.5, 0.5, 0.5}, c), InfeasibilityError);
}

TEST_CASE("constraint set validation") {
  ConstraintSet c;
  c.lower = {-0.1};
  REQUIRE_THROWS_AS(c.validate(3), ConfigError);
  c.lower = {0.5};
  c.upper = {0.2};
  REQUIRE_THROWS_AS(c.validate(3), ConfigError);
  c = ConstraintSet{};
  c.sum_cap = -1.0;
  REQUIRE_THROWS_AS(c.validate(2), ConfigError);
}

TEST_CASE("project_kkt matches active-set enumeration on random instances") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(7));  // up to 8
    std::vector<real> p(static_cast<size_t>(n)), lo(static_cast<size_t>(n)), hi(static_cast<size_t>(n));
    real sum_lo = 0.0;
    for (int i = 0; i < n; ++i) {
      p[static_cast<size_t>(i)] = rng.uniform(-0.5, 1.5);
      lo[static_cast<size_t>(i)] = rng.uniform(0.0, 0.3);
      hi[static_cast<size_t>(i)] = lo[static_cast<size_t>(i)] + rng.uniform(0.05, 1.0);
      sum_lo += lo[static_cast<size_t>(i)];
    }
    const real cap = sum_lo + rng.uniform(0.01, 1.5);
    ConstraintSet c;
    c.lower = lo;
    c.upper = hi;
    c.sum_cap = cap;

    DualSolution sol = loss::project_kkt(p, c);
    auto oracle = testutil::oracle_project_enum(p, lo, hi, cap);
    REQUIRE(oracle.feasible);
    for (int i = 0; i < n; ++i)
      REQUIRE(sol.p_star[static_cast<size_t>(i)] ==
              Catch::Approx(oracle.p_star[static_cast<size_t>(i)]).margin(1e-6));
    REQUIRE(sol.max_stationarity_residual <= 1e-8);
    REQUIRE(sol.max_feasibility_residual <= 1e-8);
    REQUIRE(sol.max_slackness_residual <= 1e-8);
  }
}

TEST_CASE("projection is idempotent and feasible") {
  Rng rng(4);
  ConstraintSet c;
  c.sum_cap = 2.0;
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<real> p(6);
    for (auto& v : p) v = rng.uniform(-0.5, 2.0);
    DualSolution first = loss::project_kkt(p, c);
    DualSolution second = loss::project_kkt(first.p_star, c);
    real sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      REQUIRE(std::abs(second.p_star[i] - first.p_star[i]) <= 1e-10);
      REQUIRE(first.p_star[i] >= -1e-10);
      REQUIRE(first.p_star[i] <= 1.0 + 1e-10);
      sum += first.p_star[i];
    }
    REQUIRE(sum <= c.sum_cap + 1e-10);
  }
}

TEST_CASE("projection onto the convex feasible set is non-expansive") {
  Rng rng(5);
  ConstraintSet c;
  c.sum_cap = 1.5;
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<real> a(5), b(5);
    for (size_t i = 0; i < 5; ++i) {
      a[i] = rng.uniform(-1.0, 2.0);
      b[i] = rng.uniform(-1.0, 2.0);
    }
    auto pa = loss::project_kkt(a, c).p_star;
    auto pb = loss::project_kkt(b, c).p_star;
    real dp = 0.0, dx = 0.0;
    for (size_t i = 0; i < 5; ++i) {
      dp += (pa[i] - pb[i]) * (pa[i] - pb[i]);
      dx += (a[i] - b[i]) * (a[i] - b[i]);
    }
    REQUIRE(std::sqrt(dp) <= std::sqrt(dx) + 1e-12);
  }
}

TEST_CASE("l2 ball projection: unit-ball scaling of (3,4)") {
  const auto w = loss::project_weights_l2ball({3.0, 4.0}, 1.0);
  REQUIRE(w[0] == Catch::Approx(0.6).margin(1e-12));
  REQUIRE(w[1] == Catch::Approx(0.8).margin(1e-12));
}

TEST_CASE("l2 ball projection: interior points are untouched") {
  const std::vector<real> w = {0.5, -0.25, 0.1};
  REQUIRE(loss::project_weights_l2ball(w, 10.0) == w);
}

TEST_CASE("l2 ball projection: norm identity and direction preservation") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<real> w(8);
    for (auto& v : w) v = rng.normal(0.0, 2.0);
    const real cap = rng.uniform(0.5, 30.0);
    const auto out = loss::project_weights_l2ball(w, cap);
    real sq_in = 0.0, sq_out = 0.0, dot = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      sq_in += w[i] * w[i];
      sq_out += out[i] * out[i];
      dot += w[i] * out[i];
    }
    REQUIRE(sq_out == Catch::Approx(std::min(sq_in, cap)).margin(1e-9));
    // parallel: cauchy-schwarz equality
    REQUIRE(dot * dot == Catch::Approx(sq_in * sq_out).margin(1e-9));
  }
}

TEST_CASE("kkt_project_rows routes gradients through the clip mask only") {
  Rng rng(7);
  ConstraintSet c;
  Tensor p = Tensor::from({1, 4}, {0.2, 0.9, 1.4, -0.3});
  p.set_requires_grad(true);
  Tensor out = loss::kkt_project_rows(p, c, {10.0});  // cap inactive
  Tensor probe = Tensor::randn({1, 4}, rng);
  sum_all(mul(out, probe)).backward();
  // 0.2 and 0.9 are interior; 1.4 clips at 1, -0.3 clips at 0
  REQUIRE(p.grad()[0] == probe.data()[0]);
  REQUIRE(p.grad()[1] == probe.data()[1]);
  REQUIRE(p.grad()[2] == 0.0);
  REQUIRE(p.grad()[3] == 0.0);
}

TEST_CASE("ldc_loss equals the plain consistency loss when constraints are inactive") {
  Rng rng(8);
  LdcParams prm;
  LdcKnobs knobs;
  knobs.s_factor = 1e6;  // sum caps far above any feasible mass
  const int64_t b = 2, h = 4, w = 4;
  Tensor student = Tensor::rand_uniform({b, 3, h, w}, rng, 0.05, 0.45);
  Tensor teacher = Tensor::rand_uniform({b, 3, h, w}, rng, 0.05, 0.45);
  auto res = loss::ldc_loss(student, teacher, knobs, prm);
  Tensor s1 = reshape(narrow(student, 1, 1, 1), {b * h * w});
  Tensor s2 = reshape(narrow(student, 1, 2, 1), {b * h * w});
  Tensor y1 = reshape(narrow(teacher, 1, 1, 1), {b * h * w});
  Tensor y2 = reshape(narrow(teacher, 1, 2, 1), {b * h * w});
  Tensor direct = loss::consistency_loss(s1, s2, y1, y2, prm);
  REQUIRE(res.loss.item() == Catch::Approx(direct.item()).margin(1e-12));
}

TEST_CASE("ldc_loss at the self-consistent point equals the consistency loss there") {
  Rng rng(9);
  LdcParams prm;
  LdcKnobs knobs;  // default 1.05 factor
  const int64_t b = 1, h = 4, w = 4;
  Tensor student = Tensor::rand_uniform({b, 3, h, w}, rng, 0.1, 0.4);
  auto res = loss::ldc_loss(student, student, knobs, prm);
  // teacher == student and caps are 1.05x the teacher mass, so the
  // projection is the identity and the loss sits at the self-consistent point
  Tensor s1 = reshape(narrow(student, 1, 1, 1), {b * h * w});
  Tensor s2 = reshape(narrow(student, 1, 2, 1), {b * h * w});
  Tensor direct = loss::consistency_loss(s1, s2, s1, s2, prm);
  REQUIRE(res.loss.item() == Catch::Approx(direct.item()).margin(1e-12));
}

TEST_CASE("ldc_loss matches the project-then-score oracle composition") {
  Rng rng(10);
  LdcParams prm;
  LdcKnobs knobs;
  knobs.s_factor = 0.9;  // deliberately tight so the projection is active
  const int64_t b = 2, h = 3, w = 3;
  Tensor student = Tensor::rand_uniform({b, 3, h, w}, rng, 0.05, 0.95);
  Tensor teacher = Tensor::rand_uniform({b, 3, h, w}, rng, 0.05, 0.95);
  auto res = loss::ldc_loss(student, teacher, knobs, prm);

  // oracle: per image and foreground class, project with the same cap rule,
  // then evaluate the straight-line formula
  std::vector<real> proj1, proj2, t1v, t2v;
  for (int64_t ch : {int64_t{1}, int64_t{2}}) {
    for (int64_t i = 0; i < b; ++i) {
      std::vector<real> row(static_cast<size_t>(h * w)), target(static_cast<size_t>(h * w));
      real mass = 0.0;
      for (int64_t j = 0; j < h * w; ++j) {
        row[static_cast<size_t>(j)] = student.data()[(i * 3 + ch) * h * w + j];
        target[static_cast<size_t>(j)] = teacher.data()[(i * 3 + ch) * h * w + j];
        mass += target[static_cast<size_t>(j)];
      }
      ConstraintSet c;
      c.sum_cap = std::max(knobs.s_factor * mass, 1e-6);
      auto sol = loss::project_kkt(row, c);
      auto& dst = ch == 1 ? proj1 : proj2;
      auto& tdst = ch == 1 ? t1v : t2v;
      dst.insert(dst.end(), sol.p_star.begin(), sol.p_star.end());
      tdst.insert(tdst.end(), target.begin(), target.end());
    }
  }
  const real expected =
      testutil::oracle_consistency_loss(proj1, proj2, t1v, t2v, prm.alpha, prm.beta1, prm.beta2, prm.eps);
  REQUIRE(res.loss.item() == Catch::Approx(expected).margin(1e-10));
}

TEST_CASE("ldc_loss gradient vs finite differences with inactive constraints") {
  Rng rng(11);
  LdcParams prm;
  LdcKnobs knobs;
  knobs.s_factor = 1e6;
  Tensor student = Tensor::rand_uniform({1, 3, 3, 3}, rng, 0.1, 0.4);
  Tensor teacher = Tensor::rand_uniform({1, 3, 3, 3}, rng, 0.1, 0.4);
  student.set_requires_grad(true);
  auto fwd = [&] { return loss::ldc_loss(student, teacher, knobs, prm).loss; };
  REQUIRE(max_rel_grad_error(fwd, {student}) < 1e-4);
}
