#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "gradsel/errors.hpp"
#include "gradsel/selector.hpp"
#include "oracles.hpp"

using namespace gradsel;
using namespace gradsel::selector;
using gradcore::LayerShape;

namespace {

struct VecProblem {
  std::vector<Vector> cands;
  Vector target;
  std::vector<ProjectedSample> samples;
  ValAggregate raw;
  ValAggregate pre;
  optstate::Preconditioner ones;
};

VecProblem make_problem(const std::vector<Vector>& cands, const Vector& target) {
  VecProblem p;
  p.cands = cands;
  p.target = target;
  for (std::size_t i = 0; i < cands.size(); ++i)
    p.samples.push_back(oracle::vector_sample(cands[i], static_cast<std::int64_t>(i)));
  p.raw = oracle::vector_target(target);
  const std::vector<LayerShape> shapes{{0, target.size(), 1}};
  p.ones = optstate::Preconditioner::ones(shapes);
  p.pre = optstate::precondition_target(p.raw, p.ones);
  return p;
}

VecProblem random_problem(std::mt19937_64& rng, int n, Index dim) {
  std::vector<Vector> c;
  for (int i = 0; i < n; ++i) c.push_back(oracle::randn(rng, dim, 1));
  return make_problem(c, oracle::randn(rng, dim, 1));
}

Vector e(Index dim, Index i) { return Vector::Unit(dim, i); }

GramSystem spd_system(std::mt19937_64& rng, Index n, double lambda) {
  const Matrix X = oracle::randn(rng, n + 3, n);
  GramSystem s;
  s.G = X.transpose() * X;
  const Vector t = oracle::randn(rng, n + 3, 1);
  s.b = X.transpose() * t;
  s.target_sq_norm = t.squaredNorm();
  s.lambda = lambda;
  return s;
}

std::vector<Index> all_of(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

}  // namespace

TEST_CASE("build_gram_system") {
  const Vector t = (Vector(3) << 1, 2, -1).finished();
  auto p = make_problem({t}, t);
  auto sys = build_gram_system(p.samples, p.raw, p.pre, 0.0);
  CHECK(sys.b[0] == doctest::Approx(6.0));
  CHECK(sys.G(0, 0) == doctest::Approx(6.0));
  CHECK(sys.target_sq_norm == doctest::Approx(6.0));

  auto q = make_problem({e(3, 0), 2.0 * e(3, 1), e(3, 2)}, t);
  sys = build_gram_system(q.samples, q.raw, q.pre, 0.0);
  CHECK(sys.G.isDiagonal(0.0));

  std::mt19937_64 rng(2);
  std::vector<ProjectedSample> cands;
  const oracle::Dims d{{{4, 3}, {2, 5}}, 3};
  for (int i = 0; i < 6; ++i) cands.push_back(oracle::random_sample<ProjectedSample>(rng, d));
  std::vector<ProjectedSample> val{oracle::random_sample<ProjectedSample>(rng, d)};
  const auto raw = gradcore::val_aggregate(val);
  const auto pre = optstate::precondition_target(raw, optstate::Preconditioner::ones(std::vector<LayerShape>{{0, 4, 3}, {1, 2, 5}}));
  sys = build_gram_system(cands, raw, pre, 0.0);
  for (int i = 0; i < 6; ++i) {
    CHECK(oracle::close_rel(sys.b[i], oracle::inner(cands[static_cast<std::size_t>(i)], val[0]), 1e-9));
    for (int j = 0; j < 6; ++j)
      CHECK(oracle::close_rel(sys.G(i, j), oracle::inner(cands[static_cast<std::size_t>(i)], cands[static_cast<std::size_t>(j)]), 1e-9));
  }
  CHECK((sys.G - sys.G.transpose()).norm() == 0.0);
  CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(sys.G).eigenvalues().minCoeff() > -1e-7);

  CHECK_THROWS_AS(build_gram_system(std::vector<ProjectedSample>{}, raw, pre, 0.0), ShapeError);
}

TEST_CASE("objective_value") {
  GramSystem s;
  s.G = Matrix::Ones(1, 1);
  s.b = Vector::Ones(1);
  s.target_sq_norm = 3.0;
  CHECK(objective_value(s, Vector::Zero(1)) == 3.0);
  CHECK(objective_value(s, Vector::Ones(1)) == doctest::Approx(2.0));
  CHECK_THROWS_AS(objective_value(s, Vector::Ones(2)), ShapeError);

  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    auto p = random_problem(rng, 5, 7);
    auto sys = build_gram_system(p.samples, p.raw, p.pre, 0.3);
    const Vector w = oracle::randn(rng, 5, 1);
    Vector r = p.target;
    for (int i = 0; i < 5; ++i) r -= w[i] * p.cands[static_cast<std::size_t>(i)];
    const double ref = r.squaredNorm() + 0.3 * w.squaredNorm();
    CHECK(oracle::close_rel(objective_value(sys, w), ref, 1e-9));
  }
}

TEST_CASE("greedy_filter") {
  const Vector t = e(2, 0) + e(2, 1);
  auto p = make_problem({e(2, 0), e(2, 0), e(2, 1)}, t);
  CHECK(greedy_filter(p.samples, p.pre, 2) == std::vector<Index>{0, 2});

  auto full = greedy_filter(p.samples, p.pre, 3);
  auto sorted = full;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<Index>{0, 1, 2});

  auto orth = make_problem({e(3, 1), e(3, 2), e(3, 1)}, e(3, 0));
  CHECK(greedy_filter(orth.samples, orth.pre, 1) == std::vector<Index>{0});

  CHECK_THROWS_AS(greedy_filter(p.samples, p.pre, 4), ConfigError);

  // The residual is decremented by the raw candidate even when the target is
  // preconditioned.
  optstate::Preconditioner d;
  d.layer_ids = {0};
  d.per_layer = {(Matrix(2, 1) << 10.0, 1.0).finished()};
  const auto pre = optstate::precondition_target(oracle::vector_target(t), d);
  auto q = make_problem({e(2, 0), 0.5 * e(2, 0) + 0.1 * e(2, 1), e(2, 1)}, t);
  // r0 = (10, 1): picks 0; r1 = (9, 1): 0.5*9+0.1 = 4.6 > 1, picks 1.
  CHECK(greedy_filter(q.samples, pre, 2) == std::vector<Index>{0, 1});
  FilterOptions opt;
  opt.precondition_residual_updates = true;
  opt.preconditioner = &d;
  // r1 = (10, 1) - (10, 0) = (0, 1): picks 2.
  CHECK(greedy_filter(q.samples, pre, 2, opt) == std::vector<Index>{0, 2});
}

TEST_CASE("greedy_filter is permutation-equivariant") {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    auto p = random_problem(rng, 7, 5);
    const auto base = greedy_filter(p.samples, p.pre, 4);
    std::vector<Index> perm = all_of(7);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vector> shuffled;
    for (Index i : perm) shuffled.push_back(p.cands[static_cast<std::size_t>(i)]);
    auto q = make_problem(shuffled, p.target);
    const auto out = greedy_filter(q.samples, q.pre, 4);
    REQUIRE(out.size() == base.size());
    for (std::size_t k = 0; k < out.size(); ++k) CHECK(perm[static_cast<std::size_t>(out[k])] == base[k]);
  }
}

TEST_CASE("scaling the target leaves rankings unchanged") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    auto p = random_problem(rng, 8, 6);
    const double c = 0.1 + 10.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    auto q = make_problem(p.cands, c * p.target);
    auto s1 = build_gram_system(p.samples, p.raw, p.pre, 0.0);
    auto s2 = build_gram_system(q.samples, q.raw, q.pre, 0.0);
    CHECK((s2.b - c * s1.b).norm() <= 1e-12 * (1.0 + s2.b.norm()));
    CHECK(topk_select(s1.b, 4) == topk_select(s2.b, 4));
    CHECK(greedy_filter(p.samples, p.pre, 1) == greedy_filter(q.samples, q.pre, 1));
  }
  // With mutually orthogonal candidates the full greedy sequence is scale-free.
  std::vector<Vector> orth;
  for (Index i = 0; i < 5; ++i) orth.push_back((1.0 + 0.3 * static_cast<double>(i)) * e(5, i));
  const Vector t = (Vector(5) << 0.2, -1.0, 3.0, 0.7, 1.1).finished();
  auto a = make_problem(orth, t), b = make_problem(orth, 40.0 * t);
  CHECK(greedy_filter(a.samples, a.pre, 5) == greedy_filter(b.samples, b.pre, 5));
}

TEST_CASE("ridge_solve") {
  GramSystem s;
  s.G = Matrix::Identity(1, 1);
  s.b = Vector::Constant(1, 2.0);
  s.lambda = 1.0;
  CHECK(ridge_solve(s, std::vector<Index>{0})[0] == doctest::Approx(1.0));

  GramSystem s2;
  s2.G = Matrix::Identity(2, 2);
  s2.b = (Vector(2) << 1, -1).finished();
  const Vector w = ridge_solve(s2, all_of(2));
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == doctest::Approx(-1.0));

  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    auto sys = spd_system(rng, 4, 1e-3);
    const auto sub = all_of(4);
    const Vector x = ridge_solve(sys, sub);
    const auto ref = oracle::ridge_reference(sys, sub);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(x[static_cast<Index>(i)] - ref[i]) <= 1e-10 * (1.0 + std::abs(ref[i])));
  }

  GramSystem sing;
  sing.G = Matrix::Ones(2, 2);
  sing.b = Vector::Ones(2);
  CHECK_THROWS_AS(ridge_solve(sing, all_of(2)), NumericError);
  CHECK_THROWS_AS(ridge_solve(sing, std::vector<Index>{}), ShapeError);
}

TEST_CASE("nnls_solve") {
  GramSystem s;
  s.G = Matrix::Identity(2, 2);
  s.b = (Vector(2) << 1, -1).finished();
  const Vector w = nnls_solve(s, all_of(2));
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == 0.0);

  std::mt19937_64 rng(12);
  auto neg = spd_system(rng, 5, 0.0);
  neg.b = -neg.b.cwiseAbs();
  CHECK(nnls_solve(neg, all_of(5)).isZero(0.0));

  for (int rep = 0; rep < 10; ++rep) {
    auto sys = spd_system(rng, 5, 0.0);
    const auto sub = all_of(5);
    const Vector x = nnls_solve(sys, sub);
    CHECK(x.minCoeff() >= 0.0);
    CHECK(kkt_check(sys, sub, x).satisfied(1e-8));
    const auto ref = oracle::nnls_pgd(sys, sub, 100000);
    const double fx = objective_value(sys, x);
    const double fr = oracle::objective(sys, sub, ref);
    CHECK(fx <= fr + 1e-8 * (1.0 + std::abs(fr)));
    CHECK(std::abs(fx - fr) <= 1e-8 * (1.0 + std::abs(fr)));
  }
}

TEST_CASE("omp_select") {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 10; ++rep) {
    auto sys = spd_system(rng, 6, 0.05);
    const auto one = omp_select(sys, 1);
    Index best = 0;
    double score = -1.0;
    for (Index i = 0; i < 6; ++i) {
      const double v = sys.b[i] * sys.b[i] / (sys.G(i, i) + sys.lambda);
      if (v > score) {
        score = v;
        best = i;
      }
    }
    CHECK(one.indices == std::vector<Index>{best});
  }

  // Orthonormal basis, target in the span.
  std::vector<Vector> basis;
  for (Index i = 0; i < 4; ++i) basis.push_back(e(4, i));
  const Vector t = (Vector(4) << 0.0, 2.0, 0.0, -1.0).finished();
  auto p = make_problem(basis, t);
  auto sys = build_gram_system(p.samples, p.raw, p.pre, 1e-10);
  const auto out = omp_select(sys, 2);
  std::set<Index> got(out.indices.begin(), out.indices.end());
  CHECK(got == std::set<Index>{1, 3});
  CHECK(out.objective < 1e-9);

  // Literal trial-enumeration transcription.
  for (int rep = 0; rep < 10; ++rep) {
    auto q = random_problem(rng, 6, 5);
    auto qs = build_gram_system(q.samples, q.raw, q.pre, 0.1);
    std::vector<std::vector<double>> cands;
    for (const auto& c : q.cands) cands.emplace_back(c.data(), c.data() + c.size());
    const std::vector<double> tv(q.target.data(), q.target.data() + q.target.size());
    const auto ref = oracle::omp_literal(cands, tv, 0.1, 3);
    const auto got3 = omp_select(qs, 3);
    CHECK(got3.indices == ref.selected);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(got3.weights[static_cast<Index>(i)] - ref.weights[i]) < 1e-9);
    CHECK(oracle::close_rel(got3.objective, ref.error, 1e-9));
    CHECK(got3.residual_norm == doctest::Approx(std::sqrt(std::max(got3.objective, 0.0))));
  }

  // Objective non-increasing in the budget.
  for (int rep = 0; rep < 10; ++rep) {
    auto s = spd_system(rng, 7, 0.01);
    double prev = s.target_sq_norm;
    for (Index k = 1; k <= 7; ++k) {
      const double cur = omp_select(s, k).objective;
      CHECK(cur <= prev + 1e-10);
      prev = cur;
    }
  }
  CHECK_THROWS_AS(omp_select(spd_system(rng, 3, 0.1), 4), ConfigError);
}

TEST_CASE("topk_select") {
  const Vector s = (Vector(3) << 3, 1, 2).finished();
  CHECK(topk_select(s, 2) == std::vector<Index>{0, 2});
  CHECK(topk_select(Vector::Constant(5, 1.0), 3) == std::vector<Index>{0, 1, 2});
  CHECK(topk_select(s, 3) == std::vector<Index>{0, 2, 1});
  CHECK_THROWS_AS(topk_select(s, 4), ConfigError);
}

TEST_CASE("two_stage_select") {
  const Vector t = (Vector(3) << 1, 2, 2).finished();
  auto single = make_problem({0.5 * t}, t);
  const auto o1 = two_stage_select(single.samples, single.raw, single.pre, 1, 0.1);
  CHECK(o1.weights[0] == doctest::Approx(0.5 * 9.0 / (0.25 * 9.0 + 0.1)));

  auto exact = make_problem({e(3, 0), e(3, 1), e(3, 2)}, (Vector(3) << 1.5, 0.5, 2.0).finished());
  const auto o3 = two_stage_select(exact.samples, exact.raw, exact.pre, 3, 0.0);
  CHECK(o3.objective == doctest::Approx(0.0).epsilon(1e-12));
  const Vector full = scatter(3, o3.indices, o3.weights);
  CHECK(full[0] == doctest::Approx(1.5));
  CHECK(full[1] == doctest::Approx(0.5));
  CHECK(full[2] == doctest::Approx(2.0));

  std::mt19937_64 rng(16);
  std::vector<Vector> mixed{-t};
  for (int i = 0; i < 4; ++i) mixed.push_back(t + 0.5 * oracle::randn(rng, 3, 1));
  auto adv = make_problem(mixed, t);
  const auto o = two_stage_select(adv.samples, adv.raw, adv.pre, 5, 1e-3);
  const Vector w = scatter(5, o.indices, o.weights);
  CHECK(w[0] == 0.0);
  CHECK(w.minCoeff() >= 0.0);

  // NNLS weights beat unit weights on the same index set.
  for (int rep = 0; rep < 10; ++rep) {
    auto p = random_problem(rng, 8, 6);
    const auto out = two_stage_select(p.samples, p.raw, p.pre, 4, 1e-3);
    auto sys = build_gram_system(p.samples, p.raw, p.pre, 1e-3);
    const Vector unit = scatter(8, out.indices, Vector::Ones(4));
    CHECK(out.objective <= objective_value(sys, unit) + 1e-10);
    CHECK(out.weights.minCoeff() >= 0.0);
    std::set<Index> uniq(out.indices.begin(), out.indices.end());
    CHECK(uniq.size() == out.indices.size());
  }
}

TEST_CASE("utility evaluators") {
  CHECK(shapley_first_order(1.0, 2.0, 0.1) == doctest::Approx(-0.2));
  CHECK(shapley_first_order(0.0, 2.0, 0.1) == 0.0);

  // One-parameter model l(theta) = 0.5 (theta - 1)^2 on validation; the
  // sample gradient is g_i, the validation gradient g_v. One SGD step with
  // weight w changes the validation loss by about -lr w g_v g_i.
  const double theta = 0.3, gi = -0.8, lr = 1e-4, w = 1.5;
  auto lv = [](double th) { return 0.5 * (th - 1.0) * (th - 1.0); };
  const double gv = theta - 1.0;
  const double dl = lv(theta - lr * w * gi) - lv(theta);
  CHECK(std::abs(shapley_first_order(w, gv * gi, lr) - dl) < 1e-5);
  CHECK(std::abs(shapley_first_order(w, gv * gi, lr) - dl) < 1e-2 * std::abs(dl));

  std::mt19937_64 rng(18);
  for (int rep = 0; rep < 20; ++rep) {
    auto sys = spd_system(rng, 5, 0.0);
    const Vector wv = oracle::randn(rng, 5, 1);
    CHECK(oracle::close_rel(objective_value(sys, wv) - sys.target_sq_norm,
                            2.0 * second_order_utility(sys, wv, 1.0), 1e-9));
    CHECK(second_order_utility(sys, Vector::Zero(5), 0.3) == 0.0);
    const double lin = -wv.dot(sys.b), quad = 0.5 * wv.dot(sys.G * wv);
    CHECK(oracle::close_rel(second_order_utility(sys, wv, 2.0), 2.0 * lin + 4.0 * quad, 1e-12));
  }
  CHECK_THROWS_AS(second_order_utility(spd_system(rng, 3, 0.0), Vector::Ones(2), 1.0), ShapeError);
}

TEST_CASE("alignment_l2_check") {
  const Vector v = (Vector(3) << 1, -2, 0.5).finished();
  const std::vector<Vector> pm{v, -v};
  auto a = alignment_l2_check(v, pm);
  CHECK(a.argmax_ip == 0);
  CHECK(a.argmax_cos == 0);

  const std::vector<Vector> sc{2.0 * v, 0.5 * v};
  a = alignment_l2_check(v, sc);
  CHECK(a.argmax_ip == 0);
  CHECK(a.argmin_shifted_l2 == 0);
  CHECK(a.argmax_cos == a.argmin_unit_l2);

  std::mt19937_64 rng(20);
  for (int rep = 0; rep < 50; ++rep) {
    const Vector x = oracle::randn(rng, 8, 1);
    std::vector<Vector> c;
    for (int i = 0; i < 6; ++i) c.push_back(oracle::randn(rng, 8, 1));
    const auto r = alignment_l2_check(x, c);
    CHECK(r.argmax_ip == r.argmin_shifted_l2);
    CHECK(r.argmax_cos == r.argmin_unit_l2);
  }
  CHECK_THROWS_AS(alignment_l2_check(v, std::vector<Vector>{Vector::Zero(3)}), NumericError);
}

TEST_CASE("strategy registry") {
  for (auto s : all_strategies()) CHECK(parse_strategy(to_string(s)) == s);
  CHECK(all_strategies().size() == 9);
  CHECK_THROWS_AS(parse_strategy("tracin"), ConfigError);

  std::mt19937_64 rng(22);
  auto p = random_problem(rng, 12, 6);
  StrategyContext ctx;
  ctx.candidates = p.samples;
  ctx.raw_target = &p.raw;
  ctx.precond_target = &p.pre;
  ctx.preconditioner = &p.ones;
  ctx.budget = 4;
  ctx.random_seed = 99;
  for (auto s : all_strategies()) {
    const auto out = select(s, ctx);
    CHECK(out.indices.size() == 4);
    CHECK(out.weights.size() == 4);
    std::set<Index> uniq(out.indices.begin(), out.indices.end());
    CHECK(uniq.size() == 4);
    if (s == Strategy::two_stage || s == Strategy::grad_match || s == Strategy::vanilla_reweight ||
        s == Strategy::hard_filter_reweight)
      CHECK(out.weights.minCoeff() >= 0.0);
    const auto again = select(s, ctx);
    CHECK(again.indices == out.indices);
    CHECK(again.weights == out.weights);
  }

  // All-zero pool.
  std::vector<Vector> zeros(5, Vector::Zero(6));
  auto z = make_problem(zeros, p.target);
  ctx.candidates = z.samples;
  ctx.raw_target = &z.raw;
  ctx.precond_target = &z.pre;
  for (auto s : all_strategies()) {
    const auto out = select(s, ctx);
    CHECK(out.indices == std::vector<Index>{0, 1, 2, 3});
    CHECK(out.weights.isZero(0.0));
  }
}
