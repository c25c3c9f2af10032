#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "gradsel/errors.hpp"
#include "gradsel/optstate.hpp"
#include "oracles.hpp"

using namespace gradsel;
using namespace gradsel::optstate;
using gradcore::Index;
using gradcore::LayerShape;

namespace {

ValAggregate agg_of(const std::vector<Matrix>& ms) {
  ValAggregate a;
  for (std::size_t i = 0; i < ms.size(); ++i) a.layer_ids.push_back(static_cast<int>(i));
  a.per_layer = ms;
  a.count = 1;
  return a;
}

}  // namespace

TEST_CASE("sgd_apply") {
  Vector g(2);
  g << 1, -2;
  Vector expect(2);
  expect << -0.5, 1.0;
  CHECK(sgd_apply(g, 0.5) == expect);
  CHECK(sgd_apply(Vector::Zero(3), 0.1).isZero(0.0));

  Vector h(2);
  h << 0.25, 4;
  CHECK((sgd_apply(g, 0.5) + sgd_apply(h, 0.5) - sgd_apply(g + h, 0.5)).norm() < 1e-15);

  g[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sgd_apply(g, 0.1), NumericError);
}

TEST_CASE("adam_update first step and recurrence") {
  AdamState s;
  s.eps = 1e-12;
  for (double c : {0.01, 1.0, 37.0}) {
    const auto r = adam_update(s, Vector::Constant(4, c), 0.1);
    CHECK(r.state.t == 1);
    for (Index i = 0; i < 4; ++i) CHECK(r.delta[i] == doctest::Approx(-0.1).epsilon(1e-6));
  }

  AdamState a;
  oracle::ScalarAdam ref;
  const double gs[] = {0.3, 0.3, -1.2, 2.0};
  for (double g : gs) {
    const auto r = adam_update(a, Vector::Constant(1, g), 0.01);
    const double expect = ref.step(g, 0.01, 0.9, 0.999, 1e-8);
    CHECK(std::abs(r.delta[0] - expect) <= 1e-12 * std::abs(expect));
    CHECK(r.state.t == a.t + 1);
    CHECK(r.state.v[0] >= 0.0);
    a = r.state;
  }

  Vector bad = Vector::Ones(2);
  bad[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_update(AdamState{}, bad, 0.1), NumericError);
  CHECK_THROWS_AS(adam_update(a, Vector::Ones(3), 0.1), ShapeError);
}

TEST_CASE("adam and sgd agree on sign pattern without moment memory") {
  std::mt19937_64 rng(3);
  AdamState s;
  s.beta1 = 0.0;
  s.beta2 = 0.0;
  s.eps = 1e-14;
  const Vector g = oracle::randn(rng, 10, 1);
  const Vector da = adam_update(s, g, 0.1).delta, ds = sgd_apply(g, 0.1);
  for (Index i = 0; i < 10; ++i) CHECK((da[i] > 0) == (ds[i] > 0));
}

TEST_CASE("projected moment recurrence") {
  const std::vector<LayerShape> shapes{{0, 2, 3}, {1, 4, 1}};
  const auto pm0 = ProjectedMoment::zeros(shapes, 0.9, 0.999, 1e-8);
  const auto ones = agg_of({Matrix::Ones(2, 3), Matrix::Ones(4, 1)});
  const auto pm1 = projected_moment_update(pm0, ones);
  CHECK(pm1.t == 1);
  CHECK((pm1.per_layer[0].array() - 0.001).abs().maxCoeff() < 1e-18);

  const auto zeros = agg_of({Matrix::Zero(2, 3), Matrix::Zero(4, 1)});
  const auto pm2 = projected_moment_update(pm1, zeros);
  CHECK((pm2.per_layer[1] - 0.999 * pm1.per_layer[1]).norm() < 1e-18);

  std::mt19937_64 rng(5);
  auto pm = pm0;
  Matrix v = Matrix::Zero(2, 3);
  for (int step = 0; step < 3; ++step) {
    const Matrix g = oracle::randn(rng, 2, 3);
    pm = projected_moment_update(pm, agg_of({g, oracle::randn(rng, 4, 1)}));
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 3; ++j) v(i, j) = 0.999 * v(i, j) + 0.001 * g(i, j) * g(i, j);
  }
  CHECK((pm.per_layer[0] - v).cwiseAbs().maxCoeff() < 1e-15);

  CHECK_THROWS_AS(projected_moment_update(pm0, agg_of({Matrix::Ones(2, 3)})), ShapeError);
  CHECK_THROWS_AS(projected_moment_update(pm0, agg_of({Matrix::Ones(3, 2), Matrix::Ones(4, 1)})),
                  ShapeError);
}

TEST_CASE("linearized preconditioner") {
  const std::vector<LayerShape> shapes{{0, 3, 2}};
  auto pm = ProjectedMoment::zeros(shapes, 0.9, 0.999, 1e-8);
  auto d0 = linearized_preconditioner(pm);
  CHECK((d0.per_layer[0].array() - 1e8).abs().maxCoeff() <= 1e-6);
  pm.t = 1;
  CHECK((linearized_preconditioner(pm).per_layer[0].array() - 1e8).abs().maxCoeff() <= 1e-6);

  pm.per_layer[0].setConstant(1e300);
  const auto dinf = linearized_preconditioner(pm);
  CHECK(dinf.per_layer[0].maxCoeff() > 0.0);
  CHECK(dinf.per_layer[0].maxCoeff() < 1e-140);

  std::mt19937_64 rng(9);
  auto p = ProjectedMoment::zeros(shapes, 0.9, 0.999, 1e-8);
  for (int i = 0; i < 10; ++i) p = projected_moment_update(p, agg_of({oracle::randn(rng, 3, 2)}));
  const auto d = linearized_preconditioner(p);
  CHECK(d.source_step == 10);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 2; ++j) {
      const double ref = oracle::preconditioner_entry(p.per_layer[0](i, j), 10, 0.9, 0.999, 1e-8);
      CHECK(std::abs(d.per_layer[0](i, j) - ref) <= 1e-12 * ref);
      CHECK(d.per_layer[0](i, j) > 0.0);
      CHECK(d.per_layer[0](i, j) <= 1.0 / 1e-8);
    }

  // Monotone decreasing in V.
  auto q = p;
  q.per_layer[0](0, 0) *= 4.0;
  CHECK(linearized_preconditioner(q).per_layer[0](0, 0) < d.per_layer[0](0, 0));
}

TEST_CASE("precondition_target and the adjoint transfer") {
  std::mt19937_64 rng(13);
  const Matrix m = oracle::randn(rng, 3, 4);
  const auto target = agg_of({m});
  Preconditioner ones;
  ones.layer_ids = {0};
  ones.per_layer = {Matrix::Ones(3, 4)};
  const auto same = precondition_target(target, ones);
  CHECK(same.preconditioned);
  CHECK(same.per_layer[0] == m);
  CHECK_THROWS_AS(precondition_target(same, ones), NumericError);

  Preconditioner d;
  d.layer_ids = {0};
  d.per_layer = {oracle::randn(rng, 3, 4).cwiseAbs()};
  const auto pt = precondition_target(target, d);
  for (int c = 0; c < 5; ++c) {
    const Matrix cand = oracle::randn(rng, 3, 4);
    double lhs = 0.0, rhs = 0.0;
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 4; ++j) {
        lhs += pt.per_layer[0](i, j) * cand(i, j);
        rhs += m(i, j) * (d.per_layer[0](i, j) * cand(i, j));
      }
    CHECK(std::abs(lhs - rhs) <= 1e-12 * (1.0 + std::abs(lhs)));
  }

  Preconditioner single;
  single.layer_ids = {0};
  single.per_layer = {Matrix::Zero(3, 4)};
  single.per_layer[0](1, 2) = 1.0;
  const auto st = precondition_target(target, single);
  gradcore::ProjectedSample x;
  x.layers.push_back(gradcore::FactorPair{0, oracle::randn(rng, 3, 1), oracle::randn(rng, 4, 1)});
  const double expect = m(1, 2) * x.layers[0].activations(1, 0) * x.layers[0].out_grads(2, 0);
  CHECK(gradcore::inner_reordered(x, st) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("optimizer checkpoint round trip") {
  std::mt19937_64 rng(17);
  OptimizerCheckpoint ck;
  ck.adam = adam_update(AdamState{}, oracle::randn(rng, 7, 1), 0.1).state;
  const std::vector<LayerShape> shapes{{0, 2, 3}, {1, 1, 4}};
  ck.moment = ProjectedMoment::zeros(shapes, 0.8, 0.99, 1e-6);
  ck.moment = projected_moment_update(ck.moment, agg_of({oracle::randn(rng, 2, 3), oracle::randn(rng, 1, 4)}));
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const auto back = read_checkpoint(ss);
  CHECK(back.adam.t == ck.adam.t);
  CHECK(back.adam.m == ck.adam.m);
  CHECK(back.adam.v == ck.adam.v);
  CHECK(back.adam.beta1 == ck.adam.beta1);
  CHECK(back.moment.t == 1);
  CHECK(back.moment.beta2 == 0.99);
  CHECK(back.moment.eps == 1e-6);
  REQUIRE(back.moment.per_layer.size() == 2);
  CHECK(back.moment.per_layer[1] == ck.moment.per_layer[1]);
}
