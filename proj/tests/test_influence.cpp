#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ibtl/influence.hpp"
#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"

using namespace ibtl;

namespace {

struct Instance {
  ArchitectureSpec spec;
  ParameterVector params;
  Matrix xs;
  std::vector<int> ys;
  Matrix val_xs;
  std::vector<int> val_ys;
};

// round-robin labels, gaussian features around mild class means
Instance make_instance(std::size_t d, std::size_t k, std::size_t n_train, std::size_t n_val,
                       double lambda, std::uint64_t seed,
                       std::vector<std::size_t> hidden = {}) {
  Instance ins;
  ins.spec.input_dim = d;
  ins.spec.num_classes = k;
  ins.spec.l2_lambda = lambda;
  ins.spec.hidden_dims = std::move(hidden);
  RngStream rng(seed);
  Matrix means(k, d);
  for (double& v : means.data) v = 2.0 * rng.next_normal();
  auto fill = [&](Matrix& xs, std::vector<int>& ys, std::size_t n) {
    xs = Matrix(n, d);
    ys.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      ys[i] = static_cast<int>(i % k);
      for (std::size_t j = 0; j < d; ++j)
        xs(i, j) = means(ys[i], j) + 0.8 * rng.next_normal();
    }
  };
  fill(ins.xs, ins.ys, n_train);
  fill(ins.val_xs, ins.val_ys, n_val);
  ins.params = init_xavier(ins.spec, rng);
  return ins;
}

double vec_rel_err(const Vector& got, const Vector& want) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff += (got[i] - want[i]) * (got[i] - want[i]);
    ref += want[i] * want[i];
  }
  return ref == 0.0 ? std::sqrt(diff) : std::sqrt(diff / ref);
}

Vector grad_sum(const GradEngine& eng, const Batch& val, const std::vector<std::size_t>& idx) {
  Vector g(eng.param_count(), 0.0);
  for (std::size_t j : idx) axpy(1.0, eng.grad(val[j], false), g);
  return g;
}

}  // namespace

TEST_CASE("ihvp on an identity Hessian returns b for all strategies", "[influence]") {
  // saturated margin: data term vanishes exactly; lambda = 0, damping = 1
  ArchitectureSpec spec;
  spec.input_dim = 1;
  spec.num_classes = 2;
  spec.l2_lambda = 0.0;
  ParameterVector pv = ParameterVector::zeros(spec);
  pv.values = {500.0, -500.0, 0.0, 0.0};
  GradEngine eng(spec, pv);
  Vector x{1.0};
  Batch train{{x.data(), 0}};
  Vector b{1.5, -2.0, 0.5, 3.0};

  for (IhvpKind kind : {IhvpKind::kExplicit, IhvpKind::kCg, IhvpKind::kLissa}) {
    IhvpStrategy st;
    st.kind = kind;
    st.damping = 1.0;
    st.lissa_scale = 2.0;
    st.lissa_depth = 200;
    st.lissa_repeats = 3;
    st.lissa_batch = 1;
    st.lissa_seed = 4;
    Vector s = ihvp(eng, train, b, st);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(std::fabs(s[i] - b[i]) <= 1e-12);
  }
}

TEST_CASE("ihvp cg agrees with explicit on a linear instance", "[influence]") {
  Instance ins = make_instance(8, 5, 60, 12, 0.01, 42);  // p = 45
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  ValidationReference ref = resolve_reference(ins.val_ys, ValidationReference::Mode::kAll);
  Vector b = grad_sum(eng, val, ref.indices);

  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;
  IhvpStrategy cg;
  cg.kind = IhvpKind::kCg;
  Vector se = ihvp(eng, train, b, ex);
  Vector sc = ihvp(eng, train, b, cg);
  CHECK(vec_rel_err(sc, se) <= 1e-6);
}

TEST_CASE("ihvp lissa tracks explicit within a few percent", "[influence]") {
  Instance ins = make_instance(5, 3, 50, 10, 0.01, 7);  // p = 18
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  ValidationReference ref = resolve_reference(ins.val_ys, ValidationReference::Mode::kAll);
  Vector b = grad_sum(eng, val, ref.indices);

  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;
  Vector se = ihvp(eng, train, b, ex);

  // scale from the explicit matrix: max row sum bounds the spectral norm
  Matrix h = eng.build_hessian(train, 0.0);
  double scale = 0.0;
  for (std::size_t i = 0; i < h.rows; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < h.cols; ++j) row += std::fabs(h(i, j));
    scale = std::max(scale, row);
  }

  std::vector<double> errs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    IhvpStrategy li;
    li.kind = IhvpKind::kLissa;
    li.lissa_scale = 1.1 * scale;
    li.lissa_depth = 3000;
    li.lissa_batch = 8;
    li.lissa_repeats = 10;
    li.lissa_seed = seed;
    errs.push_back(vec_rel_err(ihvp(eng, train, b, li), se));
  }
  std::sort(errs.begin(), errs.end());
  CHECK(errs[errs.size() / 2] <= 0.05);
}

TEST_CASE("ihvp lissa with an undersized scale reports divergence", "[influence]") {
  Instance ins = make_instance(5, 3, 40, 8, 0.01, 9);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Vector b(eng.param_count(), 1.0);
  IhvpStrategy li;
  li.kind = IhvpKind::kLissa;
  li.lissa_scale = 1e-4;
  li.lissa_depth = 5000;
  li.lissa_seed = 1;
  try {
    ihvp(eng, train, b, li);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("increase the scale") != std::string::npos);
  }
}

TEST_CASE("ihvp requires damping for non-convex models", "[influence]") {
  Instance ins = make_instance(4, 3, 20, 5, 0.01, 3, {6});
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  IhvpStrategy st;
  st.kind = IhvpKind::kCg;
  st.damping = 0.0;
  CHECK_THROWS_AS(ihvp(eng, train, Vector(eng.param_count(), 1.0), st), DataError);
  // damping must dominate the most negative curvature for the solve to work
  st.damping = 100.0;
  CHECK_NOTHROW(ihvp(eng, train, Vector(eng.param_count(), 1.0), st));
}

TEST_CASE("ihvp explicit linearity and scaling", "[influence]") {
  Instance ins = make_instance(5, 3, 30, 6, 0.02, 12);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;
  Vector g = grad_sum(eng, val, {0, 1, 2});
  Vector s1 = ihvp(eng, train, g, ex);
  Vector g3 = g;
  scale(3.0, g3);
  Vector s3 = ihvp(eng, train, g3, ex);
  for (std::size_t i = 0; i < s1.size(); ++i)
    CHECK(std::fabs(s3[i] - 3.0 * s1[i]) <= 1e-10 * std::max(1.0, std::fabs(3.0 * s1[i])));
}

TEST_CASE("resolve_reference modes and errors", "[influence]") {
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < 40; ++i) labels[i] = static_cast<int>(i % 5);
  ValidationReference all = resolve_reference(labels, ValidationReference::Mode::kAll);
  CHECK(all.indices.size() == 40);
  CHECK(all.describe() == "all");

  std::vector<int> mixed{0, 3, 1, 3, 3, 2, 3, 3, 0, 3, 3};  // seven 3s
  ValidationReference c3 =
      resolve_reference(mixed, ValidationReference::Mode::kClassRestricted, 3);
  CHECK(c3.indices == std::vector<std::size_t>{1, 3, 4, 6, 7, 9, 10});
  CHECK(c3.describe() == "class:3");
  for (std::size_t j : c3.indices) CHECK(mixed[j] == 3);

  CHECK_THROWS_AS(resolve_reference(mixed, ValidationReference::Mode::kClassRestricted, 9),
                  DataError);
  CHECK_THROWS_AS(resolve_reference({}, ValidationReference::Mode::kAll), DataError);
}

TEST_CASE("influence_pair of a zero-gradient validation sample is zero", "[influence]") {
  Instance ins = make_instance(5, 3, 30, 6, 0.01, 21);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  // saturated validation sample: amplifying the class-0 weight row direction
  // until every losing-class probability underflows to exactly zero
  Vector vx(5, 0.0);
  for (std::size_t j = 0; j < 5; ++j) vx[j] = 1e6 * ins.params.values[j];
  Vector p = eng.forward(vx);
  std::size_t arg = 0;
  for (std::size_t k2 = 1; k2 < p.size(); ++k2)
    if (p[k2] > p[arg]) arg = k2;
  REQUIRE(p[arg] == 1.0);
  for (std::size_t k2 = 0; k2 < p.size(); ++k2)
    if (k2 != arg) REQUIRE(p[k2] == 0.0);
  SampleRef val_sample{vx.data(), static_cast<int>(arg)};
  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;
  CHECK(influence_pair(eng, train, train[0], val_sample, ex) == 0.0);
}

TEST_CASE("self-influence is nonpositive", "[influence]") {
  Instance ins = make_instance(5, 3, 40, 8, 0.01, 33);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(influence_pair(eng, train, train[i], train[i], ex) <= 0.0);
}

TEST_CASE("influence_total equals pair on a singleton and adds over references",
          "[influence]") {
  Instance ins = make_instance(5, 3, 30, 9, 0.01, 55);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;

  ValidationReference solo;
  solo.indices = {4};
  const double total = influence_total(eng, train, train[2], val, solo, ex);
  const double pair = influence_pair(eng, train, train[2], val[4], ex);
  CHECK(total == Catch::Approx(pair).margin(1e-12));

  ValidationReference a, b, ab;
  a.indices = {0, 1, 2};
  b.indices = {3, 5, 7};
  ab.indices = {0, 1, 2, 3, 5, 7};
  const double ta = influence_total(eng, train, train[2], val, a, ex);
  const double tb = influence_total(eng, train, train[2], val, b, ex);
  const double tab = influence_total(eng, train, train[2], val, ab, ex);
  CHECK(std::fabs(tab - (ta + tb)) <= 1e-9);
}

TEST_CASE("shared solve matches the naive per-pair sum", "[influence]") {
  Instance ins = make_instance(5, 3, 25, 8, 0.01, 70);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  ValidationReference ref = resolve_reference(ins.val_ys, ValidationReference::Mode::kAll);
  IhvpStrategy ex;
  ex.kind = IhvpKind::kExplicit;

  InfluenceScorer scorer(eng, train, val, ref, ex);
  for (std::size_t i = 0; i < 5; ++i) {
    double naive = 0.0;
    for (std::size_t j : ref.indices) naive += influence_pair(eng, train, train[i], val[j], ex);
    const double shared = scorer.score(train[i]);
    CHECK(std::fabs(shared - naive) <= 1e-8 * std::max(1.0, std::fabs(naive)));
  }
}

TEST_CASE("influence values are deterministic across runs", "[influence]") {
  Instance ins = make_instance(5, 3, 30, 6, 0.01, 88);
  GradEngine eng(ins.spec, ins.params);
  Batch train = make_batch(ins.xs, ins.ys);
  Batch val = make_batch(ins.val_xs, ins.val_ys);
  ValidationReference ref = resolve_reference(ins.val_ys, ValidationReference::Mode::kAll);
  for (IhvpKind kind : {IhvpKind::kExplicit, IhvpKind::kCg, IhvpKind::kLissa}) {
    IhvpStrategy st;
    st.kind = kind;
    st.lissa_scale = 60.0;
    st.lissa_depth = 300;
    st.lissa_repeats = 2;
    st.lissa_seed = 5;
    InfluenceScorer s1(eng, train, val, ref, st);
    InfluenceScorer s2(eng, train, val, ref, st);
    for (std::size_t i = 0; i < train.size(); ++i)
      REQUIRE(s1.score(train[i]) == s2.score(train[i]));
  }
}
