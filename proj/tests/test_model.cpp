#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"

using namespace ibtl;

namespace {

// Independent scalar re-implementation of the regularized softmax loss.
// Deliberately naive (plain exp/sum, no log-sum-exp, no shared code) so it
// can serve as a second route for the loss oracle.
double naive_loss(const ArchitectureSpec& spec, const Vector& theta, const Vector& x, int y,
                  bool include_reg) {
  const auto w = spec.widths();
  std::vector<double> a = x;
  std::size_t off = 0;
  std::vector<double> z;
  for (std::size_t k = 0; k + 1 < w.size(); ++k) {
    const std::size_t fi = w[k], fo = w[k + 1];
    z.assign(fo, 0.0);
    for (std::size_t o = 0; o < fo; ++o) {
      double s = theta[off + fi * fo + o];  // bias
      for (std::size_t i = 0; i < fi; ++i) s += theta[off + o * fi + i] * a[i];
      z[o] = s;
    }
    off += (fi + 1) * fo;
    if (k + 2 < w.size()) {
      a.resize(fo);
      for (std::size_t o = 0; o < fo; ++o)
        a[o] = spec.activation == Activation::kTanh ? std::tanh(z[o])
                                                    : std::log(1.0 + std::exp(z[o]));
    }
  }
  double denom = 0.0;
  for (double zv : z) denom += std::exp(zv);
  double l = -std::log(std::exp(z[static_cast<std::size_t>(y)]) / denom);
  if (include_reg) {
    double sq = 0.0;
    std::size_t o2 = 0;
    for (std::size_t k = 0; k + 1 < w.size(); ++k) {
      for (std::size_t i = 0; i < w[k] * w[k + 1]; ++i) sq += theta[o2 + i] * theta[o2 + i];
      o2 += (w[k] + 1) * w[k + 1];
    }
    l += 0.5 * spec.l2_lambda * sq;
  }
  return l;
}

ArchitectureSpec linear_spec(std::size_t d, std::size_t k, double lambda = 0.0) {
  ArchitectureSpec s;
  s.input_dim = d;
  s.num_classes = k;
  s.l2_lambda = lambda;
  return s;
}

ArchitectureSpec mlp_spec(std::size_t d, std::vector<std::size_t> hidden, std::size_t k,
                          Activation act, double lambda = 0.0) {
  ArchitectureSpec s;
  s.input_dim = d;
  s.hidden_dims = std::move(hidden);
  s.activation = act;
  s.num_classes = k;
  s.l2_lambda = lambda;
  return s;
}

Vector random_vec(std::size_t n, RngStream& rng, double scale = 1.0) {
  Vector v(n);
  for (double& q : v) q = scale * rng.next_normal();
  return v;
}

double vec_rel_err(const Vector& got, const Vector& want) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff += (got[i] - want[i]) * (got[i] - want[i]);
    ref += want[i] * want[i];
  }
  return ref == 0.0 ? std::sqrt(diff) : std::sqrt(diff / ref);
}

// Parameters with a huge decision margin on every sample: probabilities
// saturate exactly to {1, 0} in f64, so the data term of gradient and
// Hessian vanishes and only the regularizer remains.
GradEngine saturated_engine(double lambda) {
  ArchitectureSpec spec = linear_spec(1, 2, lambda);
  ParameterVector pv = ParameterVector::zeros(spec);
  pv.values = {500.0, -500.0, 0.0, 0.0};  // w0, w1, b0, b1
  return GradEngine(spec, pv);
}

}  // namespace

TEST_CASE("init_xavier zero biases and determinism", "[model]") {
  ArchitectureSpec spec = mlp_spec(4, {3}, 2, Activation::kTanh);
  RngStream r1(11), r2(11);
  ParameterVector a = init_xavier(spec, r1);
  ParameterVector b = init_xavier(spec, r2);
  REQUIRE(a.values == b.values);
  // biases: layer 0 occupies [0, 4*3) W + [12, 15) b; layer 1 [15, 15+6) W + [21,23) b
  for (std::size_t i = 12; i < 15; ++i) CHECK(a.values[i] == 0.0);
  for (std::size_t i = 21; i < 23; ++i) CHECK(a.values[i] == 0.0);
  CHECK(a.layer_offsets.size() == 2);
  CHECK(a.layer_offsets[1].end == spec.param_count());
}

TEST_CASE("init_xavier weight variance matches 2/(fan_in+fan_out)", "[model]") {
  ArchitectureSpec spec = linear_spec(784, 100);
  RngStream rng(321);
  double sum = 0.0, sumsq = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 10; ++rep) {
    ParameterVector pv = init_xavier(spec, rng);
    for (std::size_t i = 0; i < 784 * 100; ++i) {
      sum += pv.values[i];
      sumsq += pv.values[i] * pv.values[i];
      ++n;
    }
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  const double want = 2.0 / (784.0 + 100.0);
  CHECK(std::fabs(var - want) / want < 0.05);
}

TEST_CASE("forward at zero parameters is uniform", "[model]") {
  for (std::size_t k : {2u, 10u}) {
    ArchitectureSpec spec = linear_spec(3, k);
    GradEngine eng(spec, ParameterVector::zeros(spec));
    Vector p = eng.forward({0.4, -1.0, 2.5});
    for (double q : p) CHECK(q == Catch::Approx(1.0 / k).margin(1e-15));
  }
}

TEST_CASE("forward softmax shift invariance", "[model]") {
  ArchitectureSpec spec = linear_spec(2, 3);
  RngStream rng(5);
  ParameterVector pv = init_xavier(spec, rng);
  GradEngine a(spec, pv);
  // adding a constant to every bias shifts all logits by that constant
  ParameterVector pv2 = pv;
  for (std::size_t i = 2 * 3; i < spec.param_count(); ++i) pv2.values[i] += 7.3;
  GradEngine b(spec, pv2);
  Vector x{0.3, -0.8};
  Vector pa = a.forward(x), pb = b.forward(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(pa[i] - pb[i]) <= 1e-12);
}

TEST_CASE("forward hand-computed binary case", "[model]") {
  // class-1 weight row (1, 0): logit gap ln 3 gives p(class 1) = 3/4
  ArchitectureSpec spec = linear_spec(2, 2);
  ParameterVector pv = ParameterVector::zeros(spec);
  pv.values[2] = 1.0;  // W(1,0)
  GradEngine eng(spec, pv);
  Vector p = eng.forward({std::log(3.0), 5.0});
  CHECK(p[1] == Catch::Approx(0.75).margin(1e-12));
  CHECK(p[0] == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("forward probabilities sum to one", "[model]") {
  ArchitectureSpec spec = mlp_spec(4, {6}, 5, Activation::kSoftplus);
  RngStream rng(99);
  GradEngine eng(spec, init_xavier(spec, rng));
  for (int rep = 0; rep < 50; ++rep) {
    Vector x = random_vec(4, rng, 3.0);
    Vector p = eng.forward(x);
    double s = 0.0;
    for (double q : p) {
      CHECK(q > 0.0);
      CHECK(q < 1.0);
      s += q;
    }
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("forward rejects dimension mismatch and loss rejects bad labels", "[model]") {
  ArchitectureSpec spec = linear_spec(3, 2);
  GradEngine eng(spec, ParameterVector::zeros(spec));
  CHECK_THROWS_AS(eng.forward({1.0, 2.0}), DataError);
  CHECK_THROWS_AS(eng.loss({1.0, 2.0, 3.0}, 2, false), DataError);
  CHECK_THROWS_AS(eng.loss({1.0, 2.0, 3.0}, -1, false), DataError);
}

TEST_CASE("loss at zero parameters is ln K with or without reg", "[model]") {
  ArchitectureSpec spec = linear_spec(4, 10, 0.5);
  GradEngine eng(spec, ParameterVector::zeros(spec));
  Vector x{1.0, -2.0, 0.0, 3.0};
  CHECK(eng.loss(x, 3, false) == Catch::Approx(std::log(10.0)).margin(1e-14));
  CHECK(eng.loss(x, 3, true) == Catch::Approx(std::log(10.0)).margin(1e-14));
}

TEST_CASE("loss matches an independent naive evaluation", "[model]") {
  RngStream rng(2024);
  const ArchitectureSpec specs[] = {
      linear_spec(5, 3, 0.01),
      mlp_spec(4, {7}, 3, Activation::kTanh, 0.1),
      mlp_spec(3, {5, 4}, 2, Activation::kSoftplus, 0.001),
  };
  for (const auto& spec : specs) {
    for (int rep = 0; rep < 5; ++rep) {
      ParameterVector pv = init_xavier(spec, rng);
      GradEngine eng(spec, pv);
      Vector x = random_vec(spec.input_dim, rng);
      const int y = static_cast<int>(rng.next_below(spec.num_classes));
      for (bool reg : {false, true}) {
        const double got = eng.loss(x, y, reg);
        const double want = naive_loss(spec, pv.values, x, y, reg);
        CHECK(std::fabs(got - want) <= 1e-12 * std::max(1.0, std::fabs(want)));
      }
    }
  }
}

TEST_CASE("grad hand case: binary linear at zero", "[model]") {
  ArchitectureSpec spec = linear_spec(1, 2);
  GradEngine eng(spec, ParameterVector::zeros(spec));
  Vector g = eng.grad({1.0}, 1, false);
  // layout: w0, w1, b0, b1; class-1 coordinates get sigma(0) - 1 = -0.5
  CHECK(g[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(g[1] == Catch::Approx(-0.5).margin(1e-15));
  CHECK(g[2] == Catch::Approx(0.5).margin(1e-15));
  CHECK(g[3] == Catch::Approx(-0.5).margin(1e-15));
}

TEST_CASE("grad matches finite differences for both families", "[model]") {
  RngStream rng(77);
  const ArchitectureSpec specs[] = {
      linear_spec(5, 3, 0.01),
      mlp_spec(4, {6}, 3, Activation::kTanh, 0.02),
      mlp_spec(4, {5, 4}, 2, Activation::kSoftplus, 0.0),
  };
  for (const auto& spec : specs) {
    for (int rep = 0; rep < 20; ++rep) {
      ParameterVector pv = init_xavier(spec, rng);
      Vector x = random_vec(spec.input_dim, rng);
      const int y = static_cast<int>(rng.next_below(spec.num_classes));
      GradEngine eng(spec, pv);
      Vector g = eng.grad(x, y, true);
      Vector fd = finite_diff_grad(
          [&](const Vector& th) {
            ParameterVector p2 = pv;
            p2.values = th;
            return GradEngine(spec, p2).loss(x, y, true);
          },
          pv.values, 1e-5);
      CHECK(vec_rel_err(g, fd) <= 1e-6);
    }
  }
}

TEST_CASE("grad of saturated sample reduces to the regularizer", "[model]") {
  GradEngine eng = saturated_engine(0.1);
  Vector g = eng.grad({1.0}, 0, true);
  CHECK(g[0] == Catch::Approx(0.1 * 500.0).margin(1e-12));
  CHECK(g[1] == Catch::Approx(0.1 * -500.0).margin(1e-12));
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
  // and the data-only gradient vanishes outright
  Vector gd = eng.grad({1.0}, 0, false);
  for (double v : gd) CHECK(v == 0.0);
}

TEST_CASE("hvp of a pure-regularizer model is lambda v on weights", "[model]") {
  const double lambda = 0.7;
  GradEngine eng = saturated_engine(lambda);
  Vector x{1.0};
  SampleRef s{x.data(), 0};
  Vector v{2.0, -3.0, 4.0, 5.0};
  Vector out = eng.hvp({s}, v, true);
  CHECK(out[0] == Catch::Approx(lambda * 2.0).margin(1e-15));
  CHECK(out[1] == Catch::Approx(lambda * -3.0).margin(1e-15));
  CHECK(out[2] == 0.0);
  CHECK(out[3] == 0.0);
}

TEST_CASE("hvp linearity and hand case at zero parameters", "[model]") {
  ArchitectureSpec spec = linear_spec(1, 2);
  GradEngine eng(spec, ParameterVector::zeros(spec));
  Vector x{1.0};
  Batch batch{{x.data(), 0}};
  Vector v{1.0, 0.0, 0.0, 0.0};
  Vector hv = eng.hvp(batch, v, false);
  // p = (1/2, 1/2): A = diag(p) - pp' gives t = (1/4, -1/4)
  CHECK(hv[0] == Catch::Approx(0.25).margin(1e-15));
  CHECK(hv[1] == Catch::Approx(-0.25).margin(1e-15));
  CHECK(hv[2] == Catch::Approx(0.25).margin(1e-15));
  CHECK(hv[3] == Catch::Approx(-0.25).margin(1e-15));

  Vector v3 = v;
  scale(3.0, v3);
  Vector hv3 = eng.hvp(batch, v3, false);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(hv3[i] - 3.0 * hv[i]) <= 1e-12);
}

TEST_CASE("hvp matches finite differences of the gradient", "[model]") {
  RngStream rng(31);
  const ArchitectureSpec specs[] = {
      linear_spec(4, 3, 0.05),
      mlp_spec(3, {5}, 3, Activation::kTanh, 0.01),
      mlp_spec(3, {4, 3}, 2, Activation::kSoftplus, 0.0),
  };
  for (const auto& spec : specs) {
    for (int rep = 0; rep < 20; ++rep) {
      ParameterVector pv = init_xavier(spec, rng);
      GradEngine eng(spec, pv);
      const std::size_t nb = 3;
      Matrix xs(nb, spec.input_dim);
      std::vector<int> ys(nb);
      for (std::size_t i = 0; i < nb; ++i) {
        for (std::size_t j = 0; j < spec.input_dim; ++j) xs(i, j) = rng.next_normal();
        ys[i] = static_cast<int>(rng.next_below(spec.num_classes));
      }
      Batch batch = make_batch(xs, ys);
      Vector v = random_vec(spec.param_count(), rng);
      Vector hv = eng.hvp(batch, v, true);

      const double h = 1e-5;
      auto mean_grad_at = [&](double sign) {
        ParameterVector p2 = pv;
        for (std::size_t i = 0; i < v.size(); ++i) p2.values[i] += sign * h * v[i];
        GradEngine e2(spec, p2);
        Vector g(spec.param_count(), 0.0);
        for (const SampleRef& s : batch) {
          Vector gi = e2.grad(s, true);
          axpy(1.0 / nb, gi, g);
        }
        return g;
      };
      Vector gp = mean_grad_at(1.0), gm = mean_grad_at(-1.0);
      Vector fd(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) fd[i] = (gp[i] - gm[i]) / (2.0 * h);
      CHECK(vec_rel_err(hv, fd) <= 1e-5);
    }
  }
}

TEST_CASE("hvp quadratic-form symmetry", "[model]") {
  RngStream rng(13);
  ArchitectureSpec spec = mlp_spec(3, {4}, 3, Activation::kTanh, 0.01);
  GradEngine eng(spec, init_xavier(spec, rng));
  Matrix xs(2, 3);
  std::vector<int> ys{0, 2};
  for (double& v : xs.data) v = rng.next_normal();
  Batch batch = make_batch(xs, ys);
  for (int rep = 0; rep < 10; ++rep) {
    Vector u = random_vec(spec.param_count(), rng);
    Vector v = random_vec(spec.param_count(), rng);
    const double a = dot(u, eng.hvp(batch, v, true));
    const double b = dot(v, eng.hvp(batch, u, true));
    CHECK(std::fabs(a - b) <= 1e-10 * std::max(1.0, std::fabs(a)));
  }
}

TEST_CASE("hvp positive definite on weights for regularized linear model", "[model]") {
  RngStream rng(8);
  const double lambda = 0.05;
  ArchitectureSpec spec = linear_spec(4, 3, lambda);
  GradEngine eng(spec, init_xavier(spec, rng));
  Matrix xs(5, 4);
  std::vector<int> ys{0, 1, 2, 0, 1};
  for (double& v : xs.data) v = rng.next_normal();
  Batch batch = make_batch(xs, ys);
  for (int rep = 0; rep < 20; ++rep) {
    Vector v = random_vec(spec.param_count(), rng);
    double wsq = 0.0;
    for (std::size_t i = 0; i < 12; ++i) wsq += v[i] * v[i];  // weight block
    if (wsq == 0.0) continue;
    CHECK(dot(v, eng.hvp(batch, v, true)) >= lambda * wsq - 1e-12);
  }
}

TEST_CASE("hvp rejects an empty batch", "[model]") {
  ArchitectureSpec spec = linear_spec(2, 2);
  GradEngine eng(spec, ParameterVector::zeros(spec));
  CHECK_THROWS_AS(eng.hvp({}, Vector(spec.param_count(), 0.0), false), DataError);
}

TEST_CASE("build_hessian symmetry and HVP column oracle", "[model]") {
  RngStream rng(17);
  const ArchitectureSpec specs[] = {
      linear_spec(3, 3, 0.02),
      mlp_spec(2, {3}, 2, Activation::kTanh, 0.01),
  };
  for (const auto& spec : specs) {
    GradEngine eng(spec, init_xavier(spec, rng));
    Matrix xs(4, spec.input_dim);
    std::vector<int> ys{0, 1, 0, 1};
    for (double& v : xs.data) v = rng.next_normal();
    Batch batch = make_batch(xs, ys);
    const double damping = 0.3;
    Matrix h = eng.build_hessian(batch, damping);
    const std::size_t p = spec.param_count();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) CHECK(std::fabs(h(i, j) - h(j, i)) <= 1e-12);

    Vector e(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      e[j] = 1.0;
      Vector col = eng.hvp(batch, e, true);
      col[j] += damping;
      for (std::size_t i = 0; i < p; ++i) CHECK(std::fabs(h(i, j) - col[i]) <= 1e-12);
      e[j] = 0.0;
    }
  }
}

TEST_CASE("build_hessian of pure-regularizer model is diagonal", "[model]") {
  const double lambda = 0.4, damping = 1.0;
  GradEngine eng = saturated_engine(lambda);
  Vector x{1.0};
  Batch batch{{x.data(), 0}};
  Matrix h = eng.build_hessian(batch, damping);
  // weights: lambda + damping; biases: damping only (reg excludes biases)
  CHECK(h(0, 0) == Catch::Approx(lambda + damping).margin(1e-15));
  CHECK(h(1, 1) == Catch::Approx(lambda + damping).margin(1e-15));
  CHECK(h(2, 2) == Catch::Approx(damping).margin(1e-15));
  CHECK(h(3, 3) == Catch::Approx(damping).margin(1e-15));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) CHECK(h(i, j) == 0.0);
}

TEST_CASE("build_hessian refuses oversized parameter counts", "[model]") {
  ArchitectureSpec spec = linear_spec(500, 10);  // p = 5010 > 4096
  GradEngine eng(spec, ParameterVector::zeros(spec));
  Vector x(500, 0.0);
  Batch batch{{x.data(), 0}};
  try {
    eng.build_hessian(batch, 0.0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("cg or lissa") != std::string::npos);
  }
}
