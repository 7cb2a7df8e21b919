#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "ibtl/numkit.hpp"

using namespace ibtl;

namespace {

Matrix random_spd(std::size_t n, RngStream& rng) {
  // M'M + I is SPD for any M
  Matrix m(n, n);
  for (double& v : m.data) v = rng.next_normal();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += m(k, i) * m(k, j);
      a(i, j) = s + (i == j ? 1.0 : 0.0);
    }
  return a;
}

double rel_err(const Vector& got, const Vector& want) {
  Vector diff = got;
  axpy(-1.0, want, diff);
  const double denom = norm2(want);
  return denom == 0.0 ? norm2(diff) : norm2(diff) / denom;
}

}  // namespace

TEST_CASE("cg_solve identity and scalar systems", "[numkit]") {
  auto ident = [](const Vector& v) { return v; };
  Vector b{3.0, -1.0};
  CgResult r = cg_solve(ident, b);
  REQUIRE(r.converged);
  CHECK(r.x[0] == Catch::Approx(3.0).margin(1e-12));
  CHECK(r.x[1] == Catch::Approx(-1.0).margin(1e-12));

  auto twice = [](const Vector& v) {
    Vector w = v;
    scale(2.0, w);
    return w;
  };
  Vector b2{4.0, 6.0};
  CgResult r2 = cg_solve(twice, b2);
  REQUIRE(r2.converged);
  CHECK(r2.x[0] == Catch::Approx(2.0).margin(1e-12));
  CHECK(r2.x[1] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("cg_solve zero rhs returns zero immediately", "[numkit]") {
  auto ident = [](const Vector& v) { return v; };
  CgResult r = cg_solve(ident, Vector(4, 0.0));
  REQUIRE(r.converged);
  CHECK(r.iterations == 0);
  for (double v : r.x) CHECK(v == 0.0);
}

TEST_CASE("cg_solve matches cholesky_solve on random SPD systems", "[numkit]") {
  RngStream rng(20240811);
  for (std::size_t n : {5u, 17u, 33u, 60u}) {
    Matrix a = random_spd(n, rng);
    Vector b(n);
    for (double& v : b) v = rng.next_normal();
    Vector direct = cholesky_solve(a, b);
    CgResult it = cg_solve([&](const Vector& v) { return matvec(a, v); }, b);
    REQUIRE(it.converged);
    CHECK(rel_err(it.x, direct) <= 1e-8);
  }
}

TEST_CASE("cg_solve reports breakdown on indefinite operators", "[numkit]") {
  // A = diag(1, -1) is symmetric but not PD
  auto apply = [](const Vector& v) { return Vector{v[0], -v[1]}; };
  Vector b{0.0, 1.0};
  CHECK_THROWS_AS(cg_solve(apply, b), NumericalError);
}

TEST_CASE("cholesky_solve hand cases", "[numkit]") {
  Matrix i3 = Matrix::identity(3);
  Vector x = cholesky_solve(i3, {1.0, 2.0, 3.0});
  CHECK(x[0] == 1.0);
  CHECK(x[1] == 2.0);
  CHECK(x[2] == 3.0);

  Matrix d(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  Vector x2 = cholesky_solve(d, {8.0, 27.0});
  CHECK(x2[0] == Catch::Approx(2.0).margin(1e-14));
  CHECK(x2[1] == Catch::Approx(3.0).margin(1e-14));

  Matrix m(2, 2);
  m(0, 0) = 2.0;
  m(0, 1) = 1.0;
  m(1, 0) = 1.0;
  m(1, 1) = 2.0;
  Vector x3 = cholesky_solve(m, {3.0, 3.0});
  CHECK(x3[0] == Catch::Approx(1.0).margin(1e-14));
  CHECK(x3[1] == Catch::Approx(1.0).margin(1e-14));
}

TEST_CASE("cholesky_factor names the failing pivot", "[numkit]") {
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 2.0;
  m(1, 0) = 2.0;
  m(1, 1) = 1.0;  // eigenvalues 3, -1
  try {
    cholesky_factor(m);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("pivot 1") != std::string::npos);
  }
}

TEST_CASE("cholesky_solve round trip A x = b recovery", "[numkit]") {
  RngStream rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t n = 12;
    Matrix a = random_spd(n, rng);
    Vector x(n);
    for (double& v : x) v = rng.next_normal();
    Vector b = matvec(a, x);
    Vector got = cholesky_solve(a, b);
    CHECK(rel_err(got, x) <= 1e-10);
  }
}

TEST_CASE("finite_diff_grad analytic cases", "[numkit]") {
  auto square = [](const Vector& v) { return v[0] * v[0]; };
  Vector g = finite_diff_grad(square, {3.0}, 1e-5);
  CHECK(std::fabs(g[0] - 6.0) <= 1e-8);

  auto constant = [](const Vector&) { return 42.0; };
  Vector g2 = finite_diff_grad(constant, {1.0, -2.0, 0.5});
  for (double v : g2) CHECK(v == 0.0);
}

TEST_CASE("finite_diff_grad propagates non-finite evaluations", "[numkit]") {
  auto bad = [](const Vector& v) { return std::log(v[0]); };  // NaN for v[0] < 0
  CHECK_THROWS_AS(finite_diff_grad(bad, Vector{-1.0}), NumericalError);
}

TEST_CASE("RngStream determinism and seed sensitivity", "[numkit]") {
  RngStream a(123), b(123);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  // unequal seeds diverge within the first 16 draws
  RngStream base(999);
  for (int pair = 0; pair < 100; ++pair) {
    const std::uint64_t s1 = base.next_u64(), s2 = base.next_u64();
    if (s1 == s2) continue;
    RngStream r1(s1), r2(s2);
    bool differ = false;
    for (int i = 0; i < 16 && !differ; ++i) differ = r1.next_u64() != r2.next_u64();
    CHECK(differ);
  }
}

TEST_CASE("RngStream split gives an independent deterministic child", "[numkit]") {
  RngStream parent(5);
  RngStream child = parent.split();
  RngStream parent2(5);
  RngStream child2 = parent2.split();
  for (int i = 0; i < 10; ++i) REQUIRE(child.next_u64() == child2.next_u64());
  // child differs from a fresh stream on the parent seed
  RngStream fresh(5);
  bool differ = false;
  RngStream child3 = RngStream(5).split();
  for (int i = 0; i < 16 && !differ; ++i) differ = child3.next_u64() != fresh.next_u64();
  CHECK(differ);
}

TEST_CASE("RngStream uniform and below ranges", "[numkit]") {
  RngStream rng(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.next_uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const std::uint64_t k = rng.next_below(7);
    REQUIRE(k < 7);
  }
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 200; ++i) seen.insert(rng.next_below(3));
  CHECK(seen.size() == 3);
}
