#pragma once

// Dense vector/matrix kit: SPD solvers (Cholesky, conjugate gradient),
// a central-difference gradient checker, and a seeded deterministic RNG.
// Everything is 64-bit float; influence values are small differences of
// large quantities and 32-bit storage would drown them in rounding noise.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ibtl/errors.hpp"

namespace ibtl {

using Vector = std::vector<double>;

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline double dot(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vector& a) { return std::sqrt(dot(a, a)); }

// y += alpha * x
inline void axpy(double alpha, const Vector& x, Vector& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(double alpha, Vector& x) {
  for (double& v : x) v *= alpha;
}

inline bool all_finite(const Vector& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  Vector y(a.rows, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) s += a(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

// Deterministic counter-based stream (splitmix64 core). Same seed gives a
// bit-identical sequence on every platform; the standard <random> engines
// are portable but their distributions are not, so draws are derived here
// directly. Single-owner: split() carves an independent child stream for
// concurrent or nested use.
class RngStream {
public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Box-Muller; draws two words per call, no cached state.
  double next_normal() {
    double u1 = 1.0 - next_uniform();  // (0, 1]
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Uniform integer in [0, n), n >= 1. Lemire multiply-shift, unbiased enough
  // at 64 bits for any desk-scale n.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  RngStream split() { return RngStream(next_u64() ^ 0xD2B74407B1CE6E93ull); }

private:
  std::uint64_t state_;
};

// Fisher-Yates over [0, n) driven by the stream.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct CgResult {
  Vector x;
  std::size_t iterations = 0;
  double rel_residual = 0.0;
  bool converged = false;
};

inline constexpr double kCgDefaultTol = 1e-10;

// Conjugate gradient for SPD linear operators. apply_a maps Vector -> Vector.
// max_iter == 0 selects the default 10 * dim; on hitting the cap the best
// iterate is returned with converged == false.
template <class ApplyA>
CgResult cg_solve(ApplyA&& apply_a, const Vector& b, double tol = kCgDefaultTol,
                  std::size_t max_iter = 0) {
  const std::size_t n = b.size();
  if (max_iter == 0) max_iter = 10 * n;
  if (!all_finite(b)) throw NumericalError("cg_solve: right-hand side contains non-finite values");

  CgResult res;
  res.x.assign(n, 0.0);
  const double bnorm = norm2(b);
  if (bnorm == 0.0) {
    res.converged = true;
    return res;
  }

  Vector r = b;  // r = b - A*0
  Vector p = r;
  double rs = dot(r, r);
  for (std::size_t it = 0; it < max_iter; ++it) {
    Vector ap = apply_a(p);
    double pap = dot(p, ap);
    if (!std::isfinite(pap) || pap <= 0.0)
      throw NumericalError("cg_solve: numerical breakdown, p'Ap = " + std::to_string(pap) +
                           " at iteration " + std::to_string(it) +
                           " (operator not positive definite?)");
    const double alpha = rs / pap;
    axpy(alpha, p, res.x);
    axpy(-alpha, ap, r);
    const double rs_new = dot(r, r);
    if (!std::isfinite(rs_new)) throw NumericalError("cg_solve: residual became non-finite");
    res.iterations = it + 1;
    res.rel_residual = std::sqrt(rs_new) / bnorm;
    if (res.rel_residual <= tol) {
      res.converged = true;
      return res;
    }
    const double beta = rs_new / rs;
    rs = rs_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }
  return res;
}

// In-place lower Cholesky factor of the lower triangle of a. Throws naming
// the offending pivot when the matrix is not positive definite.
inline Matrix cholesky_factor(const Matrix& a) {
  if (a.rows != a.cols) throw DataError("cholesky_factor: matrix is not square");
  const std::size_t n = a.rows;
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw NumericalError("cholesky_factor: not positive definite, pivot " + std::to_string(j) +
                           " = " + std::to_string(d));
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline Vector cholesky_solve_factored(const Matrix& l, const Vector& b) {
  const std::size_t n = l.rows;
  Vector y(n), x(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  for (std::size_t ii = n; ii > 0; --ii) {
    const std::size_t i = ii - 1;
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

// Direct SPD solve A x = b via Cholesky.
inline Vector cholesky_solve(const Matrix& a, const Vector& b) {
  if (a.rows != b.size()) throw DataError("cholesky_solve: dimension mismatch");
  return cholesky_solve_factored(cholesky_factor(a), b);
}

// Central-difference gradient of a scalar function, component i =
// (f(x + h e_i) - f(x - h e_i)) / (2 h).
template <class F>
Vector finite_diff_grad(F&& f, const Vector& x, double h = 1e-5) {
  Vector g(x.size());
  Vector xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    xp[i] = xi + h;
    const double fp = f(xp);
    xp[i] = xi - h;
    const double fm = f(xp);
    xp[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_diff_grad: non-finite function value at component " +
                           std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace ibtl
