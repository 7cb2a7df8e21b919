#pragma once

// Exact leave-one-out retraining for the convex model family. Full-batch
// Newton drives the regularized softmax-regression objective to a gradient
// norm <= tol, giving ground-truth validation-loss deltas against which the
// first-order influence scores are validated. The stochastic fine-tuning
// optimizer is useless here: per-sample deltas are far below its noise floor.

#include <cstddef>
#include <string>
#include <vector>

#include "ibtl/errors.hpp"
#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"

namespace ibtl {

struct NewtonResult {
  ParameterVector params;
  std::size_t iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

namespace detail {

// Objective: data_scale * sum_i L_data(i) + (lambda/2) ||W||^2. The scale is
// kept explicit so leave-one-out retraining can drop a sample while keeping
// the original 1/n weighting, preserving the data-vs-regularizer balance.

inline Vector objective_grad(const GradEngine& engine, const Batch& train, double data_scale) {
  Vector g(engine.param_count(), 0.0);
  for (const SampleRef& s : train) axpy(1.0, engine.grad(s, /*include_reg=*/false), g);
  scale(data_scale, g);
  const double lambda = engine.spec().l2_lambda;
  if (lambda != 0.0)
    engine.for_each_weight_span([&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) g[i] += lambda * engine.params().values[i];
    });
  return g;
}

inline double objective_value(const GradEngine& engine, const Batch& train, double data_scale) {
  double l = 0.0;
  for (const SampleRef& s : train) l += engine.loss(s, /*include_reg=*/false);
  l *= data_scale;
  const double lambda = engine.spec().l2_lambda;
  if (lambda != 0.0) {
    double sq = 0.0;
    engine.for_each_weight_span([&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) sq += engine.params().values[i] * engine.params().values[i];
    });
    l += 0.5 * lambda * sq;
  }
  return l;
}

// build_hessian gives mean-data + lambda I_w; rescale the data block to
// data_scale * |train| without touching the regularizer part.
inline Matrix objective_hessian(const GradEngine& engine, const Batch& train, double data_scale) {
  Matrix h = engine.build_hessian(train, 0.0);
  const double c = data_scale * static_cast<double>(train.size());
  if (c != 1.0) {
    for (double& v : h.data) v *= c;
    const double lambda = engine.spec().l2_lambda;
    if (lambda != 0.0)
      engine.for_each_weight_span([&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) h(i, i) += (1.0 - c) * lambda;
      });
  }
  return h;
}

}  // namespace detail

// Minimize data_scale * sum L_data + (lambda/2) ||W||^2 by damped Newton
// with step halving; data_scale = 0 selects the standard 1/|train| mean.
// Requires the softmax-linear family with lambda > 0 so the Hessian is
// positive definite and the optimum unique.
inline NewtonResult newton_minimize(const ArchitectureSpec& spec, const Batch& train,
                                    ParameterVector init, double tol = 1e-10,
                                    std::size_t max_iter = 100, double data_scale = 0.0) {
  spec.validate();
  if (!spec.hidden_dims.empty())
    throw DataError("newton_minimize: requires the convex softmax-linear model family");
  if (spec.l2_lambda <= 0.0)
    throw DataError("newton_minimize: requires l2_lambda > 0 for a unique optimum");
  if (train.empty()) throw DataError("newton_minimize: empty training set");
  if (data_scale == 0.0) data_scale = 1.0 / static_cast<double>(train.size());

  NewtonResult res;
  res.params = std::move(init);
  for (std::size_t it = 0; it < max_iter; ++it) {
    GradEngine engine(spec, res.params);
    Vector g = detail::objective_grad(engine, train, data_scale);
    res.grad_norm = norm2(g);
    res.iterations = it;
    if (res.grad_norm <= tol) {
      res.converged = true;
      return res;
    }
    Matrix h = detail::objective_hessian(engine, train, data_scale);
    add_bias_shift_gauge(h, spec);
    Vector step = cholesky_solve(h, g);
    ParameterVector trial = res.params;
    if (res.grad_norm < 1e-6) {
      // quadratic zone: objective changes are below f64 resolution here, a
      // backtracking test would stall; the pure Newton step is safe
      for (std::size_t i = 0; i < step.size(); ++i) trial.values[i] -= step[i];
    } else {
      const double f0 = detail::objective_value(engine, train, data_scale);
      double alpha = 1.0;
      for (int halving = 0; halving < 40; ++halving) {
        for (std::size_t i = 0; i < step.size(); ++i)
          trial.values[i] = res.params.values[i] - alpha * step[i];
        GradEngine te(spec, trial);
        const double f1 = detail::objective_value(te, train, data_scale);
        if (std::isfinite(f1) && f1 <= f0 + 1e-14 * (1.0 + std::fabs(f0))) break;
        alpha *= 0.5;
      }
    }
    res.params = trial;
  }
  GradEngine engine(spec, res.params);
  res.grad_norm = norm2(detail::objective_grad(engine, train, data_scale));
  res.converged = res.grad_norm <= tol;
  return res;
}

// Ground-truth effect of removing train[leave_out] (index into the batch):
// retrain to the optimum on the remaining samples and report
// sum over the validation reference of L(theta_full) - L(theta_loo).
// Positive delta means removal genuinely lowers total validation loss.
// The retrain keeps the original 1/n data weighting (removal drops one term;
// it does not renormalize the objective), matching the removal calculus the
// influence scores approximate.
inline double loo_delta(const ArchitectureSpec& spec, const Batch& train,
                        const ParameterVector& theta_full, std::size_t leave_out,
                        const Batch& validation, const std::vector<std::size_t>& ref_indices,
                        double tol = 1e-10) {
  Batch reduced;
  reduced.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    if (i != leave_out) reduced.push_back(train[i]);
  if (reduced.empty()) throw DataError("loo_delta: removal would empty the training set");

  // warm start from the full-data optimum; an empty removal (index out of
  // range) converges in zero iterations and yields exactly 0
  NewtonResult r = newton_minimize(spec, reduced, theta_full, tol, 100,
                                   1.0 / static_cast<double>(train.size()));
  if (!r.converged)
    throw NumericalError("loo_delta: Newton did not converge, gradient norm " +
                         std::to_string(r.grad_norm));

  GradEngine full_engine(spec, theta_full);
  GradEngine loo_engine(spec, r.params);
  double delta = 0.0;
  for (std::size_t j : ref_indices)
    delta += full_engine.loss(validation[j], false) - loo_engine.loss(validation[j], false);
  return delta;
}

}  // namespace ibtl
