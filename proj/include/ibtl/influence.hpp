#pragma once

// Influence scores of training samples on validation loss, computed with a
// fixed pre-trained model: I(x, x_j) = -grad L(x_j)' (H + damping I)^-1
// grad L(x). H is the mean Hessian of the regularized training objective;
// the gradients entering the score use the per-sample data loss only.
// Three interchangeable inverse-Hessian-vector-product strategies: explicit
// factorization, conjugate gradient, and the stochastic LiSSA recursion.

#include <cstdint>
#include <string>
#include <vector>

#include "ibtl/errors.hpp"
#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"

namespace ibtl {

enum class IhvpKind { kExplicit, kCg, kLissa };

inline std::string ihvp_kind_name(IhvpKind k) {
  switch (k) {
    case IhvpKind::kExplicit: return "explicit";
    case IhvpKind::kCg: return "cg";
    case IhvpKind::kLissa: return "lissa";
  }
  return "?";
}

inline IhvpKind ihvp_kind_from_name(const std::string& s) {
  if (s == "explicit") return IhvpKind::kExplicit;
  if (s == "cg") return IhvpKind::kCg;
  if (s == "lissa") return IhvpKind::kLissa;
  throw DataError("unknown ihvp strategy '" + s + "' (expected explicit, cg or lissa)");
}

struct IhvpStrategy {
  IhvpKind kind = IhvpKind::kCg;
  double damping = 0.0;
  // cg
  double cg_tol = kCgDefaultTol;
  std::size_t cg_max_iter = 0;  // 0 selects 10 * p
  // lissa; scale must upper-bound the spectral norm of H + damping I
  std::size_t lissa_depth = 5000;
  double lissa_scale = 10.0;
  std::size_t lissa_batch = 8;
  std::size_t lissa_repeats = 10;
  std::uint64_t lissa_seed = 0;

  std::string describe() const {
    std::string s = ihvp_kind_name(kind);
    if (kind == IhvpKind::kLissa)
      s += "(T=" + std::to_string(lissa_depth) + ",R=" + std::to_string(lissa_repeats) +
           ",batch=" + std::to_string(lissa_batch) + ")";
    return s;
  }

  void validate(const GradEngine& engine) const {
    if (damping < 0.0) throw DataError("ihvp: damping must be nonnegative");
    if (!engine.is_convex() && damping <= 0.0)
      throw DataError("ihvp: positive damping is required for non-convex models");
    if (kind == IhvpKind::kExplicit && engine.param_count() > GradEngine::kExplicitHessianLimit)
      throw DataError("ihvp: explicit strategy limited to p <= " +
                      std::to_string(GradEngine::kExplicitHessianLimit));
    if (kind == IhvpKind::kLissa) {
      if (lissa_scale <= 0.0) throw DataError("ihvp: lissa scale must be positive");
      if (lissa_depth == 0 || lissa_repeats == 0 || lissa_batch == 0)
        throw DataError("ihvp: lissa depth, repeats and batch must be positive");
    }
  }
};

// s ~= (H + damping I)^-1 b over the given training batch.
inline Vector ihvp(const GradEngine& engine, const Batch& train, const Vector& b,
                   const IhvpStrategy& strategy) {
  strategy.validate(engine);
  if (train.empty()) throw DataError("ihvp: empty training batch");
  if (b.size() != engine.param_count()) throw DataError("ihvp: vector length mismatch");
  const std::size_t p = engine.param_count();

  switch (strategy.kind) {
    case IhvpKind::kExplicit: {
      Matrix h = engine.build_hessian(train, strategy.damping);
      if (strategy.damping == 0.0) add_bias_shift_gauge(h, engine.spec());
      try {
        return cholesky_solve(h, b);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) +
                             "; the influence Hessian is not positive definite, increase damping");
      }
    }
    case IhvpKind::kCg: {
      auto apply = [&](const Vector& v) {
        Vector hv = engine.hvp(train, v, /*include_reg=*/true);
        if (strategy.damping != 0.0) axpy(strategy.damping, v, hv);
        return hv;
      };
      CgResult r = cg_solve(apply, b, strategy.cg_tol, strategy.cg_max_iter);
      if (!r.converged)
        throw NumericalError("ihvp: cg did not reach tolerance " +
                             std::to_string(strategy.cg_tol) + " in " +
                             std::to_string(r.iterations) +
                             " iterations (residual " + std::to_string(r.rel_residual) + ")");
      return r.x;
    }
    case IhvpKind::kLissa: {
      // truncated Neumann recursion s <- b + (I - (H_batch + damping I)/scale) s,
      // averaged over independent repeats; s_T / scale estimates the ihvp
      const double bnorm = norm2(b);
      if (bnorm == 0.0) return Vector(p, 0.0);
      RngStream base(strategy.lissa_seed);
      Vector acc(p, 0.0);
      for (std::size_t rep = 0; rep < strategy.lissa_repeats; ++rep) {
        RngStream rng = base.split();
        Vector s = b;
        Batch mini(strategy.lissa_batch);
        for (std::size_t t = 0; t < strategy.lissa_depth; ++t) {
          for (std::size_t i = 0; i < strategy.lissa_batch; ++i)
            mini[i] = train[static_cast<std::size_t>(rng.next_below(train.size()))];
          Vector hs = engine.hvp(mini, s, /*include_reg=*/true);
          if (strategy.damping != 0.0) axpy(strategy.damping, s, hs);
          for (std::size_t i = 0; i < p; ++i) s[i] = b[i] + s[i] - hs[i] / strategy.lissa_scale;
          const double snorm = norm2(s);
          if (!std::isfinite(snorm) || snorm > 1e6 * bnorm)
            throw NumericalError("ihvp: lissa diverged at step " + std::to_string(t) +
                                 " (|s| = " + std::to_string(snorm) +
                                 "); increase the scale parameter");
        }
        axpy(1.0 / (strategy.lissa_scale * static_cast<double>(strategy.lissa_repeats)), s, acc);
      }
      return acc;
    }
  }
  throw NumericalError("ihvp: unreachable");
}

// Which validation samples the influence sums range over.
struct ValidationReference {
  enum class Mode { kAll, kClassRestricted };
  Mode mode = Mode::kAll;
  int target_class = -1;
  std::vector<std::size_t> indices;  // resolved, ascending

  std::string describe() const {
    return mode == Mode::kAll ? "all" : "class:" + std::to_string(target_class);
  }
};

inline ValidationReference resolve_reference(const std::vector<int>& val_labels,
                                             ValidationReference::Mode mode,
                                             int target_class = -1) {
  if (val_labels.empty()) throw DataError("resolve_reference: empty validation set");
  ValidationReference ref;
  ref.mode = mode;
  if (mode == ValidationReference::Mode::kAll) {
    ref.indices.resize(val_labels.size());
    for (std::size_t i = 0; i < val_labels.size(); ++i) ref.indices[i] = i;
    return ref;
  }
  ref.target_class = target_class;
  for (std::size_t i = 0; i < val_labels.size(); ++i)
    if (val_labels[i] == target_class) ref.indices.push_back(i);
  if (ref.indices.empty())
    throw DataError("resolve_reference: no validation samples of class " +
                    std::to_string(target_class));
  return ref;
}

// One shared solve for a whole scoring pass: by linearity,
// sum_j I(x, x_j) = -s' grad L(x) with s = ihvp(sum_j grad L(x_j)).
// Building the scorer performs the single solve; score() is then one
// gradient and one dot product per training sample.
class InfluenceScorer {
public:
  InfluenceScorer(const GradEngine& engine, const Batch& train, const Batch& validation,
                  const ValidationReference& ref, const IhvpStrategy& strategy)
      : engine_(engine) {
    if (ref.indices.empty()) throw DataError("influence: empty validation reference");
    Vector gsum(engine.param_count(), 0.0);
    for (std::size_t j : ref.indices) {
      if (j >= validation.size())
        throw DataError("influence: reference index " + std::to_string(j) +
                        " outside validation set");
      Vector g = engine.grad(validation[j], /*include_reg=*/false);
      axpy(1.0, g, gsum);
    }
    solution_ = ihvp(engine, train, gsum, strategy);
  }

  double score(const SampleRef& x) const {
    Vector g = engine_.grad(x, /*include_reg=*/false);
    return -dot(solution_, g);
  }

  const Vector& shared_solution() const { return solution_; }

private:
  const GradEngine& engine_;
  Vector solution_;
};

// Influence of removing training sample x on the loss at one validation
// sample; sign follows the first-order removal estimate (positive means
// removal is predicted to lower that validation loss).
inline double influence_pair(const GradEngine& engine, const Batch& train, const SampleRef& x,
                             const SampleRef& x_j, const IhvpStrategy& strategy) {
  Vector gj = engine.grad(x_j, /*include_reg=*/false);
  Vector s = ihvp(engine, train, gj, strategy);
  const double v = -dot(s, engine.grad(x, /*include_reg=*/false));
  if (!std::isfinite(v)) throw NumericalError("influence_pair: non-finite influence value");
  return v;
}

// Total influence of x over a validation reference, via the shared solve.
inline double influence_total(const GradEngine& engine, const Batch& train, const SampleRef& x,
                              const Batch& validation, const ValidationReference& ref,
                              const IhvpStrategy& strategy) {
  InfluenceScorer scorer(engine, train, validation, ref, strategy);
  const double v = scorer.score(x);
  if (!std::isfinite(v)) throw NumericalError("influence_total: non-finite influence value");
  return v;
}

}  // namespace ibtl
