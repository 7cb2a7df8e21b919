#pragma once

// Differentiable classifiers over a flat parameter vector: multinomial
// softmax-linear regression (closed-form gradient/HVP) and a small MLP
// (manual reverse mode; HVP by forward-over-reverse with dual numbers).
// Activations are restricted to twice continuously differentiable choices
// so the Hessian is defined everywhere.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ibtl/errors.hpp"
#include "ibtl/numkit.hpp"

namespace ibtl {

enum class Activation { kTanh, kSoftplus };

inline std::string activation_name(Activation a) {
  return a == Activation::kTanh ? "tanh" : "softplus";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "softplus") return Activation::kSoftplus;
  throw DataError("unknown activation '" + s + "' (expected tanh or softplus)");
}

// Layered model description. Empty hidden_dims means softmax-linear
// regression; otherwise an MLP with the given hidden widths.
struct ArchitectureSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  Activation activation = Activation::kTanh;
  std::size_t num_classes = 2;
  double l2_lambda = 0.0;

  // Widths including input and output: [input_dim, hidden..., num_classes].
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    w.push_back(input_dim);
    for (std::size_t h : hidden_dims) w.push_back(h);
    w.push_back(num_classes);
    return w;
  }

  std::size_t num_layers() const { return hidden_dims.size() + 1; }

  // Layer k holds (fan_in + 1) * fan_out parameters: row-major weight
  // matrix (fan_out x fan_in) followed by the bias vector.
  std::size_t layer_param_count(std::size_t k) const {
    const auto w = widths();
    return (w[k] + 1) * w[k + 1];
  }

  std::size_t param_count() const {
    std::size_t p = 0;
    for (std::size_t k = 0; k < num_layers(); ++k) p += layer_param_count(k);
    return p;
  }

  void validate() const {
    if (input_dim < 1) throw DataError("ArchitectureSpec: input_dim must be >= 1");
    if (num_classes < 2) throw DataError("ArchitectureSpec: num_classes must be >= 2");
    for (std::size_t h : hidden_dims)
      if (h < 1) throw DataError("ArchitectureSpec: hidden widths must be >= 1");
    if (l2_lambda < 0.0) throw DataError("ArchitectureSpec: l2_lambda must be nonnegative");
  }

  bool operator==(const ArchitectureSpec&) const = default;
};

struct LayerSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // one past last
  bool operator==(const LayerSpan&) const = default;
};

inline std::vector<LayerSpan> make_layer_offsets(const ArchitectureSpec& spec) {
  std::vector<LayerSpan> spans;
  std::size_t off = 0;
  for (std::size_t k = 0; k < spec.num_layers(); ++k) {
    const std::size_t len = spec.layer_param_count(k);
    spans.push_back({off, off + len});
    off += len;
  }
  return spans;
}

// Flat parameter vector theta with per-layer offsets, shallow to deep.
struct ParameterVector {
  Vector values;
  std::vector<LayerSpan> layer_offsets;

  static ParameterVector zeros(const ArchitectureSpec& spec) {
    ParameterVector pv;
    pv.values.assign(spec.param_count(), 0.0);
    pv.layer_offsets = make_layer_offsets(spec);
    return pv;
  }

  void check_matches(const ArchitectureSpec& spec) const {
    if (values.size() != spec.param_count())
      throw DataError("ParameterVector: length " + std::to_string(values.size()) +
                      " does not match spec parameter count " +
                      std::to_string(spec.param_count()));
    if (layer_offsets != make_layer_offsets(spec))
      throw DataError("ParameterVector: layer offsets do not match spec");
  }
};

// Xavier initialization: weights uniform in +-sqrt(6 / (fan_in + fan_out)),
// biases zero. Draw order is layer by layer, weight storage order, so a
// fixed seed gives a bit-identical vector.
inline ParameterVector init_xavier(const ArchitectureSpec& spec, RngStream& rng) {
  spec.validate();
  ParameterVector pv = ParameterVector::zeros(spec);
  const auto w = spec.widths();
  for (std::size_t k = 0; k < spec.num_layers(); ++k) {
    const std::size_t fan_in = w[k], fan_out = w[k + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    double* wk = pv.values.data() + pv.layer_offsets[k].begin;
    for (std::size_t i = 0; i < fan_in * fan_out; ++i) wk[i] = rng.next_uniform(-limit, limit);
    // biases already zero
  }
  return pv;
}

struct SampleRef {
  const double* x = nullptr;
  int label = 0;
};

using Batch = std::vector<SampleRef>;

inline Batch make_batch(const Matrix& features, const std::vector<int>& labels) {
  if (features.rows != labels.size())
    throw DataError("make_batch: feature rows and label count differ");
  Batch b(features.rows);
  for (std::size_t i = 0; i < features.rows; ++i)
    b[i] = {features.data.data() + i * features.cols, labels[i]};
  return b;
}

namespace detail {

// First-order dual number; the tangent component carries directional
// derivatives through both the forward and the reverse pass.
struct Dual {
  double v = 0.0;
  double d = 0.0;
  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit promotion is the point
  Dual(double value, double tangent) : v(value), d(tangent) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator+(Dual a, double b) { return {a.v + b, a.d}; }
inline Dual operator+(double a, Dual b) { return {a + b.v, b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator-(Dual a, double b) { return {a.v - b, a.d}; }
inline Dual operator-(double a, Dual b) { return {a - b.v, -b.d}; }
inline Dual operator-(Dual a) { return {-a.v, -a.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator*(Dual a, double b) { return {a.v * b, a.d * b}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
inline Dual operator/(Dual a, Dual b) {
  const double inv = 1.0 / b.v;
  return {a.v * inv, (a.d - a.v * inv * b.d) * inv};
}
inline Dual& operator+=(Dual& a, Dual b) { a = a + b; return a; }

inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }

inline double exp_s(double x) { return std::exp(x); }
inline Dual exp_s(Dual x) {
  const double e = std::exp(x.v);
  return {e, e * x.d};
}
inline double log_s(double x) { return std::log(x); }
inline Dual log_s(Dual x) { return {std::log(x.v), x.d / x.v}; }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline Dual sigmoid(Dual x) {
  const double s = sigmoid(x.v);
  return {s, s * (1.0 - s) * x.d};
}

inline double tanh_s(double x) { return std::tanh(x); }
inline Dual tanh_s(Dual x) {
  const double t = std::tanh(x.v);
  return {t, (1.0 - t * t) * x.d};
}

inline double softplus(double x) {
  // max(x,0) + log1p(exp(-|x|)) is stable for any magnitude
  return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
inline Dual softplus(Dual x) { return {softplus(x.v), sigmoid(x.v) * x.d}; }

template <class S>
S activate(Activation a, S z) {
  return a == Activation::kTanh ? tanh_s(z) : softplus(z);
}
template <class S>
S activate_deriv(Activation a, S z) {
  if (a == Activation::kTanh) {
    S t = tanh_s(z);
    return 1.0 - t * t;
  }
  return sigmoid(z);
}

// softmax probabilities and -log p_y via log-sum-exp with max subtraction
template <class S>
S softmax_and_loss(const std::vector<S>& logits, int y, std::vector<S>& probs) {
  std::size_t arg = 0;
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (value_of(logits[k]) > value_of(logits[arg])) arg = k;
  const S zmax = logits[arg];
  S sum{};
  probs.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    probs[k] = exp_s(logits[k] - zmax);
    sum += probs[k];
  }
  const S lse = zmax + log_s(sum);
  for (std::size_t k = 0; k < logits.size(); ++k) probs[k] = probs[k] / sum;
  return lse - logits[static_cast<std::size_t>(y)];
}

}  // namespace detail

// Adding a constant to every class logit leaves softmax unchanged, so the
// data Hessian of the linear family has an exact null direction along the
// per-class bias sum (biases carry no regularization). Completing the gauge
// with a rank-one term makes the factorization well defined; data-gradient
// right-hand sides are orthogonal to the direction, so solves against the
// completed matrix agree with the pseudo-inverse solution.
inline void add_bias_shift_gauge(Matrix& h, const ArchitectureSpec& spec) {
  if (!spec.hidden_dims.empty()) return;
  const std::size_t d = spec.input_dim, k = spec.num_classes;
  double trace = 0.0;
  for (std::size_t i = 0; i < h.rows; ++i) trace += h(i, i);
  const double mu = 1.0 + trace / static_cast<double>(h.rows);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) h(k * d + a, k * d + b) += mu / static_cast<double>(k);
}

// Per-sample loss/gradient/HVP evaluator at fixed parameters. Immutable
// after construction; safe to share across threads.
class GradEngine {
public:
  GradEngine(ArchitectureSpec spec, ParameterVector params)
      : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    params_.check_matches(spec_);
    widths_ = spec_.widths();
  }

  const ArchitectureSpec& spec() const { return spec_; }
  const ParameterVector& params() const { return params_; }
  std::size_t param_count() const { return params_.values.size(); }

  void check_input_dim(std::size_t d) const {
    if (d != spec_.input_dim)
      throw DataError("GradEngine: input dimension " + std::to_string(d) +
                      " does not match spec input_dim " + std::to_string(spec_.input_dim));
  }

  void check_label(int y) const {
    if (y < 0 || static_cast<std::size_t>(y) >= spec_.num_classes)
      throw DataError("GradEngine: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(spec_.num_classes) + ")");
  }

  // Class probabilities; entries in (0,1) summing to 1.
  Vector forward(const Vector& x) const {
    check_input_dim(x.size());
    return forward_raw(x.data());
  }

  Vector forward_raw(const double* x) const {
    std::vector<double> logits = compute_logits(params_.values.data(), x);
    std::vector<double> probs;
    detail::softmax_and_loss(logits, 0, probs);
    return probs;
  }

  // Cross-entropy -ln p_y, plus (lambda/2) * ||weights||^2 when include_reg.
  double loss(const SampleRef& s, bool include_reg) const {
    check_label(s.label);
    std::vector<double> logits = compute_logits(params_.values.data(), s.x);
    std::vector<double> probs;
    double l = detail::softmax_and_loss(logits, s.label, probs);
    if (include_reg) l += 0.5 * spec_.l2_lambda * weight_sq_norm(params_.values);
    return l;
  }

  double loss(const Vector& x, int y, bool include_reg) const {
    check_input_dim(x.size());
    return loss(SampleRef{x.data(), y}, include_reg);
  }

  // Analytic gradient of loss with respect to the flat parameter vector.
  Vector grad(const SampleRef& s, bool include_reg) const {
    check_label(s.label);
    Vector g(param_count(), 0.0);
    if (is_linear())
      linear_grad_accum(s, g.data());
    else
      mlp_grad_accum<double>(params_.values.data(), s, g.data());
    if (include_reg) add_reg_grad(params_.values, g);
    return g;
  }

  Vector grad(const Vector& x, int y, bool include_reg) const {
    check_input_dim(x.size());
    return grad(SampleRef{x.data(), y}, include_reg);
  }

  // Hessian-vector product of the mean batch loss: (1/|batch|) sum H_i v,
  // plus lambda * v on weight coordinates when include_reg.
  Vector hvp(const Batch& batch, const Vector& v, bool include_reg) const {
    if (batch.empty()) throw DataError("hvp: empty batch");
    if (v.size() != param_count()) throw DataError("hvp: vector length mismatch");
    Vector out(param_count(), 0.0);
    if (is_linear()) {
      for (const SampleRef& s : batch) linear_hvp_accum(s, v, out.data());
    } else {
      // forward-over-reverse: tangent of the gradient at theta along v
      std::vector<detail::Dual> dual_params(param_count());
      for (std::size_t i = 0; i < param_count(); ++i)
        dual_params[i] = {params_.values[i], v[i]};
      std::vector<detail::Dual> dual_grad(param_count());
      for (const SampleRef& s : batch) {
        check_label(s.label);
        for (auto& g : dual_grad) g = {0.0, 0.0};
        mlp_grad_accum<detail::Dual>(dual_params.data(), s, dual_grad.data());
        for (std::size_t i = 0; i < param_count(); ++i) out[i] += dual_grad[i].d;
      }
    }
    scale(1.0 / static_cast<double>(batch.size()), out);
    if (include_reg && spec_.l2_lambda != 0.0)
      for_each_weight_span([&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) out[i] += spec_.l2_lambda * v[i];
      });
    return out;
  }

  // Explicit mean Hessian of the full regularized objective over the batch,
  // plus damping * I. Softmax-linear uses the closed per-sample block form;
  // the MLP assembles HVP columns. Result is symmetrized.
  Matrix build_hessian(const Batch& train, double damping) const {
    const std::size_t p = param_count();
    if (p > kExplicitHessianLimit)
      throw DataError("build_hessian: p = " + std::to_string(p) + " exceeds explicit limit " +
                      std::to_string(kExplicitHessianLimit) + "; use the cg or lissa strategy");
    Matrix h(p, p);
    if (is_linear()) {
      linear_hessian_accum(train, h);
    } else {
      if (train.empty()) throw DataError("build_hessian: empty batch");
      Vector e(p, 0.0);
      for (std::size_t j = 0; j < p; ++j) {
        e[j] = 1.0;
        Vector col = hvp(train, e, /*include_reg=*/true);
        for (std::size_t i = 0; i < p; ++i) h(i, j) = col[i];
        e[j] = 0.0;
      }
    }
    // exact symmetry; column assembly is symmetric only to rounding
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = i + 1; j < p; ++j) {
        const double s = 0.5 * (h(i, j) + h(j, i));
        h(i, j) = s;
        h(j, i) = s;
      }
    if (damping != 0.0)
      for (std::size_t i = 0; i < p; ++i) h(i, i) += damping;
    return h;
  }

  bool is_linear() const { return spec_.hidden_dims.empty(); }

  // Convexity guard: true when the full influence Hessian is PD by
  // construction (regularized softmax regression).
  bool is_convex() const { return is_linear(); }

  template <class Fn>
  void for_each_weight_span(Fn&& fn) const {
    for (std::size_t k = 0; k < spec_.num_layers(); ++k) {
      const std::size_t b = params_.layer_offsets[k].begin;
      fn(b, b + widths_[k] * widths_[k + 1]);
    }
  }

  static constexpr std::size_t kExplicitHessianLimit = 4096;

private:
  double weight_sq_norm(const Vector& theta) const {
    double s = 0.0;
    for_each_weight_span([&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) s += theta[i] * theta[i];
    });
    return s;
  }

  void add_reg_grad(const Vector& theta, Vector& g) const {
    if (spec_.l2_lambda == 0.0) return;
    for_each_weight_span([&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) g[i] += spec_.l2_lambda * theta[i];
    });
  }

  template <class S>
  std::vector<S> compute_logits_t(const S* theta, const double* x) const {
    const std::size_t nl = spec_.num_layers();
    std::vector<S> act(x, x + spec_.input_dim);  // promotes double -> S
    std::vector<S> z;
    for (std::size_t k = 0; k < nl; ++k) {
      const std::size_t fan_in = widths_[k], fan_out = widths_[k + 1];
      const S* wk = theta + params_.layer_offsets[k].begin;
      const S* bk = wk + fan_in * fan_out;
      z.assign(fan_out, S{});
      for (std::size_t o = 0; o < fan_out; ++o) {
        S s = bk[o];
        for (std::size_t i = 0; i < fan_in; ++i) s += wk[o * fan_in + i] * act[i];
        z[o] = s;
      }
      if (k + 1 < nl) {
        act.resize(fan_out);
        for (std::size_t o = 0; o < fan_out; ++o) act[o] = detail::activate(spec_.activation, z[o]);
      }
    }
    return z;
  }

  std::vector<double> compute_logits(const double* theta, const double* x) const {
    return compute_logits_t<double>(theta, x);
  }

  // ---- softmax-linear closed forms ----

  void linear_grad_accum(const SampleRef& s, double* g) const {
    const std::size_t d = spec_.input_dim, kk = spec_.num_classes;
    std::vector<double> logits = compute_logits(params_.values.data(), s.x);
    std::vector<double> p;
    detail::softmax_and_loss(logits, s.label, p);
    for (std::size_t k = 0; k < kk; ++k) {
      const double dz = p[k] - (static_cast<int>(k) == s.label ? 1.0 : 0.0);
      double* gw = g + k * d;
      for (std::size_t i = 0; i < d; ++i) gw[i] += dz * s.x[i];
      g[kk * d + k] += dz;
    }
  }

  // A v where A = J' (diag(p) - p p') J: t = p .* s - (p' s) p with
  // s_k = v_wk . x + v_bk, scattered back through J.
  void linear_hvp_accum(const SampleRef& s, const Vector& v, double* out) const {
    check_label(s.label);
    const std::size_t d = spec_.input_dim, kk = spec_.num_classes;
    std::vector<double> logits = compute_logits(params_.values.data(), s.x);
    std::vector<double> p;
    detail::softmax_and_loss(logits, s.label, p);
    std::vector<double> sv(kk);
    for (std::size_t k = 0; k < kk; ++k) {
      double acc = v[kk * d + k];
      const double* vw = v.data() + k * d;
      for (std::size_t i = 0; i < d; ++i) acc += vw[i] * s.x[i];
      sv[k] = acc;
    }
    double ps = 0.0;
    for (std::size_t k = 0; k < kk; ++k) ps += p[k] * sv[k];
    for (std::size_t k = 0; k < kk; ++k) {
      const double t = p[k] * (sv[k] - ps);
      double* ow = out + k * d;
      for (std::size_t i = 0; i < d; ++i) ow[i] += t * s.x[i];
      out[kk * d + k] += t;
    }
  }

  void linear_hessian_accum(const Batch& train, Matrix& h) const {
    if (train.empty()) throw DataError("build_hessian: empty batch");
    const std::size_t d = spec_.input_dim, kk = spec_.num_classes;
    const double inv_n = 1.0 / static_cast<double>(train.size());
    std::vector<double> aug(d + 1);
    auto coord = [&](std::size_t k, std::size_t i) {
      return i < d ? k * d + i : kk * d + k;
    };
    for (const SampleRef& s : train) {
      check_label(s.label);
      std::vector<double> logits = compute_logits(params_.values.data(), s.x);
      std::vector<double> p;
      detail::softmax_and_loss(logits, s.label, p);
      for (std::size_t i = 0; i < d; ++i) aug[i] = s.x[i];
      aug[d] = 1.0;
      for (std::size_t k = 0; k < kk; ++k) {
        for (std::size_t l = 0; l < kk; ++l) {
          const double a_kl = (k == l ? p[k] * (1.0 - p[k]) : -p[k] * p[l]) * inv_n;
          if (a_kl == 0.0) continue;
          for (std::size_t i = 0; i <= d; ++i) {
            const double f = a_kl * aug[i];
            const std::size_t row = coord(k, i);
            for (std::size_t j = 0; j <= d; ++j) h(row, coord(l, j)) += f * aug[j];
          }
        }
      }
    }
    if (spec_.l2_lambda != 0.0)
      for_each_weight_span([&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) h(i, i) += spec_.l2_lambda;
      });
  }

  // ---- MLP reverse mode, generic over double / Dual ----

  template <class S>
  void mlp_grad_accum(const S* theta, const SampleRef& s, S* g) const {
    const std::size_t nl = spec_.num_layers();
    // forward, keeping activations (acts[k] feeds layer k) and pre-activations
    std::vector<std::vector<S>> acts(nl);
    std::vector<std::vector<S>> zs(nl);
    acts[0].assign(s.x, s.x + spec_.input_dim);
    for (std::size_t k = 0; k < nl; ++k) {
      const std::size_t fan_in = widths_[k], fan_out = widths_[k + 1];
      const S* wk = theta + params_.layer_offsets[k].begin;
      const S* bk = wk + fan_in * fan_out;
      zs[k].assign(fan_out, S{});
      for (std::size_t o = 0; o < fan_out; ++o) {
        S acc = bk[o];
        for (std::size_t i = 0; i < fan_in; ++i) acc += wk[o * fan_in + i] * acts[k][i];
        zs[k][o] = acc;
      }
      if (k + 1 < nl) {
        acts[k + 1].resize(fan_out);
        for (std::size_t o = 0; o < fan_out; ++o)
          acts[k + 1][o] = detail::activate(spec_.activation, zs[k][o]);
      }
    }
    std::vector<S> probs;
    detail::softmax_and_loss(zs[nl - 1], s.label, probs);

    // backward
    std::vector<S> dz(spec_.num_classes);
    for (std::size_t k = 0; k < spec_.num_classes; ++k)
      dz[k] = probs[k] - (static_cast<int>(k) == s.label ? 1.0 : 0.0);
    for (std::size_t kk = nl; kk > 0; --kk) {
      const std::size_t k = kk - 1;
      const std::size_t fan_in = widths_[k], fan_out = widths_[k + 1];
      const S* wk = theta + params_.layer_offsets[k].begin;
      S* gw = g + params_.layer_offsets[k].begin;
      S* gb = gw + fan_in * fan_out;
      for (std::size_t o = 0; o < fan_out; ++o) {
        for (std::size_t i = 0; i < fan_in; ++i) gw[o * fan_in + i] += dz[o] * acts[k][i];
        gb[o] += dz[o];
      }
      if (k > 0) {
        std::vector<S> da(fan_in, S{});
        for (std::size_t o = 0; o < fan_out; ++o)
          for (std::size_t i = 0; i < fan_in; ++i) da[i] += wk[o * fan_in + i] * dz[o];
        dz.resize(fan_in);
        for (std::size_t i = 0; i < fan_in; ++i)
          dz[i] = da[i] * detail::activate_deriv(spec_.activation, zs[k - 1][i]);
      }
    }
  }

  ArchitectureSpec spec_;
  ParameterVector params_;
  std::vector<std::size_t> widths_;
};

}  // namespace ibtl
