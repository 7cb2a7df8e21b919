#pragma once

// Parameter transfer and fine-tuning: full or hybrid (shallow-layer) loading
// of pre-trained parameters, per-layer freezing, Adam/SGD mini-batch
// training with the fixed x0.1 learning-rate drop at half the epochs, and
// argmax evaluation with per-class confusion counts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ibtl/data.hpp"
#include "ibtl/errors.hpp"
#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"

namespace ibtl {

struct TransferPlan {
  enum class Mode { kFullLoad, kHybrid };
  Mode mode = Mode::kFullLoad;
  std::size_t shallow_layers = 0;  // hybrid: number of leading layers loaded
  std::set<std::size_t> frozen_layers;
  std::uint64_t init_seed = 0;  // seeds the randomly initialized remainder

  std::string describe() const {
    if (mode == Mode::kFullLoad) return "full_load";
    return "hybrid(k=" + std::to_string(shallow_layers) + ")";
  }

  void validate(const ArchitectureSpec& target) const {
    const std::size_t nl = target.num_layers();
    if (mode == Mode::kHybrid && shallow_layers > nl)
      throw DataError("TransferPlan: shallow layer count " + std::to_string(shallow_layers) +
                      " exceeds layer count " + std::to_string(nl));
    for (std::size_t f : frozen_layers) {
      if (f >= nl)
        throw DataError("TransferPlan: frozen layer " + std::to_string(f) + " out of range");
      if (mode == Mode::kHybrid && f >= shallow_layers)
        throw DataError("TransferPlan: frozen layer " + std::to_string(f) +
                        " was not loaded from the source model");
    }
  }
};

// Loaded layer slices are bit-equal to the source; the remainder comes from
// a fresh full-spec Xavier draw on the plan seed (so the random part does
// not depend on how many layers were loaded).
inline ParameterVector transfer_parameters(const ArchitectureSpec& source_spec,
                                           const ParameterVector& source_params,
                                           const ArchitectureSpec& target_spec,
                                           const TransferPlan& plan) {
  source_params.check_matches(source_spec);
  target_spec.validate();
  plan.validate(target_spec);

  const auto sw = source_spec.widths();
  const auto tw = target_spec.widths();
  const std::size_t loaded =
      plan.mode == TransferPlan::Mode::kFullLoad ? target_spec.num_layers() : plan.shallow_layers;

  if (plan.mode == TransferPlan::Mode::kFullLoad) {
    if (sw != tw || source_spec.activation != target_spec.activation)
      throw DataError("transfer_parameters: full load requires identical architectures");
  } else {
    if (loaded > source_spec.num_layers())
      throw DataError("transfer_parameters: source has only " +
                      std::to_string(source_spec.num_layers()) + " layers");
    for (std::size_t k = 0; k < loaded; ++k)
      if (sw[k] != tw[k] || sw[k + 1] != tw[k + 1])
        throw DataError("transfer_parameters: layer " + std::to_string(k) +
                        " shape mismatch (source " + std::to_string(sw[k]) + "->" +
                        std::to_string(sw[k + 1]) + ", target " + std::to_string(tw[k]) + "->" +
                        std::to_string(tw[k + 1]) + ")");
  }

  RngStream rng(plan.init_seed);
  ParameterVector out = init_xavier(target_spec, rng);
  const auto src_offsets = make_layer_offsets(source_spec);
  for (std::size_t k = 0; k < loaded; ++k) {
    const LayerSpan s = src_offsets[k];
    const LayerSpan t = out.layer_offsets[k];
    for (std::size_t i = 0; i < s.end - s.begin; ++i)
      out.values[t.begin + i] = source_params.values[s.begin + i];
  }
  return out;
}

struct FineTuneConfig {
  enum class Optimizer { kAdam, kSgd };
  Optimizer optimizer = Optimizer::kAdam;
  double lr = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double sgd_momentum = 0.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (epochs < 1) throw DataError("FineTuneConfig: epochs must be >= 1");
    if (batch_size < 1) throw DataError("FineTuneConfig: batch_size must be >= 1");
    if (lr <= 0.0) throw DataError("FineTuneConfig: learning rate must be positive");
  }

  // learning rate in effect at an epoch: dropped by x0.1 from ceil(epochs/2)
  double lr_at(std::size_t epoch) const { return epoch >= (epochs + 1) / 2 ? lr * 0.1 : lr; }
};

// First-moment/second-moment state with bias correction. Exposed so the
// first-step property (|step| ~= lr per coordinate) is testable directly.
struct AdamState {
  Vector m;
  Vector v;
  std::size_t t = 0;

  explicit AdamState(std::size_t p) : m(p, 0.0), v(p, 0.0) {}

  void step(Vector& theta, const Vector& g, double lr, const FineTuneConfig& cfg) {
    ++t;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
};

struct EpochStats {
  double train_loss = 0.0;  // full-batch regularized objective at epoch end
  double val_loss = 0.0;    // mean data loss on the validation set
  double val_error = 0.0;
  double lr = 0.0;
};

using TrainingHistory = std::vector<EpochStats>;

struct EvalResult {
  double error_rate = 0.0;
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

// Argmax decision with ties broken toward the lowest class index.
inline EvalResult evaluate(const ArchitectureSpec& spec, const ParameterVector& params,
                           const Dataset& test) {
  if (test.size() == 0) throw DataError("evaluate: empty test set");
  GradEngine engine(spec, params);
  engine.check_input_dim(test.dim());
  EvalResult res;
  res.n = test.size();
  res.confusion.assign(spec.num_classes, std::vector<std::size_t>(spec.num_classes, 0));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    Vector p = engine.forward_raw(test.features.data.data() + i * test.dim());
    std::size_t arg = 0;
    for (std::size_t k = 1; k < p.size(); ++k)
      if (p[k] > p[arg]) arg = k;
    const int truth = test.labels[i];
    if (truth < 0 || static_cast<std::size_t>(truth) >= spec.num_classes)
      throw DataError("evaluate: label " + std::to_string(truth) + " outside model classes");
    res.confusion[static_cast<std::size_t>(truth)][arg]++;
    if (arg != static_cast<std::size_t>(truth)) ++wrong;
  }
  res.error_rate = static_cast<double>(wrong) / static_cast<double>(test.size());
  return res;
}

namespace detail {

inline double full_objective(const ArchitectureSpec& spec, const ParameterVector& params,
                             const Batch& batch) {
  GradEngine engine(spec, params);
  double l = 0.0;
  for (const SampleRef& s : batch) l += engine.loss(s, false);
  l /= static_cast<double>(batch.size());
  if (spec.l2_lambda != 0.0) {
    double sq = 0.0;
    engine.for_each_weight_span([&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) sq += params.values[i] * params.values[i];
    });
    l += 0.5 * spec.l2_lambda * sq;
  }
  return l;
}

inline double mean_data_loss(const ArchitectureSpec& spec, const ParameterVector& params,
                             const Batch& batch) {
  GradEngine engine(spec, params);
  double l = 0.0;
  for (const SampleRef& s : batch) l += engine.loss(s, false);
  return l / static_cast<double>(batch.size());
}

}  // namespace detail

// Mini-batch training of the regularized softmax objective. Frozen layers
// have their gradients zeroed before the optimizer, so their slices (and
// their optimizer state) never change. The final short batch is used, which
// keeps single-epoch runs on tiny datasets exactly reproducible.
inline std::pair<ParameterVector, TrainingHistory> fine_tune(
    const ArchitectureSpec& spec, const ParameterVector& params0, const Dataset& train,
    const Dataset& validation, const FineTuneConfig& config, const TransferPlan& plan = {}) {
  spec.validate();
  config.validate();
  plan.validate(spec);
  params0.check_matches(spec);
  if (train.size() == 0) throw DataError("fine_tune: empty training set");
  GradEngine probe(spec, params0);
  probe.check_input_dim(train.dim());
  if (validation.size() > 0) probe.check_input_dim(validation.dim());

  const std::size_t p = spec.param_count();
  ParameterVector params = params0;
  AdamState adam(p);
  Vector velocity(p, 0.0);
  RngStream shuffle_rng(config.shuffle_seed);
  Batch train_batch = make_batch(train.features, train.labels);
  Batch val_batch =
      validation.size() > 0 ? make_batch(validation.features, validation.labels) : Batch{};

  std::vector<char> frozen(p, 0);
  for (std::size_t layer : plan.frozen_layers) {
    const LayerSpan span = params.layer_offsets[layer];
    for (std::size_t i = span.begin; i < span.end; ++i) frozen[i] = 1;
  }

  TrainingHistory history;
  history.reserve(config.epochs);
  Vector g(p);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    std::vector<std::size_t> order = shuffled_indices(train.size(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      GradEngine engine(spec, params);
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t bi = start; bi < stop; ++bi)
        axpy(1.0, engine.grad(train_batch[order[bi]], false), g);
      scale(1.0 / static_cast<double>(stop - start), g);
      if (spec.l2_lambda != 0.0)
        engine.for_each_weight_span([&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) g[i] += spec.l2_lambda * params.values[i];
        });
      for (std::size_t i = 0; i < p; ++i)
        if (frozen[i]) g[i] = 0.0;

      if (config.optimizer == FineTuneConfig::Optimizer::kAdam) {
        adam.step(params.values, g, lr, config);
      } else {
        for (std::size_t i = 0; i < p; ++i) {
          velocity[i] = config.sgd_momentum * velocity[i] - lr * g[i];
          params.values[i] += velocity[i];
        }
      }
      for (double v : params.values)
        if (!std::isfinite(v))
          throw NumericalError("fine_tune: parameters diverged at epoch " +
                               std::to_string(epoch) + ", batch " +
                               std::to_string(start / config.batch_size));
    }

    EpochStats stats;
    stats.lr = lr;
    stats.train_loss = detail::full_objective(spec, params, train_batch);
    if (!std::isfinite(stats.train_loss))
      throw NumericalError("fine_tune: training loss diverged at epoch " + std::to_string(epoch));
    if (!val_batch.empty()) {
      stats.val_loss = detail::mean_data_loss(spec, params, val_batch);
      stats.val_error = evaluate(spec, params, validation).error_rate;
    }
    history.push_back(stats);
  }
  return {std::move(params), std::move(history)};
}

}  // namespace ibtl
