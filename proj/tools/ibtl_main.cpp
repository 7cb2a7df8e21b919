// Command-line front end for the instance-based transfer-learning pipeline:
//   pretrain    train a source-domain model from Xavier init
//   dropout     score target training samples with the pre-trained model and
//               remove positive-influence ones
//   finetune    load parameters per the transfer plan and fine-tune
//   eval        error rate + per-class confusion for a checkpoint on a CSV
//   loo-oracle  exact leave-one-out retraining deltas (convex models only)
//   pipeline    end to end, with from-scratch / model-based / instance-based
//               comparison arms
//
// All randomness is derived from the config seed; identical config and seeds
// give byte-identical outputs. Exit codes: 0 ok, 1 numerical failure,
// 2 I/O or configuration error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ibtl/checkpoint.hpp"
#include "ibtl/data.hpp"
#include "ibtl/dropout.hpp"
#include "ibtl/errors.hpp"
#include "ibtl/influence.hpp"
#include "ibtl/loo.hpp"
#include "ibtl/model.hpp"
#include "ibtl/numkit.hpp"
#include "ibtl/transfer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ibtl;

namespace {

// fixed offsets from the master seed, one per independent random stream
constexpr std::uint64_t kSeedData = 0;
constexpr std::uint64_t kSeedPretrainInit = 1;
constexpr std::uint64_t kSeedPretrainShuffle = 2;
constexpr std::uint64_t kSeedLissa = 3;
constexpr std::uint64_t kSeedTransferInit = 4;
constexpr std::uint64_t kSeedFinetuneShuffle = 5;
constexpr std::uint64_t kSeedScratchInit = 6;
constexpr std::uint64_t kSeedScratchShuffle = 7;

struct GeneratorConfig {
  std::string kind = "domain_pair";  // or "blobs"
  std::size_t classes = 3;
  std::size_t dim = 5;
  double spread = 3.0;
  double noise = 0.4;
  std::size_t n_source = 2000;
  std::size_t n_target = 300;
  std::size_t n_test = 300;
  std::size_t n = 300;  // blobs total (train+val)
  ShiftSpec shift;
  double corrupt_fraction = 0.0;
};

// one dataset reference: a CSV path, or an IDX image/label file pair
struct DataRef {
  std::string csv;
  std::string idx_images;
  std::string idx_labels;

  bool empty() const { return csv.empty() && idx_images.empty(); }

  Dataset load(std::size_t num_classes) const {
    if (!csv.empty()) return load_csv(csv, num_classes);
    return load_idx(idx_images, idx_labels);
  }
};

struct DataPaths {
  DataRef source_train;
  DataRef source_val;
  DataRef target_train;
  DataRef target_val;
  DataRef target_test;
};

struct AppConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  bool has_generator = false;
  GeneratorConfig gen;
  DataPaths paths;
  double val_fraction = 0.10;

  std::vector<std::size_t> hidden_dims;
  Activation activation = Activation::kTanh;
  double l2_lambda = 0.01;
  std::size_t num_classes = 0;  // 0: derive from data

  IhvpStrategy ihvp;
  std::string reference = "all";

  TransferPlan::Mode transfer_mode = TransferPlan::Mode::kFullLoad;
  std::size_t shallow_layers = 1;
  std::set<std::size_t> frozen_layers;

  FineTuneConfig pretrain;
  FineTuneConfig finetune;

  double max_drop_fraction = 0.5;
  double newton_tol = 1e-10;
};

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

FineTuneConfig parse_train_section(const json& j, FineTuneConfig defaults) {
  FineTuneConfig cfg = defaults;
  if (j.is_null()) return cfg;
  const std::string opt = get_or<std::string>(j, "optimizer", "adam");
  if (opt == "adam")
    cfg.optimizer = FineTuneConfig::Optimizer::kAdam;
  else if (opt == "sgd")
    cfg.optimizer = FineTuneConfig::Optimizer::kSgd;
  else
    throw DataError("config: unknown optimizer '" + opt + "'");
  cfg.lr = get_or<double>(j, "lr", cfg.lr);
  cfg.sgd_momentum = get_or<double>(j, "momentum", cfg.sgd_momentum);
  cfg.epochs = get_or<std::size_t>(j, "epochs", cfg.epochs);
  cfg.batch_size = get_or<std::size_t>(j, "batch_size", cfg.batch_size);
  return cfg;
}

AppConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("config: cannot open '" + path + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw DataError("config: '" + path + "' is not valid JSON: " + e.what());
  }

  AppConfig cfg;
  try {
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
    cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);

    if (j.contains("data")) {
      const json& data = j.at("data");
      cfg.val_fraction = get_or<double>(data, "val_fraction", cfg.val_fraction);
      if (data.contains("generator")) {
        cfg.has_generator = true;
        const json& g = data.at("generator");
        cfg.gen.kind = get_or<std::string>(g, "kind", cfg.gen.kind);
        if (cfg.gen.kind != "domain_pair" && cfg.gen.kind != "blobs")
          throw DataError("config: generator kind must be domain_pair or blobs");
        cfg.gen.classes = get_or<std::size_t>(g, "classes", cfg.gen.classes);
        cfg.gen.dim = get_or<std::size_t>(g, "dim", cfg.gen.dim);
        cfg.gen.spread = get_or<double>(g, "spread", cfg.gen.spread);
        cfg.gen.noise = get_or<double>(g, "noise", cfg.gen.noise);
        cfg.gen.n_source = get_or<std::size_t>(g, "n_source", cfg.gen.n_source);
        cfg.gen.n_target = get_or<std::size_t>(g, "n_target", cfg.gen.n_target);
        cfg.gen.n_test = get_or<std::size_t>(g, "n_test", cfg.gen.n_test);
        cfg.gen.n = get_or<std::size_t>(g, "n", cfg.gen.n);
        cfg.gen.corrupt_fraction = get_or<double>(g, "corrupt_fraction", 0.0);
        if (g.contains("shift")) {
          const json& s = g.at("shift");
          cfg.gen.shift.mean_offset = get_or<double>(s, "mean_offset", 0.0);
          cfg.gen.shift.rotation = get_or<double>(s, "rotation", 0.0);
          cfg.gen.shift.noise_scale = get_or<double>(s, "noise_scale", 1.0);
        }
      } else {
        auto parse_ref = [&](const std::string& key) {
          DataRef ref;
          if (!data.contains(key)) return ref;
          const json& v = data.at(key);
          if (v.is_string()) {
            ref.csv = v.get<std::string>();
          } else if (v.is_object()) {
            ref.idx_images = v.at("images").get<std::string>();
            ref.idx_labels = v.at("labels").get<std::string>();
          } else {
            throw DataError("config: data." + key +
                            " must be a CSV path or {\"images\":..., \"labels\":...}");
          }
          return ref;
        };
        cfg.paths.source_train = parse_ref("source_train");
        cfg.paths.source_val = parse_ref("source_val");
        cfg.paths.target_train = parse_ref("target_train");
        cfg.paths.target_val = parse_ref("target_val");
        cfg.paths.target_test = parse_ref("target_test");
      }
    }

    if (j.contains("model")) {
      const json& m = j.at("model");
      cfg.hidden_dims = get_or<std::vector<std::size_t>>(m, "hidden_dims", {});
      cfg.activation = activation_from_name(get_or<std::string>(m, "activation", "tanh"));
      cfg.l2_lambda = get_or<double>(m, "l2_lambda", cfg.l2_lambda);
      cfg.num_classes = get_or<std::size_t>(m, "num_classes", 0);
    }

    if (j.contains("ihvp")) {
      const json& s = j.at("ihvp");
      cfg.ihvp.kind = ihvp_kind_from_name(get_or<std::string>(s, "kind", "cg"));
      cfg.ihvp.damping = get_or<double>(s, "damping", 0.0);
      cfg.ihvp.cg_tol = get_or<double>(s, "cg_tol", cfg.ihvp.cg_tol);
      cfg.ihvp.cg_max_iter = get_or<std::size_t>(s, "cg_max_iter", 0);
      cfg.ihvp.lissa_depth = get_or<std::size_t>(s, "lissa_depth", cfg.ihvp.lissa_depth);
      cfg.ihvp.lissa_scale = get_or<double>(s, "lissa_scale", cfg.ihvp.lissa_scale);
      cfg.ihvp.lissa_batch = get_or<std::size_t>(s, "lissa_batch", cfg.ihvp.lissa_batch);
      cfg.ihvp.lissa_repeats = get_or<std::size_t>(s, "lissa_repeats", cfg.ihvp.lissa_repeats);
    }
    cfg.reference = get_or<std::string>(j, "reference", "all");

    if (j.contains("transfer")) {
      const json& t = j.at("transfer");
      const std::string mode = get_or<std::string>(t, "mode", "full_load");
      if (mode == "full_load")
        cfg.transfer_mode = TransferPlan::Mode::kFullLoad;
      else if (mode == "hybrid")
        cfg.transfer_mode = TransferPlan::Mode::kHybrid;
      else
        throw DataError("config: transfer mode must be full_load or hybrid");
      cfg.shallow_layers = get_or<std::size_t>(t, "shallow_layers", 1);
      for (std::size_t v : get_or<std::vector<std::size_t>>(t, "frozen_layers", {}))
        cfg.frozen_layers.insert(v);
    }

    FineTuneConfig pre_defaults;
    pre_defaults.epochs = 2;  // source models are trained briefly
    pre_defaults.batch_size = 128;
    cfg.pretrain =
        parse_train_section(j.contains("pretrain") ? j.at("pretrain") : json(), pre_defaults);
    FineTuneConfig ft_defaults;
    ft_defaults.epochs = 100;
    ft_defaults.batch_size = 128;
    cfg.finetune =
        parse_train_section(j.contains("finetune") ? j.at("finetune") : json(), ft_defaults);

    if (j.contains("dropout"))
      cfg.max_drop_fraction = get_or<double>(j.at("dropout"), "max_drop_fraction", 0.5);
    cfg.newton_tol = get_or<double>(j, "newton_tol", cfg.newton_tol);
  } catch (const json::exception& e) {
    throw DataError("config: '" + path + "' malformed: " + e.what());
  }
  return cfg;
}

void parse_reference(const std::string& text, ValidationReference::Mode& mode, int& cls) {
  if (text == "all") {
    mode = ValidationReference::Mode::kAll;
    cls = -1;
    return;
  }
  if (text.rfind("class:", 0) == 0) {
    mode = ValidationReference::Mode::kClassRestricted;
    cls = std::stoi(text.substr(6));
    return;
  }
  throw DataError("reference mode must be 'all' or 'class:<k>', got '" + text + "'");
}

struct DataBundle {
  std::optional<Dataset> source_train;
  std::optional<Dataset> source_val;
  Dataset target_train;
  Dataset target_val;
  std::optional<Dataset> target_test;
  std::vector<std::int64_t> flipped_ids;  // corruption ground truth, if injected
};

DataBundle generate_bundle(const AppConfig& cfg) {
  RngStream rng(cfg.seed + kSeedData);
  DataBundle b;
  const GeneratorConfig& g = cfg.gen;
  if (g.kind == "domain_pair") {
    DomainPair pair = gen_domain_pair(g.classes, g.dim, g.spread, g.noise, g.shift, g.n_source,
                                      g.n_target + g.n_test, rng);
    auto [strain, sval] = split_validation(pair.source, cfg.val_fraction, rng);
    b.source_train = std::move(strain);
    b.source_val = std::move(sval);
    std::vector<std::size_t> pool_idx, test_idx;
    for (std::size_t i = 0; i < g.n_target; ++i) pool_idx.push_back(i);
    for (std::size_t i = g.n_target; i < g.n_target + g.n_test; ++i) test_idx.push_back(i);
    Dataset pool = pair.target.subset(pool_idx);
    b.target_test = pair.target.subset(test_idx);
    auto [ttrain, tval] = split_validation(pool, cfg.val_fraction, rng);
    b.target_train = std::move(ttrain);
    b.target_val = std::move(tval);
  } else {
    Dataset all = gen_blobs(g.classes, g.n + g.n_test, g.dim, g.spread, g.noise, rng);
    std::vector<std::size_t> pool_idx, test_idx;
    for (std::size_t i = 0; i < g.n; ++i) pool_idx.push_back(i);
    for (std::size_t i = g.n; i < g.n + g.n_test; ++i) test_idx.push_back(i);
    Dataset pool = all.subset(pool_idx);
    if (g.n_test > 0) b.target_test = all.subset(test_idx);
    auto [ttrain, tval] = split_validation(pool, cfg.val_fraction, rng);
    b.target_train = std::move(ttrain);
    b.target_val = std::move(tval);
  }
  if (g.corrupt_fraction > 0.0) {
    auto [bad, flipped] = corrupt_labels(b.target_train, g.corrupt_fraction, rng);
    b.target_train = std::move(bad);
    b.flipped_ids = std::move(flipped);
  }
  return b;
}

DataBundle load_bundle(const AppConfig& cfg) {
  DataBundle b;
  const DataPaths& p = cfg.paths;
  if (p.target_train.empty())
    throw DataError("config: data.target_train path is required when no generator is configured");
  b.target_train = p.target_train.load(cfg.num_classes);
  if (!p.source_train.empty()) b.source_train = p.source_train.load(cfg.num_classes);
  if (!p.source_val.empty()) b.source_val = p.source_val.load(cfg.num_classes);
  if (!p.target_test.empty()) b.target_test = p.target_test.load(cfg.num_classes);
  if (!p.target_val.empty()) {
    b.target_val = p.target_val.load(cfg.num_classes);
  } else {
    // no validation set given: separate a fraction of the training samples
    RngStream rng(cfg.seed + kSeedData);
    auto [train, val] = split_validation(b.target_train, cfg.val_fraction, rng);
    b.target_train = std::move(train);
    b.target_val = std::move(val);
  }
  // consistent class count across the bundle
  std::size_t k = cfg.num_classes;
  auto bump = [&](const Dataset& ds) { k = std::max(k, ds.num_classes); };
  bump(b.target_train);
  bump(b.target_val);
  if (b.source_train) bump(*b.source_train);
  if (b.source_val) bump(*b.source_val);
  if (b.target_test) bump(*b.target_test);
  b.target_train.num_classes = k;
  b.target_val.num_classes = k;
  if (b.source_train) b.source_train->num_classes = k;
  if (b.source_val) b.source_val->num_classes = k;
  if (b.target_test) b.target_test->num_classes = k;
  return b;
}

DataBundle materialize_data(const AppConfig& cfg) {
  return cfg.has_generator ? generate_bundle(cfg) : load_bundle(cfg);
}

ArchitectureSpec model_spec_for(const AppConfig& cfg, const Dataset& reference_data) {
  ArchitectureSpec spec;
  spec.input_dim = reference_data.dim();
  spec.hidden_dims = cfg.hidden_dims;
  spec.activation = cfg.activation;
  spec.num_classes = cfg.num_classes != 0 ? cfg.num_classes : reference_data.num_classes;
  spec.l2_lambda = cfg.l2_lambda;
  spec.validate();
  return spec;
}

std::string out_path(const AppConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw DataError("write failure on '" + path + "'");
}

json history_to_json(const TrainingHistory& history) {
  json arr = json::array();
  for (std::size_t e = 0; e < history.size(); ++e)
    arr.push_back(json{{"epoch", e},
                       {"train_loss", history[e].train_loss},
                       {"val_loss", history[e].val_loss},
                       {"val_error", history[e].val_error},
                       {"lr", history[e].lr}});
  return arr;
}

std::string dataset_digest(const Dataset& ds) {
  const std::string text = csv_to_string(ds);
  return digest_hex(fnv1a64(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

json eval_to_json(const EvalResult& r, const std::string& digest) {
  return json{
      {"error_rate", r.error_rate}, {"n", r.n}, {"confusion", r.confusion},
      {"data_digest", digest}};
}

void write_datasets(const AppConfig& cfg, const DataBundle& b) {
  if (b.source_train) save_csv(*b.source_train, out_path(cfg, "source_train.csv"));
  if (b.source_val) save_csv(*b.source_val, out_path(cfg, "source_val.csv"));
  save_csv(b.target_train, out_path(cfg, "target_train.csv"));
  save_csv(b.target_val, out_path(cfg, "target_val.csv"));
  if (b.target_test) save_csv(*b.target_test, out_path(cfg, "target_test.csv"));
}

std::map<std::string, std::string> run_metadata(const AppConfig& cfg, const std::string& stage) {
  return {{"stage", stage}, {"seed", std::to_string(cfg.seed)}};
}

// ---- commands ----

struct PretrainOutput {
  ArchitectureSpec spec;
  ParameterVector params;
  TrainingHistory history;
};

PretrainOutput pretrain_in_memory(const AppConfig& cfg, const DataBundle& bundle) {
  const Dataset& train = bundle.source_train ? *bundle.source_train : bundle.target_train;
  const Dataset& val = bundle.source_val ? *bundle.source_val : bundle.target_val;
  PretrainOutput out;
  out.spec = model_spec_for(cfg, train);
  RngStream init_rng(cfg.seed + kSeedPretrainInit);
  ParameterVector init = init_xavier(out.spec, init_rng);
  FineTuneConfig tc = cfg.pretrain;
  tc.shuffle_seed = cfg.seed + kSeedPretrainShuffle;
  auto [params, history] = fine_tune(out.spec, init, train, val, tc);
  out.params = std::move(params);
  out.history = std::move(history);
  return out;
}

int cmd_pretrain(const AppConfig& cfg) {
  DataBundle bundle = materialize_data(cfg);
  if (cfg.has_generator) write_datasets(cfg, bundle);
  PretrainOutput out = pretrain_in_memory(cfg, bundle);
  save_checkpoint(out_path(cfg, "pretrained.ibtl"), out.spec, out.params,
                  run_metadata(cfg, "pretrain"));
  write_text(out_path(cfg, "pretrain_history.json"), history_to_json(out.history).dump(2) + "\n");
  std::cout << json{{"checkpoint", out_path(cfg, "pretrained.ibtl")},
                    {"digest", checkpoint_digest(out.params)},
                    {"final_val_error", out.history.back().val_error}}
                   .dump()
            << "\n";
  return 0;
}

IhvpStrategy strategy_for(const AppConfig& cfg) {
  IhvpStrategy st = cfg.ihvp;
  st.lissa_seed = cfg.seed + kSeedLissa;
  return st;
}

int cmd_dropout(const AppConfig& cfg, const std::string& checkpoint_path) {
  const std::string cp_path =
      checkpoint_path.empty() ? out_path(cfg, "pretrained.ibtl") : checkpoint_path;
  Checkpoint cp = load_checkpoint(cp_path);
  DataBundle bundle = materialize_data(cfg);

  GradEngine engine(cp.spec, cp.params);
  ValidationReference::Mode mode;
  int cls;
  parse_reference(cfg.reference, mode, cls);
  DropoutOptions opt;
  opt.max_drop_fraction = cfg.max_drop_fraction;
  opt.seed = cfg.seed;
  opt.checkpoint_digest = cp.payload_digest;
  DropoutResult res = data_dropout(engine, bundle.target_train, bundle.target_val,
                                   strategy_for(cfg), mode, cls, opt);

  save_csv(res.optimized, out_path(cfg, "optimized_train.csv"));
  write_text(out_path(cfg, "influence_report.jsonl"), report_to_jsonl(res.report));
  std::cout << json{{"n_in", res.report.n_in},
                    {"n_dropped", res.report.n_dropped},
                    {"optimized", out_path(cfg, "optimized_train.csv")},
                    {"report", out_path(cfg, "influence_report.jsonl")}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_finetune(const AppConfig& cfg, const std::string& checkpoint_path,
                 const std::string& train_path) {
  const std::string cp_path =
      checkpoint_path.empty() ? out_path(cfg, "pretrained.ibtl") : checkpoint_path;
  Checkpoint cp = load_checkpoint(cp_path);
  const std::string tr_path =
      train_path.empty() ? out_path(cfg, "optimized_train.csv") : train_path;
  Dataset train = load_csv(tr_path, cp.spec.num_classes);

  DataBundle bundle = materialize_data(cfg);
  ArchitectureSpec target_spec = model_spec_for(cfg, train);

  TransferPlan plan;
  plan.mode = cfg.transfer_mode;
  plan.shallow_layers = cfg.shallow_layers;
  plan.frozen_layers = cfg.frozen_layers;
  plan.init_seed = cfg.seed + kSeedTransferInit;
  ParameterVector init = transfer_parameters(cp.spec, cp.params, target_spec, plan);

  FineTuneConfig tc = cfg.finetune;
  tc.shuffle_seed = cfg.seed + kSeedFinetuneShuffle;
  auto [params, history] = fine_tune(target_spec, init, train, bundle.target_val, tc, plan);

  save_checkpoint(out_path(cfg, "finetuned.ibtl"), target_spec, params,
                  run_metadata(cfg, "finetune"));
  write_text(out_path(cfg, "finetune_history.json"), history_to_json(history).dump(2) + "\n");
  std::cout << json{{"checkpoint", out_path(cfg, "finetuned.ibtl")},
                    {"digest", checkpoint_digest(params)},
                    {"final_val_error", history.back().val_error}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_eval(const AppConfig& cfg, const std::string& checkpoint_path,
             const std::string& data_path) {
  const std::string cp_path =
      checkpoint_path.empty() ? out_path(cfg, "finetuned.ibtl") : checkpoint_path;
  Checkpoint cp = load_checkpoint(cp_path);
  Dataset test;
  if (!data_path.empty()) {
    test = load_csv(data_path, cp.spec.num_classes);
  } else {
    DataBundle bundle = materialize_data(cfg);
    if (!bundle.target_test)
      throw DataError("eval: no test data (pass --data or configure one)");
    test = *bundle.target_test;
  }
  EvalResult r = evaluate(cp.spec, cp.params, test);
  std::cout << eval_to_json(r, dataset_digest(test)).dump() << "\n";
  return 0;
}

int cmd_loo_oracle(const AppConfig& cfg, std::int64_t sample_id, bool all) {
  DataBundle bundle = materialize_data(cfg);
  ArchitectureSpec spec = model_spec_for(cfg, bundle.target_train);
  if (!spec.hidden_dims.empty())
    throw DataError("loo-oracle: exact retraining requires the convex softmax-linear model "
                    "(hidden_dims must be empty)");
  if (spec.l2_lambda <= 0.0)
    throw DataError("loo-oracle: requires l2_lambda > 0 for a unique optimum");

  Batch train = make_batch(bundle.target_train.features, bundle.target_train.labels);
  Batch val = make_batch(bundle.target_val.features, bundle.target_val.labels);
  NewtonResult full = newton_minimize(spec, train, ParameterVector::zeros(spec), cfg.newton_tol);
  if (!full.converged)
    throw NumericalError("loo-oracle: Newton did not converge on the full set, gradient norm " +
                         std::to_string(full.grad_norm));
  GradEngine engine(spec, full.params);

  ValidationReference::Mode mode;
  int cls;
  parse_reference(cfg.reference, mode, cls);
  ValidationReference ref = resolve_reference(bundle.target_val.labels, mode, cls);
  InfluenceScorer scorer(engine, train, val, ref, strategy_for(cfg));

  auto index_of = [&](std::int64_t id) {
    for (std::size_t i = 0; i < bundle.target_train.size(); ++i)
      if (bundle.target_train.ids[i] == id) return i;
    return bundle.target_train.size();  // absent: empty removal, delta 0
  };

  json deltas = json::array();
  std::vector<std::size_t> targets;
  if (all) {
    for (std::size_t i = 0; i < bundle.target_train.size(); ++i) targets.push_back(i);
  } else {
    targets.push_back(index_of(sample_id));
  }
  for (std::size_t i : targets) {
    const double delta = loo_delta(spec, train, full.params, i, val, ref.indices, cfg.newton_tol);
    const bool present = i < bundle.target_train.size();
    const double influence = present ? scorer.score(train[i]) : 0.0;
    deltas.push_back(json{{"id", present ? bundle.target_train.ids[i] : sample_id},
                          {"delta", delta},
                          {"influence", influence}});
  }
  json out{{"newton_iterations", full.iterations},
           {"grad_norm", full.grad_norm},
           {"reference", ref.describe()},
           {"n_train", bundle.target_train.size()},
           {"deltas", deltas}};
  write_text(out_path(cfg, "loo_deltas.json"), out.dump(2) + "\n");
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_pipeline(const AppConfig& cfg) {
  DataBundle bundle = materialize_data(cfg);
  if (!bundle.source_train)
    throw DataError("pipeline: needs source-domain data (domain_pair generator or source paths)");
  if (!bundle.target_test) throw DataError("pipeline: needs a target test set");
  if (cfg.has_generator) write_datasets(cfg, bundle);

  // stage 1: pre-train on the source domain
  PretrainOutput pre = pretrain_in_memory(cfg, bundle);
  save_checkpoint(out_path(cfg, "pretrained.ibtl"), pre.spec, pre.params,
                  run_metadata(cfg, "pretrain"));
  write_text(out_path(cfg, "pretrain_history.json"), history_to_json(pre.history).dump(2) + "\n");

  const Dataset& test = *bundle.target_test;
  const std::string test_digest = dataset_digest(test);
  ArchitectureSpec target_spec = model_spec_for(cfg, bundle.target_train);

  TransferPlan plan;
  plan.mode = cfg.transfer_mode;
  plan.shallow_layers = cfg.shallow_layers;
  plan.frozen_layers = cfg.frozen_layers;
  plan.init_seed = cfg.seed + kSeedTransferInit;

  FineTuneConfig ft = cfg.finetune;
  ft.shuffle_seed = cfg.seed + kSeedFinetuneShuffle;

  json arms;

  // arm 1: from scratch on the raw target training set
  {
    RngStream init_rng(cfg.seed + kSeedScratchInit);
    ParameterVector init = init_xavier(target_spec, init_rng);
    FineTuneConfig sc = cfg.finetune;
    sc.shuffle_seed = cfg.seed + kSeedScratchShuffle;
    auto [params, history] =
        fine_tune(target_spec, init, bundle.target_train, bundle.target_val, sc);
    save_checkpoint(out_path(cfg, "scratch.ibtl"), target_spec, params,
                    run_metadata(cfg, "scratch"));
    arms["from_scratch"] = eval_to_json(evaluate(target_spec, params, test), test_digest);
  }

  // arm 2: model-based transfer, fine-tune on the raw target training set
  {
    ParameterVector init = transfer_parameters(pre.spec, pre.params, target_spec, plan);
    auto [params, history] =
        fine_tune(target_spec, init, bundle.target_train, bundle.target_val, ft, plan);
    save_checkpoint(out_path(cfg, "model_based.ibtl"), target_spec, params,
                    run_metadata(cfg, "model_based"));
    arms["model_based"] = eval_to_json(evaluate(target_spec, params, test), test_digest);
  }

  // arm 3: instance-based transfer, drop positive-influence samples first
  std::size_t n_dropped = 0;
  {
    GradEngine engine(pre.spec, pre.params);
    ValidationReference::Mode mode;
    int cls;
    parse_reference(cfg.reference, mode, cls);
    DropoutOptions opt;
    opt.max_drop_fraction = cfg.max_drop_fraction;
    opt.seed = cfg.seed;
    opt.checkpoint_digest = checkpoint_digest(pre.params);
    DropoutResult res = data_dropout(engine, bundle.target_train, bundle.target_val,
                                     strategy_for(cfg), mode, cls, opt);
    n_dropped = res.report.n_dropped;
    save_csv(res.optimized, out_path(cfg, "optimized_train.csv"));
    write_text(out_path(cfg, "influence_report.jsonl"), report_to_jsonl(res.report));

    ParameterVector init = transfer_parameters(pre.spec, pre.params, target_spec, plan);
    auto [params, history] =
        fine_tune(target_spec, init, res.optimized, bundle.target_val, ft, plan);
    save_checkpoint(out_path(cfg, "instance_based.ibtl"), target_spec, params,
                    run_metadata(cfg, "instance_based"));
    arms["instance_based"] = eval_to_json(evaluate(target_spec, params, test), test_digest);
  }

  json comparison{{"arms", arms},
                  {"n_train", bundle.target_train.size()},
                  {"n_dropped", n_dropped},
                  {"n_corrupted", bundle.flipped_ids.size()},
                  {"seed", cfg.seed}};
  write_text(out_path(cfg, "comparison.json"), comparison.dump(2) + "\n");
  std::cout << comparison.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instance-based transfer learning: influence-guided data dropout + fine-tuning"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_override;
  std::string ihvp_override;
  std::string ref_override;
  std::string checkpoint_path;
  std::string train_path;
  std::string data_path;
  double damping_override = -1.0;
  double max_drop_override = -1.0;
  std::int64_t seed_override = -1;
  std::int64_t sample_id = -1;
  bool loo_all = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--out-dir", out_dir_override, "override the output directory");
    sub->add_option("--ihvp", ihvp_override, "override strategy: explicit|cg|lissa");
    sub->add_option("--damping", damping_override, "override ihvp damping");
    sub->add_option("--ref-mode", ref_override, "override reference: all|class:<k>");
    sub->add_option("--max-drop-fraction", max_drop_override, "override the drop-fraction guard");
  };

  CLI::App* sub_pretrain = app.add_subcommand("pretrain", "train a source model from Xavier init");
  add_common(sub_pretrain);
  CLI::App* sub_dropout = app.add_subcommand("dropout", "influence-based training-data dropout");
  add_common(sub_dropout);
  sub_dropout->add_option("--checkpoint", checkpoint_path, "pre-trained checkpoint path");
  CLI::App* sub_finetune = app.add_subcommand("finetune", "transfer parameters and fine-tune");
  add_common(sub_finetune);
  sub_finetune->add_option("--checkpoint", checkpoint_path, "source checkpoint path");
  sub_finetune->add_option("--train", train_path, "training CSV (default: optimized_train.csv)");
  CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a checkpoint on a test CSV");
  add_common(sub_eval);
  sub_eval->add_option("--checkpoint", checkpoint_path, "checkpoint path");
  sub_eval->add_option("--data", data_path, "test CSV path");
  CLI::App* sub_loo = app.add_subcommand("loo-oracle", "exact leave-one-out retraining deltas");
  add_common(sub_loo);
  sub_loo->add_option("--sample-id", sample_id, "single training sample id");
  sub_loo->add_flag("--all", loo_all, "retrain once per training sample");
  CLI::App* sub_pipeline =
      app.add_subcommand("pipeline", "pretrain, dropout, fine-tune and compare all arms");
  add_common(sub_pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    AppConfig cfg = load_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
    if (!ihvp_override.empty()) cfg.ihvp.kind = ihvp_kind_from_name(ihvp_override);
    if (damping_override >= 0.0) cfg.ihvp.damping = damping_override;
    if (!ref_override.empty()) cfg.reference = ref_override;
    if (max_drop_override >= 0.0) cfg.max_drop_fraction = max_drop_override;

    if (sub_pretrain->parsed()) return cmd_pretrain(cfg);
    if (sub_dropout->parsed()) return cmd_dropout(cfg, checkpoint_path);
    if (sub_finetune->parsed()) return cmd_finetune(cfg, checkpoint_path, train_path);
    if (sub_eval->parsed()) return cmd_eval(cfg, checkpoint_path, data_path);
    if (sub_loo->parsed()) {
      if (!loo_all && sample_id < 0) throw DataError("loo-oracle: pass --all or --sample-id <id>");
      return cmd_loo_oracle(cfg, sample_id, loo_all);
    }
    if (sub_pipeline->parsed()) return cmd_pipeline(cfg);
    throw DataError("no subcommand selected");
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
