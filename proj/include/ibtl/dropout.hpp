#pragma once

// Data dropout: score every target-domain training sample against the
// validation reference using the fixed pre-trained model and remove those
// with positive total influence (removal predicted to lower validation
// loss). Single pass: all influences are computed against the same model
// before any removal takes effect. Emits an auditable JSON-lines report.

#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibtl/data.hpp"
#include "ibtl/errors.hpp"
#include "ibtl/influence.hpp"
#include "ibtl/model.hpp"

namespace ibtl {

// Drop iff influence is strictly positive; zero keeps the sample.
inline bool threshold_policy(double influence) { return influence > 0.0; }

struct SampleDecision {
  std::int64_t id = 0;
  double influence = 0.0;
  bool drop = false;
};

struct InfluenceReport {
  std::vector<SampleDecision> records;  // one per input sample, input order
  std::size_t n_in = 0;
  std::size_t n_dropped = 0;
  std::string strategy;
  std::string reference;
  double damping = 0.0;
  std::uint64_t seed = 0;
  std::string checkpoint_digest;
};

struct DropoutOptions {
  double max_drop_fraction = 0.5;  // abort guard against mismatched checkpoints
  std::uint64_t seed = 0;
  std::string checkpoint_digest;
};

struct DropoutResult {
  Dataset optimized;
  InfluenceReport report;
};

inline DropoutResult data_dropout(const GradEngine& pretrained, const Dataset& train,
                                  const Dataset& validation, const IhvpStrategy& strategy,
                                  ValidationReference::Mode ref_mode, int ref_class = -1,
                                  const DropoutOptions& options = {}) {
  if (train.size() == 0) throw DataError("data_dropout: empty training set");
  pretrained.check_input_dim(train.dim());
  pretrained.check_input_dim(validation.dim());

  ValidationReference ref = resolve_reference(validation.labels, ref_mode, ref_class);
  Batch train_batch = make_batch(train.features, train.labels);
  Batch val_batch = make_batch(validation.features, validation.labels);
  InfluenceScorer scorer(pretrained, train_batch, val_batch, ref, strategy);

  DropoutResult out;
  out.report.n_in = train.size();
  out.report.strategy = strategy.describe();
  out.report.reference = ref.describe();
  out.report.damping = strategy.damping;
  out.report.seed = options.seed;
  out.report.checkpoint_digest = options.checkpoint_digest;

  std::vector<std::size_t> kept;
  kept.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    SampleDecision rec;
    rec.id = train.ids[i];
    rec.influence = scorer.score(train_batch[i]);
    if (!std::isfinite(rec.influence))
      throw NumericalError("data_dropout: non-finite influence for sample id " +
                           std::to_string(rec.id));
    rec.drop = threshold_policy(rec.influence);
    if (!rec.drop) kept.push_back(i);
    out.report.records.push_back(rec);
  }
  out.report.n_dropped = train.size() - kept.size();

  const double frac =
      static_cast<double>(out.report.n_dropped) / static_cast<double>(train.size());
  if (frac > options.max_drop_fraction)
    throw DataError("data_dropout: would drop " + std::to_string(out.report.n_dropped) + " of " +
                    std::to_string(train.size()) + " samples, above the limit fraction " +
                    std::to_string(options.max_drop_fraction) +
                    "; check that the pre-trained checkpoint matches the data");
  if (kept.empty())
    throw DataError("data_dropout: every sample would be dropped; refusing to return an empty "
                    "training set");

  out.optimized = train.subset(kept);
  return out;
}

// JSON lines: summary object first, then one object per sample. Doubles are
// printed as shortest round-trip decimals so reports diff and reload exactly.
inline std::string report_to_jsonl(const InfluenceReport& report) {
  std::ostringstream out;
  nlohmann::json summary{
      {"n_in", report.n_in},
      {"n_dropped", report.n_dropped},
      {"strategy", report.strategy},
      {"reference", report.reference},
      {"damping", report.damping},
      {"seed", report.seed},
      {"checkpoint_digest", report.checkpoint_digest},
      // all influences are computed against the same fixed model; removals
      // do not feed back into later scores
      {"single_pass", true},
  };
  out << summary.dump() << '\n';
  for (const SampleDecision& r : report.records) {
    nlohmann::json line{
        {"id", r.id}, {"influence", r.influence}, {"decision", r.drop ? "drop" : "keep"}};
    out << line.dump() << '\n';
  }
  return out.str();
}

inline InfluenceReport report_from_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("influence report: missing summary line");
  InfluenceReport report;
  try {
    nlohmann::json summary = nlohmann::json::parse(line);
    report.n_in = summary.at("n_in").get<std::size_t>();
    report.n_dropped = summary.at("n_dropped").get<std::size_t>();
    report.strategy = summary.at("strategy").get<std::string>();
    report.reference = summary.at("reference").get<std::string>();
    report.damping = summary.at("damping").get<double>();
    report.seed = summary.at("seed").get<std::uint64_t>();
    report.checkpoint_digest = summary.at("checkpoint_digest").get<std::string>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json rec = nlohmann::json::parse(line);
      SampleDecision d;
      d.id = rec.at("id").get<std::int64_t>();
      d.influence = rec.at("influence").get<double>();
      const std::string decision = rec.at("decision").get<std::string>();
      if (decision != "keep" && decision != "drop")
        throw DataError("influence report: bad decision '" + decision + "'");
      d.drop = decision == "drop";
      report.records.push_back(d);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("influence report: malformed JSON: ") + e.what());
  }
  return report;
}

}  // namespace ibtl
