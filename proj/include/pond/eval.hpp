#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pond/synthetic.hpp"
#include "pond/train.hpp"

namespace pond {

// Throws InvalidArgument on empty or unequal-length inputs.
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> truths);
// Unweighted mean over all K classes; a class with no true or predicted
// instances scores 0.
double macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> truths, std::size_t classes);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::string scenario;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  std::string selected_source;
  Json losses = Json::object();

  Json to_json() const;
};

MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truths,
                       std::size_t classes, std::string scenario = {}, std::uint64_t seed = 0);
MetricsReport evaluate(const PipelineOutcome& outcome, std::size_t classes, std::string scenario = {},
                       std::uint64_t seed = 0);

struct Scenario {
  std::vector<DomainDataset> sources;
  DomainDataset target;
};
using ScenarioFactory = std::function<Scenario(std::uint64_t seed)>;

// Fresh synthetic data per seed (spec.seed = seed).
ScenarioFactory synthetic_scenarios(const SyntheticSpec& spec);
// The same data for every seed.
ScenarioFactory fixed_scenario(Scenario scenario);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};
Summary summarize(std::span<const double> values);

// The six component combinations of the ablation table, full configuration last.
std::vector<AblationFlags> ablation_rows();
std::string ablation_label(const AblationFlags& flags);

struct AblationRow {
  AblationFlags flags;
  std::vector<MetricsReport> runs;  // one per seed
  Summary macro_f1;
  Summary accuracy;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  Json to_json() const;
  std::string to_csv() const;
};

// One pipeline run per row per seed; the run seed and the scenario seed are both `seed`.
AblationTable ablation_grid(const RunConfig& config, const ScenarioFactory& scenarios,
                            std::span<const std::uint64_t> seeds);

struct SweepRow {
  std::size_t sources = 0;
  std::vector<MetricsReport> runs;
  Summary macro_f1;
  Summary accuracy;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  double spearman = 0.0;  // between source count and mean macro-F1
  Json to_json() const;
  std::string to_csv() const;
};

// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// Runs the pipeline on the first `count` sources for each count. Counts must
// be strictly ascending and no larger than the scenario's source count.
SweepTable source_count_sweep(const RunConfig& config, const ScenarioFactory& scenarios,
                              std::span<const std::size_t> counts, std::span<const std::uint64_t> seeds);

struct Heatmap {
  std::vector<std::string> domain_ids;
  std::vector<std::vector<double>> values;  // diagonal is NaN (absent)
  bool fallback = false;

  std::string to_csv() const;
  static Heatmap from_csv(const std::string& text);
  Json sidecar() const;
  void write(const std::filesystem::path& csv_path) const;  // also writes <csv_path>.json
};

// exp of the symmetrised pairwise discrimination term over the exact domain prompts.
Heatmap discrimination_heatmap(const TrainedState& state);

}  // namespace pond
