#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pond/checkpoint.hpp"
#include "pond/data.hpp"
#include "pond/model.hpp"
#include "pond/objective.hpp"
#include "pond/prompt.hpp"

namespace pond {

struct AblationFlags {
  bool use_moe = true;
  bool use_common_prompt = true;
  bool use_generator = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

// Gradient used for the common prompt's inner step.
enum class CommonGradient { Objective, TrainingOnly };
enum class SourceSelection { Nearest, Random };

struct RunConfig {
  std::size_t epochs = 50;  // pretraining epochs; also target-transfer passes unless overridden
  std::optional<std::size_t> transfer_epochs;
  std::size_t batch = 16;
  std::size_t steps = 50;  // N
  double delta = 0.01;     // global rate
  double eta = 0.001;      // local rate
  std::size_t prompt_len = 5;
  LossWeights weights;
  std::size_t target_shots = 10;
  std::uint64_t seed = 0;
  AblationFlags flags;
  FidelityInput fidelity_input = FidelityInput::DomainOnly;
  CommonGradient common_gradient = CommonGradient::Objective;
  SourceSelection selection = SourceSelection::Nearest;
  double zeta_sigma = 0.0;
  double buffer_beta = 0.9;
  std::size_t generator_hidden = 64;
  double pretrain_rate = 1e-3;
  SplitRatios split;
  // Architecture only; channels, length, prompt length and classes come from the data.
  ModelConfig model;

  std::size_t transfer_passes() const { return transfer_epochs.value_or(epochs); }
  void validate() const;  // throws ConfigError
  Json to_json() const;
  // Rejects unknown keys; absent keys keep their defaults.
  static RunConfig from_json(const Json& j);
};

// Independent random streams derived from RunConfig::seed.
enum class Stream : std::uint64_t {
  Split = 1,
  ModelInit,
  GeneratorInit,
  PretrainShuffle,
  Reptile,
  Shots,
  Transfer,
  Selection,
  Zeta,
};
std::uint64_t stream_seed(const RunConfig& config, Stream s);

ModelConfig model_config_for(const RunConfig& config, const DomainDataset& probe);
GeneratorConfig generator_config_for(const RunConfig& config, const DomainDataset& probe);

// Splits source i with a seed derived from the Split stream and i.
std::vector<DomainDataset> split_sources(const std::vector<DomainDataset>& sources, const RunConfig& config);

struct Batch {
  ng::Tensor x;  // [B, n, L]
  std::vector<std::size_t> labels;
};

Batch make_batch(const DomainDataset& d, const std::vector<std::size_t>& indices);
Batch make_batch(const std::vector<LabeledInstance>& instances);

struct PretrainReport {
  double initial_loss = 0.0;  // over the whole pool before the first step
  double final_loss = 0.0;    // over the whole pool after the last step
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
  std::size_t optimizer_steps = 0;

  Json to_json() const;
};

// Adam on cross-entropy of f([0, x]) over the Pretrain splits of all sources.
MoEModel pretrain(const MoEModel& init, const std::vector<DomainDataset>& sources, const RunConfig& config,
                  PretrainReport* report = nullptr);

struct StepRecord {
  std::size_t step = 0;
  std::size_t domain = 0;
  std::vector<std::size_t> batch;  // instance indices within the domain
  LossBreakdown losses;
};

struct TrainedState {
  MoEModel model;
  Prompt common;
  std::vector<std::string> source_ids;
  std::vector<Generator> generators;
  std::vector<DomainPromptBuffer> buffers;
  std::vector<Prompt> domain_prompts;  // exact means over each tune split
  std::optional<Generator> target_generator;
  std::optional<Prompt> target_prompt;
  AblationFlags flags;
  std::vector<StepRecord> history;
  std::vector<double> transfer_loss;  // before the first pass, then after each pass
  std::vector<std::size_t> shot_indices;  // target instances used for transfer
  std::optional<std::size_t> selected_source;

  std::size_t source_count() const noexcept { return source_ids.size(); }
};

// Frozen model, zero common prompt, one generator per source from a shared initialization.
TrainedState init_state(const MoEModel& model, const std::vector<DomainDataset>& sources, const RunConfig& config);

// The domain-level prompt of a generator over a set of instances (zero when the generator is disabled).
Prompt domain_prompt(const TrainedState& state, const Generator& gen, const ng::Tensor& x);

// Reptile meta-learning over the Tune splits.
void reptile_tune(TrainedState& state, const std::vector<DomainDataset>& sources, const RunConfig& config);

// Gradient descent of the target generator on the shots; sets the target prompt.
void target_transfer(TrainedState& state, const std::vector<LabeledInstance>& shots, const RunConfig& config);

struct Selection {
  std::size_t source = 0;
  std::string domain_id;
  std::vector<double> similarity;  // cosine, per source
};

double cosine_similarity(const Prompt& a, const Prompt& b);
Selection select_source(const TrainedState& state);
Selection select_random_source(const TrainedState& state, std::uint64_t seed);

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

// f([P + g_source(x), x]); the generator term is dropped when generators are disabled.
Prediction predict_target(const TrainedState& state, std::size_t source, const Series& x);
std::vector<Prediction> predict_target(const TrainedState& state, std::size_t source,
                                       const std::vector<LabeledInstance>& xs);

// Shot selection, target transfer and source selection; records the shots and
// the chosen source in the state.
Selection adapt_to_target(TrainedState& state, const DomainDataset& target, const RunConfig& config);
// Target instances not used as shots.
std::vector<LabeledInstance> held_out(const TrainedState& state, const DomainDataset& target);

void save_state(const TrainedState& state, const std::filesystem::path& path);
TrainedState load_state(const std::filesystem::path& path);

struct PipelineOutcome {
  TrainedState state;
  PretrainReport pretrain;
  Selection selection;
  std::vector<std::size_t> truths;
  std::vector<Prediction> predictions;
};

// Split sources, pretrain, tune, transfer to the target shots, select and predict the remaining target instances.
PipelineOutcome run_pipeline(const std::vector<DomainDataset>& sources, const DomainDataset& target,
                             const RunConfig& config);

// Two series sharing a suffix with different prefixes and (optionally) conflicting labels.
struct FlexibilityConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 2000;
  double rate = 0.05;
  bool conflicting = true;
  std::size_t length = 32;
  std::size_t prefix = 4;
  std::size_t prompt_len = 4;
  std::size_t pretrain_epochs = 20;

  void validate() const;
  Json to_json() const;
  static FlexibilityConfig from_json(const Json& j);
};

struct FlexibilityVariant {
  std::size_t best_correct = 0;  // out of 2
  std::optional<std::size_t> fit_step;  // updates taken before 2/2 was first reached
};

struct FlexibilityReport {
  std::uint64_t seed = 0;
  bool conflicting = true;
  FlexibilityVariant prompt_only;
  FlexibilityVariant generator;

  Json to_json() const;
};

FlexibilityReport flexibility_demo(const FlexibilityConfig& config);

}  // namespace pond
