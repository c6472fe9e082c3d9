#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pond/graph.hpp"
#include "pond/params.hpp"

namespace pond {

// An n x m matrix prepended to a series along the time axis.
using Prompt = ng::Tensor;

Prompt zero_prompt(std::size_t channels, std::size_t prompt_len);

struct GeneratorConfig {
  std::size_t channels = 2;
  std::size_t length = 128;
  std::size_t prompt_len = 5;
  std::size_t hidden = 64;

  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

// g: flattened series (n*L) -> tanh hidden layer -> n*m, reshaped to n x m.
// Parameters: l1.w [n*L, hidden], l1.b [hidden], l2.w [hidden, n*m], l2.b [n*m].
struct Generator {
  GeneratorConfig config;
  ParamList params;
};

Generator init_generator(const GeneratorConfig& config, std::uint64_t seed);

// x: [B, n, L] node -> [B, n, m] instance prompts.
ng::NodeId build_generator(ng::Graph& g, const GeneratorConfig& config, const BoundParams& params, ng::NodeId x);

// Single [n, L] series -> [n, m]; a [B, n, L] batch -> [B, n, m].
Prompt generate_instance_prompt(const Generator& gen, const ng::Tensor& x);

// Optional additive Gaussian noise on an instance prompt. Off unless sigma > 0.
void apply_zeta(Prompt& prompt, double sigma, Rng& rng);

// Entrywise mean. A [B, n, m] stack is also accepted as the single argument form.
Prompt aggregate_domain_prompt(const std::vector<Prompt>& prompts);
Prompt aggregate_domain_prompt(const ng::Tensor& stacked);

struct DomainPromptBuffer {
  Prompt prompt;
  double beta = 0.9;
  std::size_t updates = 0;

  DomainPromptBuffer() = default;
  DomainPromptBuffer(std::size_t channels, std::size_t prompt_len, double beta = 0.9);
};

// buffer <- beta * buffer + (1 - beta) * mean(batch); the first update copies the mean.
void update_buffer(DomainPromptBuffer& buffer, const std::vector<Prompt>& batch);
void update_buffer(DomainPromptBuffer& buffer, const Prompt& batch_mean);

enum class PrependMode { Normal, PretrainCompat };

// Zero-length prompts are only admissible in PretrainCompat mode.
void require_prompt_len(std::size_t m, PrependMode mode);

// [common + instance | x]: n x (m + L).
ng::Tensor prepend(const Prompt& common, const Prompt& instance, const ng::Tensor& x,
                   PrependMode mode = PrependMode::Normal);

// prompt: [B, n, m] or [n, m] node, x: [B, n, L] node -> [B, n, m + L].
ng::NodeId build_prepend(ng::Graph& g, ng::NodeId prompt, ng::NodeId x);

}  // namespace pond
