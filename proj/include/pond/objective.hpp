#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pond/container.hpp"
#include "pond/model.hpp"
#include "pond/prompt.hpp"

namespace pond {

struct LossWeights {
  double discrimination = 1.0;  // lambda_1
  double fidelity = 1.0;        // lambda_2

  void validate() const;  // throws ConfigError
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double training = 0.0;        // l_R
  double fidelity = 0.0;        // l_F
  double discrimination = 0.0;  // l_D
  double total = 0.0;           // G
  bool discrimination_fallback = false;

  Json to_json() const;
};

// Which prompt the fidelity term conditions on.
enum class FidelityInput { DomainOnly, CommonPlusDomain };

ng::Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

// Mean cross-entropy of [B, K] probabilities against integer labels.
double cross_entropy(const ng::Tensor& probs, std::span<const std::size_t> labels);

// Frobenius inner product trace(A^T B).
double similarity(const Prompt& a, const Prompt& b);

struct DiscriminationValue {
  double value = 0.0;
  bool fallback = false;
};

// Sum over ordered pairs (a, b), a != b, of sim(a, b) - log sum_{i != a, b} exp(sim(a, i)).
// Two prompts fall back to sim(1, 2).
DiscriminationValue loss_D(const std::vector<Prompt>& prompts);

// [M, M] per-pair terms sim(a, b) - log sum_{i != a, b} exp(sim(a, i)); diagonal zero.
// With two prompts the off-diagonal entries are sim(1, 2).
ng::Tensor discrimination_pair_terms(const std::vector<Prompt>& prompts);

struct DiscriminationNode {
  ng::NodeId value;
  bool fallback = false;
};

// prompts: [n, m] nodes.
DiscriminationNode build_loss_D(ng::Graph& g, std::span<const ng::NodeId> prompts);

// CE(f([common + instance, x]), y). common may be [n, m] or absent (npos).
// instance: [B, n, m], x: [B, n, L], onehot: [B, K].
inline constexpr ng::NodeId kNoNode = static_cast<ng::NodeId>(-1);
ng::NodeId build_prompted_loss(ng::Graph& g, const MoEModel& model, const BoundModel& bound, ng::NodeId common,
                               ng::NodeId instance, ng::NodeId x, ng::NodeId onehot);

ng::NodeId build_total_G(ng::Graph& g, ng::NodeId training, ng::NodeId discrimination, ng::NodeId fidelity,
                         const LossWeights& w);

// Eager conveniences; x: [B, n, L].
double loss_R(const MoEModel& model, const Prompt& common, const Generator& gen, const ng::Tensor& x,
              std::span<const std::size_t> labels);

struct DomainBatch {
  ng::Tensor x;
  std::vector<std::size_t> labels;
};

// Summed over domains, averaged within each batch.
double loss_F(const MoEModel& model, const std::vector<Generator>& generators, const std::vector<DomainBatch>& batches,
              FidelityInput input = FidelityInput::DomainOnly, const Prompt* common = nullptr);

LossBreakdown total_G(double training, double discrimination, double fidelity, const LossWeights& w);

// Plug-in estimates in bits over discrete samples.
double brute_force_entropy(std::span<const int> samples);
double brute_force_mi(std::span<const int> x, std::span<const int> y);

}  // namespace pond
