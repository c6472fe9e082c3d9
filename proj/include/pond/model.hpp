#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "pond/container.hpp"
#include "pond/graph.hpp"
#include "pond/params.hpp"

namespace pond {

struct PatchConfig {
  std::size_t patch_len = 16;
  std::size_t stride = 8;
};

struct PatchPlan {
  std::size_t padded_len = 0;
  std::size_t count = 0;
};

// Windows start at 0, stride, 2*stride, ...; a ragged tail is padded by
// repeating the final time step until (padded_len - patch_len) % stride == 0.
PatchPlan plan_patches(std::size_t total_len, const PatchConfig& patch);

// [n, T] series -> [count, n * patch_len] patch rows (channel-major within a row).
ng::Tensor patchify(const ng::Tensor& series, const PatchConfig& patch);

struct ModelConfig {
  std::size_t channels = 2;
  std::size_t length = 128;
  std::size_t prompt_len = 5;
  std::size_t classes = 3;
  std::size_t experts = 3;
  std::size_t d_model = 16;
  std::size_t heads = 4;
  std::size_t d_ff = 128;
  std::size_t encoder_blocks = 2;
  std::size_t router_hidden = 16;
  PatchConfig patch;

  std::size_t total_len() const noexcept { return prompt_len + length; }
  std::size_t patch_count() const { return plan_patches(total_len(), patch).count; }
  // Throws ConfigError.
  void validate() const;

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.to_json() == b.to_json();
  }
  Json to_json() const;
  static ModelConfig from_json(const Json& j);
};

// The classifier f: E patch-transformer experts mixed by a softmax router
// that reads per-channel mean and std of the (prompted) input.
struct MoEModel {
  ModelConfig config;
  std::vector<ParamList> experts;
  ParamList router;

  std::size_t parameter_count() const;
};

MoEModel init_model(const ModelConfig& config, std::uint64_t seed);
ParamList init_expert(const ModelConfig& config, Rng& rng);

// Graph handles for a model's parameters.
struct BoundModel {
  std::vector<BoundParams> experts;
  BoundParams router;
};

BoundModel bind_model(ng::Graph& g, const MoEModel& model, bool trainable);

// input: [B, n, T] node -> [B, patch count, n * patch_len] token rows.
ng::NodeId build_patch_tokens(ng::Graph& g, const PatchConfig& patch, ng::NodeId input);

// input: [B, n, m+L] node. Returns [B, K] class probabilities.
ng::NodeId build_expert(ng::Graph& g, const ModelConfig& config, const BoundParams& expert, ng::NodeId input);
// Router probabilities [B, E].
ng::NodeId build_router(ng::Graph& g, const ModelConfig& config, const BoundParams& router, ng::NodeId input);
// Mixture output [B, K]. `fixed_router` replaces the learned routing weights.
ng::NodeId build_moe(ng::Graph& g, const MoEModel& model, const BoundModel& bound, ng::NodeId input,
                     const std::optional<std::vector<double>>& fixed_router = std::nullopt);

// Eager helpers over a [B, n, m+L] batch (or a single [n, m+L] series).
ng::Tensor expert_forward(const MoEModel& model, std::size_t expert, const ng::Tensor& batch);
ng::Tensor router_forward(const MoEModel& model, const ng::Tensor& batch);
ng::Tensor moe_forward(const MoEModel& model, const ng::Tensor& batch,
                       const std::optional<std::vector<double>>& fixed_router = std::nullopt);

}  // namespace pond
