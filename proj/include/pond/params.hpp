#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pond/graph.hpp"
#include "pond/rng.hpp"

namespace pond {

struct NamedTensor {
  std::string name;
  ng::Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Parameters in declaration order (the order checkpoints store them in).
using ParamList = std::vector<NamedTensor>;

const ng::Tensor& find_param(const ParamList& params, std::string_view name);
ng::Tensor& find_param(ParamList& params, std::string_view name);
std::size_t parameter_count(const ParamList& params);

// uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)) for a [fan_in, fan_out] matrix.
ng::Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Leaves for one parameter list inside a graph.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(ng::Graph& graph, const ParamList& params, bool trainable, std::string_view prefix = {});

  ng::NodeId operator[](std::string_view name) const;
  const std::vector<ng::NodeId>& ids() const noexcept { return ids_; }

 private:
  std::vector<ng::NodeId> ids_;
  std::unordered_map<std::string, ng::NodeId> by_name_;
};

// params[i] -= rate * grad of bound leaf i.
void sgd_step(ParamList& params, const BoundParams& bound, const ng::Gradients& grads, double rate);

// Adam over one parameter list.
class Adam {
 public:
  explicit Adam(const ParamList& params, double rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(ParamList& params, const BoundParams& bound, const ng::Gradients& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  double rate_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace pond
