#include "pond/params.hpp"

#include <cmath>

#include "pond/errors.hpp"

namespace pond {

const ng::Tensor& find_param(const ParamList& params, std::string_view name) {
  for (const auto& p : params)
    if (p.name == name) return p.value;
  throw InvalidArgument("no parameter named '" + std::string(name) + "'");
}

ng::Tensor& find_param(ParamList& params, std::string_view name) {
  for (auto& p : params)
    if (p.name == name) return p.value;
  throw InvalidArgument("no parameter named '" + std::string(name) + "'");
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

ng::Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  ng::Tensor t({fan_in, fan_out});
  for (auto& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

BoundParams::BoundParams(ng::Graph& graph, const ParamList& params, bool trainable, std::string_view prefix) {
  ids_.reserve(params.size());
  for (const auto& p : params) {
    const auto id = graph.leaf(p.value, trainable, std::string(prefix) + p.name);
    ids_.push_back(id);
    by_name_.emplace(p.name, id);
  }
}

ng::NodeId BoundParams::operator[](std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw InvalidArgument("parameter '" + std::string(name) + "' is not bound");
  return it->second;
}

void sgd_step(ParamList& params, const BoundParams& bound, const ng::Gradients& grads, double rate) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads.at(bound.ids()[i]);
    auto& w = params[i].value;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= rate * g[k];
  }
}

Adam::Adam(const ParamList& params, double rate, double beta1, double beta2, double eps)
    : rate_(rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::step(ParamList& params, const BoundParams& bound, const ng::Gradients& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads.at(bound.ids()[i]);
    auto& w = params[i].value;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= rate_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

}  // namespace pond
