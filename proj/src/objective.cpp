#include "pond/objective.hpp"

#include <cmath>
#include <map>
#include <utility>

#include "pond/errors.hpp"

namespace pond {

using ng::NodeId;
using ng::Tensor;

void LossWeights::validate() const {
  for (double v : {discrimination, fidelity})
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and non-negative");
}

Json LossBreakdown::to_json() const {
  return Json{{"l_R", training},
              {"l_F", fidelity},
              {"l_D", discrimination},
              {"G", total},
              {"l_D_fallback", discrimination_fallback}};
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  if (labels.empty()) throw InvalidArgument("one-hot of an empty label list");
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw InvalidArgument("label " + std::to_string(labels[i]) + " out of range");
    t.at(i, labels[i]) = 1.0;
  }
  return t;
}

double cross_entropy(const Tensor& probs, std::span<const std::size_t> labels) {
  if (labels.empty()) throw InvalidArgument("cross-entropy of an empty batch");
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw ShapeError("probabilities must be [B, K]");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= probs.dim(1)) throw InvalidArgument("label " + std::to_string(labels[i]) + " out of range");
    s -= std::log(probs.at(i, labels[i]));
  }
  return s / double(labels.size());
}

double similarity(const Prompt& a, const Prompt& b) {
  if (a.shape() != b.shape()) throw ShapeError("similarity of differently shaped prompts");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace {

std::vector<std::vector<double>> similarity_matrix(const std::vector<Prompt>& ps) {
  const std::size_t M = ps.size();
  std::vector<std::vector<double>> S(M, std::vector<double>(M));
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = 0; b < M; ++b) S[a][b] = similarity(ps[a], ps[b]);
  return S;
}

double pair_term(const std::vector<std::vector<double>>& S, std::size_t a, std::size_t b) {
  double hi = -INFINITY;
  for (std::size_t i = 0; i < S.size(); ++i)
    if (i != a && i != b) hi = std::max(hi, S[a][i]);
  double acc = 0.0;
  for (std::size_t i = 0; i < S.size(); ++i)
    if (i != a && i != b) acc += std::exp(S[a][i] - hi);
  return S[a][b] - (hi + std::log(acc));
}

void require_domains(std::size_t M) {
  if (M < 2) throw InvalidArgument("discrimination loss needs at least two domains, got " + std::to_string(M));
}

}  // namespace

DiscriminationValue loss_D(const std::vector<Prompt>& prompts) {
  require_domains(prompts.size());
  const auto S = similarity_matrix(prompts);
  if (prompts.size() == 2) return {S[0][1], true};
  double total = 0.0;
  for (std::size_t a = 0; a < prompts.size(); ++a)
    for (std::size_t b = 0; b < prompts.size(); ++b)
      if (a != b) total += pair_term(S, a, b);
  return {total, false};
}

Tensor discrimination_pair_terms(const std::vector<Prompt>& prompts) {
  require_domains(prompts.size());
  const std::size_t M = prompts.size();
  const auto S = similarity_matrix(prompts);
  Tensor T({M, M});
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = 0; b < M; ++b)
      if (a != b) T.at(a, b) = M == 2 ? S[a][b] : pair_term(S, a, b);
  return T;
}

DiscriminationNode build_loss_D(ng::Graph& g, std::span<const NodeId> prompts) {
  const std::size_t M = prompts.size();
  require_domains(M);
  std::vector<NodeId> rows;
  for (NodeId p : prompts) {
    if (g.shape(p).size() != 2) throw ShapeError("domain prompts must be [n, m] nodes");
    rows.push_back(g.reshape(p, {1, ng::numel(g.shape(p))}));
  }
  const NodeId flat = g.concat(rows, 0);
  const NodeId S = g.matmul(flat, g.transpose(flat, {1, 0}));  // [M, M]
  auto entry = [&](NodeId row, std::size_t i) { return g.slice(row, 1, i, 1); };
  if (M == 2) return {g.reshape(entry(g.slice(S, 0, 0, 1), 1), {1}), true};

  std::vector<NodeId> terms;
  for (std::size_t a = 0; a < M; ++a) {
    const NodeId row = g.slice(S, 0, a, 1);
    for (std::size_t b = 0; b < M; ++b) {
      if (a == b) continue;
      std::vector<NodeId> others;
      for (std::size_t i = 0; i < M; ++i)
        if (i != a && i != b) others.push_back(entry(row, i));
      const NodeId lse = g.logsumexp(g.concat(others, 1));
      terms.push_back(g.sub(g.reshape(entry(row, b), {1}), lse));
    }
  }
  return {g.sum(g.concat(terms, 0)), false};
}

NodeId build_prompted_loss(ng::Graph& g, const MoEModel& model, const BoundModel& bound, NodeId common,
                           NodeId instance, NodeId x, NodeId onehot) {
  const NodeId prompt = common == kNoNode ? instance : g.add(instance, common);
  return g.cross_entropy(build_moe(g, model, bound, build_prepend(g, prompt, x)), onehot);
}

NodeId build_total_G(ng::Graph& g, NodeId training, NodeId discrimination, NodeId fidelity, const LossWeights& w) {
  w.validate();
  return g.add(g.add(training, g.scale(discrimination, w.discrimination)), g.scale(fidelity, w.fidelity));
}

double loss_R(const MoEModel& model, const Prompt& common, const Generator& gen, const Tensor& x,
              std::span<const std::size_t> labels) {
  if (labels.empty()) throw InvalidArgument("training loss of an empty batch");
  ng::Graph g;
  auto bound = bind_model(g, model, false);
  BoundParams gp(g, gen.params, false);
  const NodeId xn = g.constant(x);
  const NodeId inst = build_generator(g, gen.config, gp, xn);
  const NodeId y = g.constant(one_hot(labels, model.config.classes));
  return g.forward(build_prompted_loss(g, model, bound, g.constant(common), inst, xn, y)).item();
}

double loss_F(const MoEModel& model, const std::vector<Generator>& generators, const std::vector<DomainBatch>& batches,
              FidelityInput input, const Prompt* common) {
  if (batches.empty()) throw InvalidArgument("fidelity loss needs at least one domain");
  if (batches.size() != generators.size()) throw InvalidArgument("one generator per domain batch");
  if (input == FidelityInput::CommonPlusDomain && common == nullptr)
    throw InvalidArgument("common prompt required for the common-plus-domain fidelity input");
  double total = 0.0;
  for (std::size_t d = 0; d < batches.size(); ++d) {
    if (batches[d].labels.empty()) throw InvalidArgument("fidelity loss of an empty batch");
    ng::Graph g;
    auto bound = bind_model(g, model, false);
    BoundParams gp(g, generators[d].params, false);
    const NodeId xn = g.constant(batches[d].x);
    const NodeId inst = build_generator(g, generators[d].config, gp, xn);
    const NodeId y = g.constant(one_hot(batches[d].labels, model.config.classes));
    const NodeId c = input == FidelityInput::CommonPlusDomain ? g.constant(*common) : kNoNode;
    total += g.forward(build_prompted_loss(g, model, bound, c, inst, xn, y)).item();
  }
  return total;
}

LossBreakdown total_G(double training, double discrimination, double fidelity, const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  b.training = training;
  b.discrimination = discrimination;
  b.fidelity = fidelity;
  b.total = training + w.discrimination * discrimination + w.fidelity * fidelity;
  return b;
}

double brute_force_entropy(std::span<const int> samples) {
  if (samples.empty()) throw InvalidArgument("entropy of an empty sample");
  std::map<int, std::size_t> counts;
  for (int v : samples) ++counts[v];
  const double n = double(samples.size());
  double h = 0.0;
  for (const auto& [v, c] : counts) {
    const double p = double(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

double brute_force_mi(std::span<const int> x, std::span<const int> y) {
  if (x.empty() || y.empty()) throw InvalidArgument("mutual information of an empty sample");
  if (x.size() != y.size()) throw InvalidArgument("mutual information needs paired samples");
  std::map<std::pair<int, int>, std::size_t> joint;
  std::map<int, std::size_t> px, py;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ++joint[{x[i], y[i]}];
    ++px[x[i]];
    ++py[y[i]];
  }
  const double n = double(x.size());
  double mi = 0.0;
  for (const auto& [xy, c] : joint) {
    const double pxy = double(c) / n;
    mi += pxy * std::log2(pxy * n * n / (double(px[xy.first]) * double(py[xy.second])));
  }
  return mi;
}

}  // namespace pond
