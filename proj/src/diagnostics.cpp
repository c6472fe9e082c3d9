#include "pond/diagnostics.hpp"

#include <functional>

#include "pond/objective.hpp"

namespace pond {

using ng::Graph;
using ng::NodeId;
using ng::Tensor;

namespace {

Tensor uniform(Rng& rng, ng::Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

using Builder = std::function<NodeId(Graph&, Rng&)>;

std::vector<std::pair<std::string, Builder>> primitives() {
  return {
      {"matmul", [](Graph& g, Rng& r) { return g.matmul(g.leaf(uniform(r, {3, 4}), true), g.leaf(uniform(r, {4, 2}), true)); }},
      {"matmul_batched", [](Graph& g, Rng& r) {
         return g.matmul(g.leaf(uniform(r, {2, 3, 4}), true), g.leaf(uniform(r, {4, 2}), true));
       }},
      {"add", [](Graph& g, Rng& r) { return g.add(g.leaf(uniform(r, {2, 3, 4}), true), g.leaf(uniform(r, {3, 4}), true)); }},
      {"mul", [](Graph& g, Rng& r) { return g.mul(g.leaf(uniform(r, {4}), true), g.leaf(uniform(r, {3, 4}), true)); }},
      {"relu", [](Graph& g, Rng& r) {
         Tensor t = uniform(r, {3, 5});
         for (auto& v : t.values()) v += v < 0 ? -0.05 : 0.05;
         return g.relu(g.leaf(t, true));
       }},
      {"tanh", [](Graph& g, Rng& r) { return g.tanh(g.leaf(uniform(r, {3, 5}, -2, 2), true)); }},
      {"exp", [](Graph& g, Rng& r) { return g.exp(g.leaf(uniform(r, {6}), true)); }},
      {"log", [](Graph& g, Rng& r) { return g.log(g.leaf(uniform(r, {6}, 0.2, 3.0), true)); }},
      {"sqrt", [](Graph& g, Rng& r) { return g.sqrt(g.leaf(uniform(r, {6}, 0.2, 3.0), true)); }},
      {"softmax", [](Graph& g, Rng& r) { return g.softmax(g.leaf(uniform(r, {3, 5}, -2, 2), true)); }},
      {"logsumexp", [](Graph& g, Rng& r) { return g.logsumexp(g.leaf(uniform(r, {3, 5}, -2, 2), true)); }},
      {"layer_norm", [](Graph& g, Rng& r) {
         return g.layer_norm(g.leaf(uniform(r, {3, 6}, -2, 2), true), g.leaf(uniform(r, {6}), true),
                             g.leaf(uniform(r, {6}), true));
       }},
      {"concat", [](Graph& g, Rng& r) {
         const NodeId parts[] = {g.leaf(uniform(r, {2, 3, 2}), true), g.leaf(uniform(r, {2, 1, 2}), true)};
         return g.concat(parts, 1);
       }},
      {"slice", [](Graph& g, Rng& r) { return g.slice(g.leaf(uniform(r, {2, 5, 3}), true), 1, 1, 3); }},
      {"mean", [](Graph& g, Rng& r) { return g.mean(g.leaf(uniform(r, {2, 5, 3}), true), 1); }},
      {"sum", [](Graph& g, Rng& r) { return g.sum(g.leaf(uniform(r, {2, 5}), true)); }},
      {"reshape", [](Graph& g, Rng& r) { return g.reshape(g.leaf(uniform(r, {2, 6}), true), {3, 4}); }},
      {"transpose", [](Graph& g, Rng& r) { return g.transpose(g.leaf(uniform(r, {2, 3, 4}), true), {2, 0, 1}); }},
      {"scale", [](Graph& g, Rng& r) { return g.scale(g.leaf(uniform(r, {4}), true), -1.7); }},
      {"cross_entropy", [](Graph& g, Rng& r) {
         const NodeId p = g.softmax(g.leaf(uniform(r, {3, 4}), true));
         Tensor y({3, 4});
         for (std::size_t i = 0; i < 3; ++i) y.at(i, r.index(4)) = 1.0;
         return g.cross_entropy(p, g.constant(y));
       }},
  };
}

ng::GradCheckReport full_objective(std::uint64_t seed, double step, double tol) {
  ModelConfig c;
  c.channels = 2;
  c.length = 12;
  c.prompt_len = 3;
  c.classes = 3;
  c.experts = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 8;
  c.encoder_blocks = 1;
  c.router_hidden = 4;
  c.patch = {5, 5};
  Rng rng(seed);
  const MoEModel model = init_model(c, rng.next_u64());
  const Generator gen = init_generator({c.channels, c.length, c.prompt_len, 6}, rng.next_u64());

  Graph g;
  auto bound = bind_model(g, model, true);
  BoundParams gp(g, gen.params, true);
  const NodeId P = g.leaf(uniform(rng, {c.channels, c.prompt_len}, -0.1, 0.1), true, "P");
  const NodeId x = g.constant(uniform(rng, {2, c.channels, c.length}));
  const NodeId y = g.constant(one_hot(std::vector<std::size_t>{1, 2}, c.classes));
  const NodeId inst = build_generator(g, gen.config, gp, x);
  const NodeId R = build_prompted_loss(g, model, bound, P, inst, x, y);
  const NodeId F = build_prompted_loss(g, model, bound, kNoNode, inst, x, y);
  std::vector<NodeId> prompts{g.mean(inst, 0)};
  for (int i = 0; i < 3; ++i) prompts.push_back(g.constant(uniform(rng, {c.channels, c.prompt_len}, -0.3, 0.3)));
  const NodeId D = build_loss_D(g, prompts).value;
  const NodeId G = build_total_G(g, R, D, F, {1.0, 1.0});
  return ng::grad_check(g, G, {}, step, tol);
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step, double tol) {
  std::vector<GradCheckEntry> out;
  std::uint64_t k = 0;
  for (const auto& [name, build] : primitives()) {
    Rng rng(Rng::derive(seed, k++));
    Graph g;
    const NodeId node = build(g, rng);
    const NodeId root = g.sum(g.mul(node, g.constant(uniform(rng, g.shape(node)))));
    out.push_back({name, ng::grad_check(g, root, {}, step, tol)});
  }
  out.push_back({"full_objective", full_objective(Rng::derive(seed, k), step, tol)});
  return out;
}

Json gradcheck_json(const std::vector<GradCheckEntry>& entries) {
  Json checks = Json::array();
  bool passed = true;
  for (const auto& e : entries) {
    checks.push_back({{"name", e.name},
                      {"entries", e.report.entries_checked},
                      {"max_rel_error", e.report.max_rel_error},
                      {"tolerance", e.report.tolerance},
                      {"passed", e.report.passed}});
    passed = passed && e.report.passed;
  }
  return Json{{"checks", checks}, {"passed", passed}};
}

}  // namespace pond
