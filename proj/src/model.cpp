#include "pond/model.hpp"

#include <cmath>
#include <string>

#include "pond/errors.hpp"

namespace pond {

using ng::Graph;
using ng::NodeId;
using ng::Tensor;

PatchPlan plan_patches(std::size_t total_len, const PatchConfig& patch) {
  if (patch.patch_len == 0 || patch.stride == 0 || patch.stride > patch.patch_len)
    throw ConfigError("patching needs 1 <= stride <= patch_len");
  if (total_len < patch.patch_len)
    throw InvalidArgument("series of length " + std::to_string(total_len) + " is shorter than patch_len " +
                          std::to_string(patch.patch_len));
  PatchPlan plan;
  plan.padded_len = total_len;
  while ((plan.padded_len - patch.patch_len) % patch.stride != 0) ++plan.padded_len;
  plan.count = (plan.padded_len - patch.patch_len) / patch.stride + 1;
  return plan;
}

Tensor patchify(const Tensor& series, const PatchConfig& patch) {
  if (series.rank() != 2) throw ShapeError("patchify expects an [n, T] series");
  const std::size_t n = series.dim(0), T = series.dim(1);
  const auto plan = plan_patches(T, patch);
  Tensor out({plan.count, n * patch.patch_len});
  for (std::size_t p = 0; p < plan.count; ++p)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t k = 0; k < patch.patch_len; ++k) {
        const std::size_t t = std::min(p * patch.stride + k, T - 1);
        out.at(p, c * patch.patch_len + k) = series.at(c, t);
      }
  return out;
}

void ModelConfig::validate() const {
  if (channels < 1 || length < 2) throw ConfigError("model needs n >= 1 and L >= 2");
  if (classes < 1) throw ConfigError("model needs K >= 1");
  if (experts < 1) throw ConfigError("model needs at least one expert");
  if (heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be divisible by the head count");
  if (d_ff < 1 || router_hidden < 1) throw ConfigError("layer widths must be positive");
  if (patch.patch_len < 1 || patch.patch_len > total_len())
    throw ConfigError("patch_len must lie in [1, m+L]");
  if (patch.stride < 1 || patch.stride > patch.patch_len) throw ConfigError("stride must lie in [1, patch_len]");
}

Json ModelConfig::to_json() const {
  return Json{{"n", channels},
              {"L", length},
              {"m", prompt_len},
              {"K", classes},
              {"experts", experts},
              {"d_model", d_model},
              {"heads", heads},
              {"d_ff", d_ff},
              {"encoder_blocks", encoder_blocks},
              {"router_hidden", router_hidden},
              {"patch_len", patch.patch_len},
              {"stride", patch.stride}};
}

ModelConfig ModelConfig::from_json(const Json& j) {
  ModelConfig c;
  c.channels = j.at("n").get<std::size_t>();
  c.length = j.at("L").get<std::size_t>();
  c.prompt_len = j.at("m").get<std::size_t>();
  c.classes = j.at("K").get<std::size_t>();
  c.experts = j.at("experts").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.encoder_blocks = j.at("encoder_blocks").get<std::size_t>();
  c.router_hidden = j.at("router_hidden").get<std::size_t>();
  c.patch.patch_len = j.at("patch_len").get<std::size_t>();
  c.patch.stride = j.at("stride").get<std::size_t>();
  return c;
}

std::size_t MoEModel::parameter_count() const {
  std::size_t n = pond::parameter_count(router);
  for (const auto& e : experts) n += pond::parameter_count(e);
  return n;
}

namespace {

void add_attention(ParamList& p, const std::string& pre, std::size_t d, Rng& rng) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    p.push_back({pre + w, glorot_uniform(d, d, rng)});
    p.push_back({pre + "b" + std::string(w + 1), Tensor({d})});
  }
}

void add_layer_norm(ParamList& p, const std::string& pre, std::size_t d) {
  p.push_back({pre + "g", Tensor::filled({d}, 1.0)});
  p.push_back({pre + "b", Tensor({d})});
}

}  // namespace

ParamList init_expert(const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.d_model;
  const std::size_t in = c.channels * c.patch.patch_len;
  ParamList p;
  p.push_back({"proj.w", glorot_uniform(in, d, rng)});
  p.push_back({"proj.b", Tensor({d})});
  p.push_back({"pos", glorot_uniform(c.patch_count(), d, rng)});
  for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
    const std::string pre = "enc" + std::to_string(b) + ".";
    add_attention(p, pre + "attn.", d, rng);
    add_layer_norm(p, pre + "ln1.", d);
    p.push_back({pre + "ff1.w", glorot_uniform(d, c.d_ff, rng)});
    p.push_back({pre + "ff1.b", Tensor({c.d_ff})});
    p.push_back({pre + "ff2.w", glorot_uniform(c.d_ff, d, rng)});
    p.push_back({pre + "ff2.b", Tensor({d})});
    add_layer_norm(p, pre + "ln2.", d);
  }
  p.push_back({"pool.query", glorot_uniform(1, d, rng)});
  add_attention(p, "pool.attn.", d, rng);
  add_layer_norm(p, "pool.ln.", d);
  p.push_back({"head.w", glorot_uniform(d, c.classes, rng)});
  p.push_back({"head.b", Tensor({c.classes})});
  return p;
}

MoEModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  MoEModel m;
  m.config = config;
  Rng rng(seed);
  for (std::size_t e = 0; e < config.experts; ++e) m.experts.push_back(init_expert(config, rng));
  const std::size_t in = 2 * config.channels;
  m.router.push_back({"router.l1.w", glorot_uniform(in, config.router_hidden, rng)});
  m.router.push_back({"router.l1.b", Tensor({config.router_hidden})});
  m.router.push_back({"router.l2.w", glorot_uniform(config.router_hidden, config.experts, rng)});
  m.router.push_back({"router.l2.b", Tensor({config.experts})});
  return m;
}

BoundModel bind_model(Graph& g, const MoEModel& model, bool trainable) {
  BoundModel b;
  for (std::size_t e = 0; e < model.experts.size(); ++e)
    b.experts.emplace_back(g, model.experts[e], trainable, "e" + std::to_string(e) + ".");
  b.router = BoundParams(g, model.router, trainable);
  return b;
}

namespace {

NodeId affine(Graph& g, NodeId x, NodeId w, NodeId b) { return g.add(g.matmul(x, w), b); }

// Multi-head self-attention over x [B, S, d].
NodeId self_attention(Graph& g, const ModelConfig& c, const BoundParams& p, const std::string& pre, NodeId x) {
  const std::size_t B = g.shape(x)[0], S = g.shape(x)[1], d = c.d_model, h = c.heads, dh = d / h;
  auto heads = [&](const char* w, const char* b, std::vector<std::size_t> perm) {
    NodeId y = affine(g, x, p[pre + w], p[pre + b]);
    return g.transpose(g.reshape(y, {B, S, h, dh}), std::move(perm));
  };
  NodeId q = heads("wq", "bq", {0, 2, 1, 3});  // [B,h,S,dh]
  NodeId kt = heads("wk", "bk", {0, 2, 3, 1});  // [B,h,dh,S]
  NodeId v = heads("wv", "bv", {0, 2, 1, 3});
  NodeId att = g.softmax(g.scale(g.matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh))));
  NodeId ctx = g.reshape(g.transpose(g.matmul(att, v), {0, 2, 1, 3}), {B, S, d});
  return affine(g, ctx, p[pre + "wo"], p[pre + "bo"]);
}

// A learned query cross-attends the encoded sequence; returns [B, d].
NodeId attention_pool(Graph& g, const ModelConfig& c, const BoundParams& p, NodeId enc) {
  const std::size_t B = g.shape(enc)[0], S = g.shape(enc)[1], d = c.d_model, h = c.heads, dh = d / h;
  const std::string pre = "pool.attn.";
  NodeId query = p["pool.query"];  // [1, d]
  NodeId q = g.transpose(g.reshape(affine(g, query, p[pre + "wq"], p[pre + "bq"]), {1, h, dh}), {1, 0, 2});
  NodeId kt = g.transpose(g.reshape(affine(g, enc, p[pre + "wk"], p[pre + "bk"]), {B, S, h, dh}), {0, 2, 3, 1});
  NodeId v = g.transpose(g.reshape(affine(g, enc, p[pre + "wv"], p[pre + "bv"]), {B, S, h, dh}), {0, 2, 1, 3});
  NodeId att = g.softmax(g.scale(g.matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh))));  // [B,h,1,S]
  NodeId ctx = g.reshape(g.transpose(g.matmul(att, v), {0, 2, 1, 3}), {B, d});
  NodeId out = affine(g, ctx, p[pre + "wo"], p[pre + "bo"]);
  return g.layer_norm(g.add(out, g.reshape(query, {d})), p["pool.ln.g"], p["pool.ln.b"]);
}

}  // namespace

NodeId build_patch_tokens(Graph& g, const PatchConfig& patch, NodeId input) {
  const ng::Shape& s = g.shape(input);
  const std::size_t B = s[0], n = s[1], T = s[2];
  const auto plan = plan_patches(T, patch);
  NodeId x = input;
  if (plan.padded_len > T) {
    NodeId last = g.slice(input, 2, T - 1, 1);
    std::vector<NodeId> parts{input};
    parts.insert(parts.end(), plan.padded_len - T, last);
    x = g.concat(parts, 2);
  }
  std::vector<NodeId> rows;
  rows.reserve(plan.count);
  for (std::size_t p = 0; p < plan.count; ++p)
    rows.push_back(g.reshape(g.slice(x, 2, p * patch.stride, patch.patch_len), {B, 1, n * patch.patch_len}));
  return g.concat(rows, 1);
}

namespace {

void check_input_shape(const Graph& g, const ModelConfig& c, NodeId input) {
  const auto& s = g.shape(input);
  if (s.size() != 3 || s[1] != c.channels || s[2] != c.total_len())
    throw ShapeError("model expects [B, " + std::to_string(c.channels) + ", " + std::to_string(c.total_len()) +
                     "] input, got " + ng::to_string(s));
}

}  // namespace

NodeId build_expert(Graph& g, const ModelConfig& c, const BoundParams& p, NodeId input) {
  check_input_shape(g, c, input);
  NodeId tokens = build_patch_tokens(g, c.patch, input);
  NodeId h = g.add(affine(g, tokens, p["proj.w"], p["proj.b"]), p["pos"]);
  for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
    const std::string pre = "enc" + std::to_string(b) + ".";
    h = g.layer_norm(g.add(h, self_attention(g, c, p, pre + "attn.", h)), p[pre + "ln1.g"], p[pre + "ln1.b"]);
    NodeId ff = affine(g, g.relu(affine(g, h, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"]);
    h = g.layer_norm(g.add(h, ff), p[pre + "ln2.g"], p[pre + "ln2.b"]);
  }
  NodeId pooled = attention_pool(g, c, p, h);
  return g.softmax(affine(g, pooled, p["head.w"], p["head.b"]));
}

NodeId build_router(Graph& g, const ModelConfig& c, const BoundParams& p, NodeId input) {
  check_input_shape(g, c, input);
  NodeId mean = g.mean(input, 2);                                      // [B, n]
  NodeId centered = g.add(g.transpose(input, {2, 0, 1}), g.scale(mean, -1.0));  // [T, B, n]
  NodeId var = g.mean(g.mul(centered, centered), 0);
  NodeId stdev = g.sqrt(g.add(var, g.constant(Tensor::filled({c.channels}, 1e-6))));
  const NodeId stats[] = {mean, stdev};
  NodeId features = g.concat(stats, 1);  // [B, 2n]
  NodeId hidden = g.tanh(affine(g, features, p["router.l1.w"], p["router.l1.b"]));
  return g.softmax(affine(g, hidden, p["router.l2.w"], p["router.l2.b"]));
}

NodeId build_moe(Graph& g, const MoEModel& model, const BoundModel& bound, NodeId input,
                 const std::optional<std::vector<double>>& fixed_router) {
  const auto& c = model.config;
  const std::size_t E = model.experts.size();
  const std::size_t B = g.shape(input)[0];
  if (E == 1 && !fixed_router) return build_expert(g, c, bound.experts[0], input);

  std::vector<NodeId> outs;
  for (std::size_t e = 0; e < E; ++e)
    outs.push_back(g.reshape(build_expert(g, c, bound.experts[e], input), {B, 1, c.classes}));
  NodeId stacked = g.concat(outs, 1);  // [B, E, K]
  NodeId weights;
  if (fixed_router) {
    if (fixed_router->size() != E) throw ShapeError("fixed router needs one weight per expert");
    weights = g.constant(Tensor({1, E}, *fixed_router));
  } else {
    weights = g.reshape(build_router(g, c, bound.router, input), {B, 1, E});
  }
  return g.reshape(g.matmul(weights, stacked), {B, c.classes});
}

namespace {
Tensor as_batch(const Tensor& t) {
  if (t.rank() == 2) return t.reshaped({1, t.dim(0), t.dim(1)});
  return t;
}
}  // namespace

Tensor expert_forward(const MoEModel& model, std::size_t expert, const Tensor& batch) {
  Graph g;
  BoundParams p(g, model.experts.at(expert), false);
  NodeId x = g.constant(as_batch(batch));
  return g.forward(build_expert(g, model.config, p, x));
}

Tensor router_forward(const MoEModel& model, const Tensor& batch) {
  Graph g;
  BoundParams p(g, model.router, false);
  NodeId x = g.constant(as_batch(batch));
  return g.forward(build_router(g, model.config, p, x));
}

Tensor moe_forward(const MoEModel& model, const Tensor& batch, const std::optional<std::vector<double>>& fixed_router) {
  Graph g;
  auto bound = bind_model(g, model, false);
  NodeId x = g.constant(as_batch(batch));
  return g.forward(build_moe(g, model, bound, x, fixed_router));
}

}  // namespace pond
