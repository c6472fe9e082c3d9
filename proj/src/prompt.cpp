#include "pond/prompt.hpp"

#include "pond/errors.hpp"

namespace pond {

using ng::NodeId;
using ng::Tensor;

Prompt zero_prompt(std::size_t channels, std::size_t prompt_len) { return Tensor({channels, prompt_len}); }

void GeneratorConfig::validate() const {
  if (channels == 0 || length == 0) throw ConfigError("generator needs positive channels and length");
  if (prompt_len == 0) throw ConfigError("generator needs prompt length >= 1");
  if (hidden == 0) throw ConfigError("generator hidden width must be positive");
}

Generator init_generator(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t in = config.channels * config.length;
  const std::size_t out = config.channels * config.prompt_len;
  Generator gen{config, {}};
  gen.params.push_back({"l1.w", glorot_uniform(in, config.hidden, rng)});
  gen.params.push_back({"l1.b", Tensor({config.hidden})});
  gen.params.push_back({"l2.w", glorot_uniform(config.hidden, out, rng)});
  gen.params.push_back({"l2.b", Tensor({out})});
  return gen;
}

NodeId build_generator(ng::Graph& g, const GeneratorConfig& c, const BoundParams& p, NodeId x) {
  const auto& s = g.shape(x);
  if (s.size() != 3 || s[1] != c.channels || s[2] != c.length)
    throw ShapeError("generator expects [B, " + std::to_string(c.channels) + ", " + std::to_string(c.length) +
                     "], got " + ng::to_string(s));
  const std::size_t B = s[0];
  NodeId flat = g.reshape(x, {B, c.channels * c.length});
  NodeId h = g.tanh(g.add(g.matmul(flat, p["l1.w"]), p["l1.b"]));
  NodeId out = g.add(g.matmul(h, p["l2.w"]), p["l2.b"]);
  return g.reshape(out, {B, c.channels, c.prompt_len});
}

Prompt generate_instance_prompt(const Generator& gen, const Tensor& x) {
  const bool single = x.rank() == 2;
  if (!single && x.rank() != 3) throw ShapeError("generator input must be [n, L] or [B, n, L]");
  ng::Graph g;
  BoundParams p(g, gen.params, false);
  NodeId in = g.constant(single ? x.reshaped({1, x.dim(0), x.dim(1)}) : x);
  Tensor out = g.forward(build_generator(g, gen.config, p, in));
  if (single) return out.reshaped({gen.config.channels, gen.config.prompt_len});
  return out;
}

void apply_zeta(Prompt& prompt, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  for (auto& v : prompt.values()) v += sigma * rng.normal();
}

Prompt aggregate_domain_prompt(const std::vector<Prompt>& prompts) {
  if (prompts.empty()) throw InvalidArgument("cannot aggregate an empty prompt list");
  Prompt mean(prompts.front().shape());
  for (const auto& p : prompts) {
    if (p.shape() != mean.shape())
      throw ShapeError("prompt shape " + ng::to_string(p.shape()) + " differs from " + ng::to_string(mean.shape()));
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean.values()) v /= double(prompts.size());
  return mean;
}

Prompt aggregate_domain_prompt(const Tensor& stacked) {
  if (stacked.rank() != 3) throw ShapeError("stacked prompts must be [B, n, m]");
  const std::size_t B = stacked.dim(0), per = stacked.size() / B;
  Prompt mean({stacked.dim(1), stacked.dim(2)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) mean[i] += stacked[b * per + i];
  for (auto& v : mean.values()) v /= double(B);
  return mean;
}

DomainPromptBuffer::DomainPromptBuffer(std::size_t channels, std::size_t prompt_len, double b)
    : prompt(zero_prompt(channels, prompt_len)), beta(b) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("buffer momentum must lie in [0, 1)");
}

void update_buffer(DomainPromptBuffer& buffer, const Prompt& m) {
  if (m.shape() != buffer.prompt.shape()) throw ShapeError("buffer update shape mismatch");
  if (buffer.updates == 0) {
    buffer.prompt = m;
  } else {
    for (std::size_t i = 0; i < m.size(); ++i)
      buffer.prompt[i] = buffer.beta * buffer.prompt[i] + (1.0 - buffer.beta) * m[i];
  }
  ++buffer.updates;
}

void update_buffer(DomainPromptBuffer& buffer, const std::vector<Prompt>& batch) {
  update_buffer(buffer, aggregate_domain_prompt(batch));
}

void require_prompt_len(std::size_t m, PrependMode mode) {
  if (m == 0 && mode == PrependMode::Normal) throw InvalidArgument("prompt length must be at least 1");
}

Tensor prepend(const Prompt& common, const Prompt& instance, const Tensor& x, PrependMode mode) {
  if (common.shape() != instance.shape()) throw ShapeError("common and instance prompts differ in shape");
  if (x.rank() != 2 || common.rank() != 2 || x.dim(0) != common.dim(0))
    throw ShapeError("prompt " + ng::to_string(common.shape()) + " does not fit series " + ng::to_string(x.shape()));
  const std::size_t n = x.dim(0), m = common.dim(1), L = x.dim(1);
  require_prompt_len(m, mode);
  Tensor out({n, m + L});
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t t = 0; t < m; ++t) out.at(c, t) = common.at(c, t) + instance.at(c, t);
    for (std::size_t t = 0; t < L; ++t) out.at(c, m + t) = x.at(c, t);
  }
  return out;
}

NodeId build_prepend(ng::Graph& g, NodeId prompt, NodeId x) {
  const ng::Shape xs = g.shape(x);
  auto ps = g.shape(prompt);
  if (xs.size() != 3) throw ShapeError("prepend expects a [B, n, L] series node");
  if (ps.size() == 2) {
    prompt = g.add(g.constant(Tensor({xs[0], ps[0], ps[1]})), prompt);
    ps = g.shape(prompt);
  }
  if (ps.size() != 3 || ps[0] != xs[0] || ps[1] != xs[1])
    throw ShapeError("prompt " + ng::to_string(ps) + " does not fit series " + ng::to_string(xs));
  const NodeId parts[] = {prompt, x};
  return g.concat(parts, 2);
}

}  // namespace pond
