#include "pond/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pond/errors.hpp"
#include "pond/json_util.hpp"
#include "pond/synthetic.hpp"

namespace pond {

using ng::NodeId;
using ng::Tensor;

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("delta must lie in (0, 1]");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive");
  if (steps == 0) throw ConfigError("steps (N) must be at least 1");
  if (batch == 0) throw ConfigError("batch must be at least 1");
  if (prompt_len == 0) throw ConfigError("prompt_len must be at least 1");
  if (target_shots == 0) throw ConfigError("target_shots must be at least 1");
  if (!(buffer_beta >= 0.0 && buffer_beta < 1.0)) throw ConfigError("buffer_beta must lie in [0, 1)");
  if (!(zeta_sigma >= 0.0)) throw ConfigError("zeta_sigma must be non-negative");
  if (!(pretrain_rate > 0.0)) throw ConfigError("pretrain_rate must be positive");
  if (generator_hidden == 0) throw ConfigError("generator_hidden must be positive");
  if (!flags.use_common_prompt && !flags.use_generator && !flags.use_moe)
    throw ConfigError("at least one component must stay enabled");
  weights.validate();
  const double s = split.pretrain + split.tune + split.validation;
  if (std::abs(s - 1.0) > 1e-9 || split.pretrain < 0 || split.tune < 0 || split.validation < 0)
    throw ConfigError("split ratios must be non-negative and sum to 1");
}

namespace {

const char* name_of(FidelityInput f) { return f == FidelityInput::DomainOnly ? "domain" : "common_plus_domain"; }
const char* name_of(CommonGradient c) { return c == CommonGradient::Objective ? "objective" : "training"; }
const char* name_of(SourceSelection s) { return s == SourceSelection::Nearest ? "nearest" : "random"; }

template <class E>
E parse_enum(const Json& j, const char* key, E current, std::initializer_list<std::pair<const char*, E>> options) {
  auto it = j.find(key);
  if (it == j.end()) return current;
  if (!it->is_string()) throw ConfigError(std::string("run.") + key + " must be a string");
  for (const auto& [name, value] : options)
    if (*it == name) return value;
  throw ConfigError(std::string("run.") + key + " has unknown value " + it->dump());
}

}  // namespace

Json RunConfig::to_json() const {
  Json j{{"epochs", epochs},
         {"batch", batch},
         {"steps", steps},
         {"delta", delta},
         {"eta", eta},
         {"prompt_len", prompt_len},
         {"lambda1", weights.discrimination},
         {"lambda2", weights.fidelity},
         {"target_shots", target_shots},
         {"seed", seed},
         {"use_moe", flags.use_moe},
         {"use_common_prompt", flags.use_common_prompt},
         {"use_generator", flags.use_generator},
         {"fidelity_input", name_of(fidelity_input)},
         {"common_gradient", name_of(common_gradient)},
         {"selection", name_of(selection)},
         {"zeta_sigma", zeta_sigma},
         {"buffer_beta", buffer_beta},
         {"generator_hidden", generator_hidden},
         {"pretrain_rate", pretrain_rate},
         {"split", {{"pretrain", split.pretrain}, {"tune", split.tune}, {"validation", split.validation}}},
         {"model",
          {{"experts", model.experts},
           {"d_model", model.d_model},
           {"heads", model.heads},
           {"d_ff", model.d_ff},
           {"encoder_blocks", model.encoder_blocks},
           {"router_hidden", model.router_hidden},
           {"patch_len", model.patch.patch_len},
           {"stride", model.patch.stride}}}};
  j["transfer_epochs"] = transfer_epochs ? Json(*transfer_epochs) : Json(nullptr);
  return j;
}

RunConfig RunConfig::from_json(const Json& j) {
  check_keys(j,
             {"epochs", "transfer_epochs", "batch", "steps", "delta", "eta", "prompt_len", "lambda1", "lambda2",
              "target_shots", "seed", "use_moe", "use_common_prompt", "use_generator", "fidelity_input",
              "common_gradient", "selection", "zeta_sigma", "buffer_beta", "generator_hidden", "pretrain_rate",
              "split", "model"},
             "run");
  RunConfig c;
  read_key(j, "epochs", c.epochs, "run");
  if (auto it = j.find("transfer_epochs"); it != j.end() && !it->is_null()) {
    std::size_t t = 0;
    read_key(j, "transfer_epochs", t, "run");
    c.transfer_epochs = t;
  }
  read_key(j, "batch", c.batch, "run");
  read_key(j, "steps", c.steps, "run");
  read_key(j, "delta", c.delta, "run");
  read_key(j, "eta", c.eta, "run");
  read_key(j, "prompt_len", c.prompt_len, "run");
  read_key(j, "lambda1", c.weights.discrimination, "run");
  read_key(j, "lambda2", c.weights.fidelity, "run");
  read_key(j, "target_shots", c.target_shots, "run");
  read_key(j, "seed", c.seed, "run");
  read_key(j, "use_moe", c.flags.use_moe, "run");
  read_key(j, "use_common_prompt", c.flags.use_common_prompt, "run");
  read_key(j, "use_generator", c.flags.use_generator, "run");
  c.fidelity_input = parse_enum(j, "fidelity_input", c.fidelity_input,
                                {{"domain", FidelityInput::DomainOnly},
                                 {"common_plus_domain", FidelityInput::CommonPlusDomain}});
  c.common_gradient = parse_enum(j, "common_gradient", c.common_gradient,
                                 {{"objective", CommonGradient::Objective},
                                  {"training", CommonGradient::TrainingOnly}});
  c.selection = parse_enum(j, "selection", c.selection,
                           {{"nearest", SourceSelection::Nearest}, {"random", SourceSelection::Random}});
  read_key(j, "zeta_sigma", c.zeta_sigma, "run");
  read_key(j, "buffer_beta", c.buffer_beta, "run");
  read_key(j, "generator_hidden", c.generator_hidden, "run");
  read_key(j, "pretrain_rate", c.pretrain_rate, "run");
  if (auto it = j.find("split"); it != j.end()) {
    check_keys(*it, {"pretrain", "tune", "validation"}, "run.split");
    read_key(*it, "pretrain", c.split.pretrain, "run.split");
    read_key(*it, "tune", c.split.tune, "run.split");
    read_key(*it, "validation", c.split.validation, "run.split");
  }
  if (auto it = j.find("model"); it != j.end()) {
    check_keys(*it, {"experts", "d_model", "heads", "d_ff", "encoder_blocks", "router_hidden", "patch_len", "stride"},
               "run.model");
    read_key(*it, "experts", c.model.experts, "run.model");
    read_key(*it, "d_model", c.model.d_model, "run.model");
    read_key(*it, "heads", c.model.heads, "run.model");
    read_key(*it, "d_ff", c.model.d_ff, "run.model");
    read_key(*it, "encoder_blocks", c.model.encoder_blocks, "run.model");
    read_key(*it, "router_hidden", c.model.router_hidden, "run.model");
    read_key(*it, "patch_len", c.model.patch.patch_len, "run.model");
    read_key(*it, "stride", c.model.patch.stride, "run.model");
  }
  c.validate();
  return c;
}

std::uint64_t stream_seed(const RunConfig& config, Stream s) {
  return Rng::derive(config.seed, static_cast<std::uint64_t>(s));
}

ModelConfig model_config_for(const RunConfig& config, const DomainDataset& probe) {
  ModelConfig c = config.model;
  c.channels = probe.channels;
  c.length = probe.length;
  c.classes = probe.classes;
  c.prompt_len = config.prompt_len;
  if (!config.flags.use_moe) c.experts = 1;
  c.validate();
  return c;
}

GeneratorConfig generator_config_for(const RunConfig& config, const DomainDataset& probe) {
  return {probe.channels, probe.length, config.prompt_len, config.generator_hidden};
}

std::vector<DomainDataset> split_sources(const std::vector<DomainDataset>& sources, const RunConfig& config) {
  std::vector<DomainDataset> out;
  for (std::size_t i = 0; i < sources.size(); ++i)
    out.push_back(split(sources[i], config.split, Rng::derive(stream_seed(config, Stream::Split), i)));
  return out;
}

// ---------------------------------------------------------------- batches

namespace {

Batch gather(const std::vector<const LabeledInstance*>& items) {
  if (items.empty()) throw InvalidArgument("empty batch");
  const std::size_t n = items.front()->series.channels, L = items.front()->series.length;
  Batch b{Tensor({items.size(), n, L}), {}};
  double* out = b.x.raw();
  for (const auto* it : items) {
    if (it->series.channels != n || it->series.length != L) throw ShapeError("series shapes differ within a batch");
    out = std::copy(it->series.values.begin(), it->series.values.end(), out);
    b.labels.push_back(it->label);
  }
  return b;
}

}  // namespace

Batch make_batch(const DomainDataset& d, const std::vector<std::size_t>& indices) {
  std::vector<const LabeledInstance*> items;
  for (auto i : indices) items.push_back(&d.instances.at(i));
  return gather(items);
}

Batch make_batch(const std::vector<LabeledInstance>& instances) {
  std::vector<const LabeledInstance*> items;
  for (const auto& i : instances) items.push_back(&i);
  return gather(items);
}

// ---------------------------------------------------------------- pretraining

Json PretrainReport::to_json() const {
  return Json{{"initial_loss", initial_loss},
              {"final_loss", final_loss},
              {"epoch_loss", epoch_loss},
              {"optimizer_steps", optimizer_steps}};
}

namespace {

constexpr std::size_t kEvalChunk = 64;

NodeId zero_prompted(ng::Graph& g, const ModelConfig& c, NodeId x) {
  return build_prepend(g, g.constant(zero_prompt(c.channels, c.prompt_len)), x);
}

double pool_loss(const MoEModel& model, const std::vector<const LabeledInstance*>& pool) {
  double total = 0.0;
  for (std::size_t start = 0; start < pool.size(); start += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, pool.size() - start);
    Batch b = gather({pool.begin() + long(start), pool.begin() + long(start + count)});
    ng::Graph g;
    auto bound = bind_model(g, model, false);
    const NodeId x = g.constant(b.x);
    const NodeId loss =
        g.cross_entropy(build_moe(g, model, bound, zero_prompted(g, model.config, x)),
                        g.constant(one_hot(b.labels, model.config.classes)));
    total += g.forward(loss).item() * double(count);
  }
  return total / double(pool.size());
}

}  // namespace

MoEModel pretrain(const MoEModel& init, const std::vector<DomainDataset>& sources, const RunConfig& config,
                  PretrainReport* report) {
  config.validate();
  std::vector<const LabeledInstance*> pool;
  for (const auto& d : sources)
    for (auto i : d.indices_of(Split::Pretrain)) pool.push_back(&d.instances[i]);
  if (pool.empty()) throw InvalidArgument("pretraining pool is empty");

  MoEModel model = init;
  std::vector<Adam> expert_opt;
  for (const auto& e : model.experts) expert_opt.emplace_back(e, config.pretrain_rate);
  Adam router_opt(model.router, config.pretrain_rate);
  Rng rng(stream_seed(config, Stream::PretrainShuffle));

  PretrainReport local;
  local.initial_loss = pool_loss(model, pool);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      std::vector<const LabeledInstance*> items;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch); ++k) items.push_back(pool[order[k]]);
      Batch b = gather(items);
      ng::Graph g;
      auto bound = bind_model(g, model, true);
      const NodeId x = g.constant(b.x);
      const NodeId loss = g.cross_entropy(build_moe(g, model, bound, zero_prompted(g, model.config, x)),
                                          g.constant(one_hot(b.labels, model.config.classes)));
      sum += g.forward(loss).item();
      ++batches;
      const auto grads = g.backward(loss);
      for (std::size_t k = 0; k < model.experts.size(); ++k) expert_opt[k].step(model.experts[k], bound.experts[k], grads);
      if (model.experts.size() > 1) router_opt.step(model.router, bound.router, grads);
      ++local.optimizer_steps;
    }
    local.epoch_loss.push_back(sum / double(batches));
  }
  local.final_loss = pool_loss(model, pool);
  if (report) *report = std::move(local);
  return model;
}

// ---------------------------------------------------------------- prompt tuning

TrainedState init_state(const MoEModel& model, const std::vector<DomainDataset>& sources, const RunConfig& config) {
  if (sources.empty()) throw InvalidArgument("no source domains");
  config.validate();
  TrainedState s;
  s.model = model;
  s.flags = config.flags;
  s.common = zero_prompt(model.config.channels, model.config.prompt_len);
  const auto gc = generator_config_for(config, sources.front());
  const std::uint64_t gseed = stream_seed(config, Stream::GeneratorInit);
  for (const auto& d : sources) {
    if (d.channels != model.config.channels || d.length != model.config.length || d.classes != model.config.classes)
      throw ShapeError("domain " + d.domain_id + " does not match the model geometry");
    s.source_ids.push_back(d.domain_id);
    s.generators.push_back(init_generator(gc, gseed));
    s.buffers.emplace_back(model.config.channels, model.config.prompt_len, config.buffer_beta);
  }
  return s;
}

Prompt domain_prompt(const TrainedState& state, const Generator& gen, const Tensor& x) {
  if (!state.flags.use_generator) return zero_prompt(state.model.config.channels, state.model.config.prompt_len);
  return aggregate_domain_prompt(generate_instance_prompt(gen, x));
}

void reptile_tune(TrainedState& state, const std::vector<DomainDataset>& sources, const RunConfig& config) {
  config.validate();
  const std::size_t M = sources.size();
  if (M != state.source_count()) throw InvalidArgument("state and source list disagree on the domain count");
  std::vector<std::vector<std::size_t>> tune(M);
  std::vector<std::size_t> tunable;
  for (std::size_t i = 0; i < M; ++i) {
    tune[i] = sources[i].indices_of(Split::Tune);
    if (!tune[i].empty()) tunable.push_back(i);
  }
  if (tunable.empty()) throw InvalidArgument("no source domain has tuning data");
  const bool discriminate = M >= 2;
  const auto& mc = state.model.config;

  // Buffers start from the exact means under the initial generators.
  for (std::size_t i : tunable)
    update_buffer(state.buffers[i], domain_prompt(state, state.generators[i], make_batch(sources[i], tune[i]).x));

  Rng rng(stream_seed(config, Stream::Reptile));
  Rng zeta(stream_seed(config, Stream::Zeta));
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const std::size_t tau = tunable[rng.index(tunable.size())];
    std::vector<std::size_t> order = tune[tau];
    rng.shuffle(order);
    order.resize(std::min(order.size(), config.batch));
    const Batch b = make_batch(sources[tau], order);
    const std::size_t B = order.size();

    ng::Graph g;
    auto bound = bind_model(g, state.model, false);
    const NodeId P = state.flags.use_common_prompt ? g.leaf(state.common, true, "P") : g.constant(state.common);
    const NodeId x = g.constant(b.x);
    const NodeId y = g.constant(one_hot(b.labels, mc.classes));
    BoundParams gp;
    NodeId inst;
    if (state.flags.use_generator) {
      gp = BoundParams(g, state.generators[tau].params, true);
      inst = build_generator(g, state.generators[tau].config, gp, x);
    } else {
      inst = g.constant(Tensor({B, mc.channels, mc.prompt_len}));
    }
    if (config.zeta_sigma > 0.0) {
      Tensor noise({B, mc.channels, mc.prompt_len});
      apply_zeta(noise, config.zeta_sigma, zeta);
      inst = g.add(inst, g.constant(noise));
    }
    const NodeId R = build_prompted_loss(g, state.model, bound, P, inst, x, y);
    const NodeId F = build_prompted_loss(g, state.model, bound,
                                         config.fidelity_input == FidelityInput::DomainOnly ? kNoNode : P, inst, x, y);
    const NodeId batch_mean = g.mean(inst, 0);
    NodeId D;
    bool fallback = false;
    if (discriminate) {
      std::vector<NodeId> prompts;
      for (std::size_t i = 0; i < M; ++i) prompts.push_back(i == tau ? batch_mean : g.constant(state.buffers[i].prompt));
      auto d = build_loss_D(g, prompts);
      D = d.value;
      fallback = d.fallback;
    } else {
      D = g.constant(Tensor({1}));
    }
    const NodeId G = build_total_G(g, R, D, F, config.weights);
    g.forward(G);

    StepRecord rec;
    rec.step = step;
    rec.domain = tau;
    rec.batch = order;
    rec.losses = total_G(g.value(R).item(), g.value(D).item(), g.value(F).item(), config.weights);
    rec.losses.discrimination_fallback = fallback;

    const auto grads = g.backward(G);
    if (state.flags.use_generator) sgd_step(state.generators[tau].params, gp, grads, config.eta);
    if (state.flags.use_common_prompt) {
      const Tensor gradP = config.common_gradient == CommonGradient::Objective ? grads.at(P) : g.backward(R).at(P);
      for (std::size_t i = 0; i < state.common.size(); ++i) {
        const double q = state.common[i] - config.eta * gradP[i];
        state.common[i] = state.common[i] + config.delta * (q - state.common[i]);
      }
    }
    update_buffer(state.buffers[tau], g.value(batch_mean));
    state.history.push_back(std::move(rec));
  }

  state.domain_prompts.assign(M, zero_prompt(mc.channels, mc.prompt_len));
  for (std::size_t i : tunable)
    state.domain_prompts[i] = domain_prompt(state, state.generators[i], make_batch(sources[i], tune[i]).x);
}

// ---------------------------------------------------------------- target transfer

namespace {

double shot_loss(const TrainedState& state, const Generator& gen, const Batch& b) {
  ng::Graph g;
  auto bound = bind_model(g, state.model, false);
  const NodeId x = g.constant(b.x);
  const auto& mc = state.model.config;
  NodeId inst;
  if (state.flags.use_generator) {
    BoundParams gp(g, gen.params, false);
    inst = build_generator(g, gen.config, gp, x);
  } else {
    inst = g.constant(Tensor({b.labels.size(), mc.channels, mc.prompt_len}));
  }
  return g.forward(build_prompted_loss(g, state.model, bound, g.constant(state.common), inst, x,
                                       g.constant(one_hot(b.labels, mc.classes))))
      .item();
}

}  // namespace

void target_transfer(TrainedState& state, const std::vector<LabeledInstance>& shots, const RunConfig& config) {
  if (shots.empty()) throw InvalidArgument("target transfer needs at least one shot");
  if (state.generators.empty()) throw StateError("target transfer before prompt tuning");
  config.validate();
  Generator gen = init_generator(state.generators.front().config, stream_seed(config, Stream::GeneratorInit));
  const Batch all = make_batch(shots);
  const auto& mc = state.model.config;
  state.transfer_loss.clear();
  state.transfer_loss.push_back(shot_loss(state, gen, all));

  if (state.flags.use_generator) {
    Rng rng(stream_seed(config, Stream::Transfer));
    std::vector<std::size_t> order(shots.size());
    for (std::size_t pass = 0; pass < config.transfer_passes(); ++pass) {
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      for (std::size_t start = 0; start < order.size(); start += config.batch) {
        std::vector<LabeledInstance> chunk;
        for (std::size_t k = start; k < std::min(order.size(), start + config.batch); ++k) chunk.push_back(shots[order[k]]);
        const Batch b = make_batch(chunk);
        ng::Graph g;
        auto bound = bind_model(g, state.model, false);
        BoundParams gp(g, gen.params, true);
        const NodeId x = g.constant(b.x);
        const NodeId loss =
            build_prompted_loss(g, state.model, bound, g.constant(state.common), build_generator(g, gen.config, gp, x),
                                x, g.constant(one_hot(b.labels, mc.classes)));
        g.forward(loss);
        sgd_step(gen.params, gp, g.backward(loss), config.eta);
      }
      state.transfer_loss.push_back(shot_loss(state, gen, all));
    }
  }
  state.target_prompt = domain_prompt(state, gen, all.x);
  state.target_generator = std::move(gen);
}

// ---------------------------------------------------------------- selection and prediction

double cosine_similarity(const Prompt& a, const Prompt& b) {
  if (a.shape() != b.shape()) throw ShapeError("cosine similarity of differently shaped prompts");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  if (aa == 0.0 || bb == 0.0) return -1.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

Selection select_source(const TrainedState& state) {
  if (state.source_count() == 0) throw InvalidArgument("no source domains to select from");
  if (!state.target_prompt) throw StateError("source selection before target transfer");
  if (state.domain_prompts.size() != state.source_count()) throw StateError("source selection before prompt tuning");
  Selection s;
  for (const auto& p : state.domain_prompts) s.similarity.push_back(cosine_similarity(p, *state.target_prompt));
  s.source = std::size_t(std::max_element(s.similarity.begin(), s.similarity.end()) - s.similarity.begin());
  s.domain_id = state.source_ids[s.source];
  return s;
}

Selection select_random_source(const TrainedState& state, std::uint64_t seed) {
  Selection s = select_source(state);
  Rng rng(seed);
  s.source = rng.index(state.source_count());
  s.domain_id = state.source_ids[s.source];
  return s;
}

std::vector<Prediction> predict_target(const TrainedState& state, std::size_t source,
                                       const std::vector<LabeledInstance>& xs) {
  if (source >= state.source_count()) throw InvalidArgument("source index out of range");
  const auto& mc = state.model.config;
  std::vector<Prediction> out;
  for (std::size_t start = 0; start < xs.size(); start += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, xs.size() - start);
    const Batch b = make_batch(std::vector<LabeledInstance>(xs.begin() + long(start), xs.begin() + long(start + count)));
    if (b.x.dim(1) != mc.channels || b.x.dim(2) != mc.length)
      throw ShapeError("target series " + ng::to_string(b.x.shape()) + " do not match the model");
    ng::Graph g;
    auto bound = bind_model(g, state.model, false);
    const NodeId x = g.constant(b.x);
    NodeId prompt = g.constant(state.common);
    if (state.flags.use_generator) {
      BoundParams gp(g, state.generators[source].params, false);
      prompt = g.add(build_generator(g, state.generators[source].config, gp, x), prompt);
    }
    const Tensor& probs = g.forward(build_moe(g, state.model, bound, build_prepend(g, prompt, x)));
    for (std::size_t r = 0; r < count; ++r) {
      Prediction p;
      p.probabilities.assign(probs.data().begin() + long(r * mc.classes), probs.data().begin() + long((r + 1) * mc.classes));
      p.label = std::size_t(std::max_element(p.probabilities.begin(), p.probabilities.end()) - p.probabilities.begin());
      out.push_back(std::move(p));
    }
  }
  return out;
}

Prediction predict_target(const TrainedState& state, std::size_t source, const Series& x) {
  return predict_target(state, source, std::vector<LabeledInstance>{{x, 0}}).front();
}

// ---------------------------------------------------------------- state checkpoint

namespace {

void append_params(Archive& a, const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) a.tensors.push_back({prefix + p.name, p.value});
}

Generator extract_generator(const Archive& a, const std::string& prefix, const GeneratorConfig& c) {
  Generator gen = init_generator(c, 0);
  for (auto& p : gen.params) {
    const std::string name = prefix + p.name;
    if (!a.contains(name)) throw CompatibilityError("state checkpoint lacks " + name);
    const Tensor& t = a.at(name);
    if (t.shape() != p.value.shape()) throw CompatibilityError(name + " has shape " + ng::to_string(t.shape()));
    p.value = t;
  }
  return gen;
}

const Tensor& need(const Archive& a, const std::string& name) {
  if (!a.contains(name)) throw CompatibilityError("state checkpoint lacks " + name);
  return a.at(name);
}

}  // namespace

void save_state(const TrainedState& s, const std::filesystem::path& path) {
  Archive a;
  a.kind = "state";
  append_model(a, s.model);
  a.tensors.push_back({"common", s.common});
  Json history = Json::array();
  for (const auto& r : s.history)
    history.push_back({{"step", r.step}, {"domain", r.domain}, {"batch", r.batch}, {"losses", r.losses.to_json()}});
  Json buffers = Json::array();
  for (std::size_t i = 0; i < s.source_count(); ++i) {
    append_params(a, "gen" + std::to_string(i) + "/", s.generators[i].params);
    a.tensors.push_back({"buffer" + std::to_string(i), s.buffers[i].prompt});
    buffers.push_back({{"beta", s.buffers[i].beta}, {"updates", s.buffers[i].updates}});
  }
  for (std::size_t i = 0; i < s.domain_prompts.size(); ++i)
    a.tensors.push_back({"domain_prompt" + std::to_string(i), s.domain_prompts[i]});
  if (s.target_generator) append_params(a, "target_gen/", s.target_generator->params);
  if (s.target_prompt) a.tensors.push_back({"target_prompt", *s.target_prompt});
  const auto& gc = s.generators.empty() ? GeneratorConfig{} : s.generators.front().config;
  a.meta["source_ids"] = s.source_ids;
  a.meta["generator"] = {{"n", gc.channels}, {"L", gc.length}, {"m", gc.prompt_len}, {"hidden", gc.hidden}};
  a.meta["flags"] = {{"use_moe", s.flags.use_moe},
                     {"use_common_prompt", s.flags.use_common_prompt},
                     {"use_generator", s.flags.use_generator}};
  a.meta["buffers"] = buffers;
  a.meta["domain_prompts"] = s.domain_prompts.size();
  a.meta["has_target"] = s.target_generator.has_value();
  a.meta["history"] = history;
  a.meta["transfer_loss"] = s.transfer_loss;
  a.meta["shot_indices"] = s.shot_indices;
  a.meta["selected_source"] = s.selected_source ? Json(*s.selected_source) : Json(nullptr);
  save_archive(a, path);
}

TrainedState load_state(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  if (a.kind != "state") throw CompatibilityError(path.string() + " holds a '" + a.kind + "' archive, not a state");
  TrainedState s;
  try {
    s.model = extract_model(a);
    s.common = need(a, "common");
    s.source_ids = a.meta.at("source_ids").get<std::vector<std::string>>();
    const auto& gj = a.meta.at("generator");
    const GeneratorConfig gc{gj.at("n").get<std::size_t>(), gj.at("L").get<std::size_t>(),
                             gj.at("m").get<std::size_t>(), gj.at("hidden").get<std::size_t>()};
    const auto& fj = a.meta.at("flags");
    s.flags = {fj.at("use_moe").get<bool>(), fj.at("use_common_prompt").get<bool>(),
               fj.at("use_generator").get<bool>()};
    for (std::size_t i = 0; i < s.source_ids.size(); ++i) {
      s.generators.push_back(extract_generator(a, "gen" + std::to_string(i) + "/", gc));
      const auto& bj = a.meta.at("buffers").at(i);
      DomainPromptBuffer buf(gc.channels, gc.prompt_len, bj.at("beta").get<double>());
      buf.prompt = need(a, "buffer" + std::to_string(i));
      buf.updates = bj.at("updates").get<std::size_t>();
      s.buffers.push_back(std::move(buf));
    }
    const auto dp = a.meta.at("domain_prompts").get<std::size_t>();
    for (std::size_t i = 0; i < dp; ++i) s.domain_prompts.push_back(need(a, "domain_prompt" + std::to_string(i)));
    if (a.meta.at("has_target").get<bool>()) {
      s.target_generator = extract_generator(a, "target_gen/", gc);
      s.target_prompt = need(a, "target_prompt");
    }
    for (const auto& r : a.meta.at("history")) {
      StepRecord rec;
      rec.step = r.at("step").get<std::size_t>();
      rec.domain = r.at("domain").get<std::size_t>();
      rec.batch = r.at("batch").get<std::vector<std::size_t>>();
      const auto& l = r.at("losses");
      rec.losses.training = l.at("l_R").get<double>();
      rec.losses.fidelity = l.at("l_F").get<double>();
      rec.losses.discrimination = l.at("l_D").get<double>();
      rec.losses.total = l.at("G").get<double>();
      rec.losses.discrimination_fallback = l.at("l_D_fallback").get<bool>();
      s.history.push_back(std::move(rec));
    }
    s.transfer_loss = a.meta.at("transfer_loss").get<std::vector<double>>();
    s.shot_indices = a.meta.at("shot_indices").get<std::vector<std::size_t>>();
    if (const auto& sel = a.meta.at("selected_source"); !sel.is_null()) {
      s.selected_source = sel.get<std::size_t>();
      if (*s.selected_source >= s.source_count()) throw CompatibilityError("selected source out of range");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError(std::string("malformed state metadata: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------- pipeline

Selection adapt_to_target(TrainedState& state, const DomainDataset& target, const RunConfig& config) {
  config.validate();
  state.shot_indices = select_target_shots(target, config.target_shots, stream_seed(config, Stream::Shots));
  std::vector<LabeledInstance> shots;
  for (auto i : state.shot_indices) shots.push_back(target.instances[i]);
  target_transfer(state, shots, config);
  Selection s = config.selection == SourceSelection::Nearest
                    ? select_source(state)
                    : select_random_source(state, stream_seed(config, Stream::Selection));
  state.selected_source = s.source;
  return s;
}

std::vector<LabeledInstance> held_out(const TrainedState& state, const DomainDataset& target) {
  std::vector<bool> used(target.size(), false);
  for (auto i : state.shot_indices) {
    if (i >= target.size()) throw InvalidArgument("shot index out of range for target " + target.domain_id);
    used[i] = true;
  }
  std::vector<LabeledInstance> rest;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (!used[i]) rest.push_back(target.instances[i]);
  return rest;
}

PipelineOutcome run_pipeline(const std::vector<DomainDataset>& sources, const DomainDataset& target,
                             const RunConfig& config) {
  config.validate();
  if (sources.empty()) throw InvalidArgument("no source domains");
  const auto splits = split_sources(sources, config);

  PipelineOutcome out;
  const ModelConfig mc = model_config_for(config, sources.front());
  const MoEModel init = init_model(mc, stream_seed(config, Stream::ModelInit));
  const MoEModel model = pretrain(init, splits, config, &out.pretrain);

  out.state = init_state(model, splits, config);
  reptile_tune(out.state, splits, config);

  out.selection = adapt_to_target(out.state, target, config);
  const auto rest = held_out(out.state, target);
  if (rest.empty()) throw InvalidArgument("target domain has no instances left to evaluate");
  out.predictions = predict_target(out.state, out.selection.source, rest);
  for (const auto& r : rest) out.truths.push_back(r.label);
  return out;
}

// ---------------------------------------------------------------- flexibility

void FlexibilityConfig::validate() const {
  if (steps == 0) throw ConfigError("flexibility steps must be positive");
  if (!(rate > 0.0)) throw ConfigError("flexibility rate must be positive");
  if (prefix == 0 || prefix >= length) throw ConfigError("flexibility prefix must lie in [1, length)");
  if (prompt_len == 0) throw ConfigError("flexibility prompt_len must be positive");
}

Json FlexibilityConfig::to_json() const {
  return Json{{"seed", seed},         {"steps", steps},           {"rate", rate},
              {"conflicting", conflicting}, {"length", length}, {"prefix", prefix},
              {"prompt_len", prompt_len},   {"pretrain_epochs", pretrain_epochs}};
}

FlexibilityConfig FlexibilityConfig::from_json(const Json& j) {
  check_keys(j, {"seed", "steps", "rate", "conflicting", "length", "prefix", "prompt_len", "pretrain_epochs"},
             "flexdemo");
  FlexibilityConfig c;
  read_key(j, "seed", c.seed, "flexdemo");
  read_key(j, "steps", c.steps, "flexdemo");
  read_key(j, "rate", c.rate, "flexdemo");
  read_key(j, "conflicting", c.conflicting, "flexdemo");
  read_key(j, "length", c.length, "flexdemo");
  read_key(j, "prefix", c.prefix, "flexdemo");
  read_key(j, "prompt_len", c.prompt_len, "flexdemo");
  read_key(j, "pretrain_epochs", c.pretrain_epochs, "flexdemo");
  c.validate();
  return c;
}

Json FlexibilityReport::to_json() const {
  auto variant = [](const FlexibilityVariant& v) {
    return Json{{"best_correct", v.best_correct}, {"fit_step", v.fit_step ? Json(*v.fit_step) : Json(nullptr)}};
  };
  return Json{{"seed", seed},
              {"conflicting", conflicting},
              {"prompt_only", variant(prompt_only)},
              {"generator", variant(generator)}};
}

namespace {

std::size_t count_correct(const Tensor& probs, const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.dim(1); ++k)
      if (probs.at(r, k) > probs.at(r, best)) best = k;
    correct += best == labels[r];
  }
  return correct;
}

}  // namespace

FlexibilityReport flexibility_demo(const FlexibilityConfig& config) {
  config.validate();
  // The backbone is pretrained on an unrelated two-class sine task.
  SyntheticSpec spec;
  spec.sources = 2;
  spec.groups = 1;
  spec.classes = 2;
  spec.channels = 1;
  spec.length = config.length;
  spec.frequencies = {1.0, 3.0};
  spec.instances_per_domain = 20;
  spec.seed = Rng::derive(config.seed, 1);
  auto bundle = generate_synthetic(spec);

  RunConfig rc;
  rc.seed = config.seed;
  rc.epochs = config.pretrain_epochs;
  rc.prompt_len = config.prompt_len;
  rc.generator_hidden = 16;
  rc.model.d_model = 8;
  rc.model.heads = 2;
  rc.model.d_ff = 16;
  rc.model.encoder_blocks = 1;
  rc.model.router_hidden = 8;
  rc.model.patch = {4, 4};
  std::vector<DomainDataset> sources;
  for (std::size_t i = 0; i < bundle.sources.size(); ++i)
    sources.push_back(split(bundle.sources[i], rc.split, Rng::derive(config.seed, 10 + i)));
  const ModelConfig mc = model_config_for(rc, sources.front());
  const MoEModel model = pretrain(init_model(mc, stream_seed(rc, Stream::ModelInit)), sources, rc);

  // X1 = [prefix1, shared], X2 = [prefix2, shared].
  Rng rng(Rng::derive(config.seed, 2));
  Tensor xs({2, 1, config.length});
  for (std::size_t t = config.prefix; t < config.length; ++t) xs[t] = xs[config.length + t] = rng.normal();
  for (std::size_t t = 0; t < config.prefix; ++t) xs[t] = rng.normal(), xs[config.length + t] = rng.normal();
  const std::vector<std::size_t> labels{0, config.conflicting ? 1u : 0u};
  const Tensor y = one_hot(labels, mc.classes);

  FlexibilityReport report;
  report.seed = config.seed;
  report.conflicting = config.conflicting;

  auto track = [](FlexibilityVariant& v, std::size_t correct, std::size_t step) {
    v.best_correct = std::max(v.best_correct, correct);
    if (correct == 2 && !v.fit_step) v.fit_step = step;
  };

  // (a) one shared prompt for both instances.
  {
    Prompt P = zero_prompt(1, config.prompt_len);
    for (std::size_t step = 0; step <= config.steps && !report.prompt_only.fit_step; ++step) {
      ng::Graph g;
      auto bound = bind_model(g, model, false);
      const NodeId p = g.leaf(P, true);
      const NodeId x = g.constant(xs);
      const NodeId probs = build_moe(g, model, bound, build_prepend(g, p, x));
      const NodeId loss = g.cross_entropy(probs, g.constant(y));
      g.forward(loss);
      track(report.prompt_only, count_correct(g.value(probs), labels), step);
      if (report.prompt_only.fit_step || step == config.steps) break;
      const Tensor grad = g.backward(loss).at(p);
      for (std::size_t i = 0; i < P.size(); ++i) P[i] -= config.rate * grad[i];
    }
  }

  // (b) the shared prompt plus one generator per domain.
  {
    Prompt P = zero_prompt(1, config.prompt_len);
    const GeneratorConfig gc{1, config.length, config.prompt_len, rc.generator_hidden};
    std::vector<Generator> gens{init_generator(gc, stream_seed(rc, Stream::GeneratorInit)),
                                init_generator(gc, stream_seed(rc, Stream::GeneratorInit))};
    for (std::size_t step = 0; step <= config.steps; ++step) {
      ng::Graph g;
      auto bound = bind_model(g, model, false);
      const NodeId p = g.leaf(P, true);
      std::vector<BoundParams> gp;
      std::vector<NodeId> insts;
      for (std::size_t d = 0; d < 2; ++d) {
        gp.emplace_back(g, gens[d].params, true);
        const NodeId xd = g.constant(Tensor({1, 1, config.length},
                                            std::vector<double>(xs.data().begin() + long(d * config.length),
                                                                xs.data().begin() + long((d + 1) * config.length))));
        insts.push_back(build_generator(g, gc, gp[d], xd));
      }
      const NodeId prompt = g.add(g.concat(insts, 0), p);
      const NodeId probs = build_moe(g, model, bound, build_prepend(g, prompt, g.constant(xs)));
      const NodeId loss = g.cross_entropy(probs, g.constant(y));
      g.forward(loss);
      track(report.generator, count_correct(g.value(probs), labels), step);
      if (report.generator.fit_step || step == config.steps) break;
      const auto grads = g.backward(loss);
      for (std::size_t d = 0; d < 2; ++d) sgd_step(gens[d].params, gp[d], grads, config.rate);
      const Tensor& grad = grads.at(p);
      for (std::size_t i = 0; i < P.size(); ++i) P[i] -= config.rate * grad[i];
    }
  }
  return report;
}

}  // namespace pond
