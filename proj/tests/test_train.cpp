#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pond/checkpoint.hpp"
#include "pond/errors.hpp"
#include "pond/synthetic.hpp"
#include "pond/train.hpp"
#include "tiny.hpp"

using namespace pond;
using namespace pond::testing;
using ng::NodeId;
using ng::Tensor;

namespace {

std::vector<DomainDataset> split_all(const std::vector<DomainDataset>& sources, const RunConfig& c) {
  std::vector<DomainDataset> out;
  for (std::size_t i = 0; i < sources.size(); ++i)
    out.push_back(split(sources[i], c.split, Rng::derive(stream_seed(c, Stream::Split), i)));
  return out;
}

std::vector<std::uint8_t> model_bytes(const MoEModel& m) {
  Archive a;
  a.kind = "model";
  append_model(a, m);
  return encode_archive(a);
}

struct Fixture {
  RunConfig run;
  std::vector<DomainDataset> sources;
  DomainDataset target;
  MoEModel model;
};

Fixture make_fixture(std::uint64_t seed, RunConfig run) {
  Fixture f;
  f.run = run;
  auto bundle = generate_synthetic(tiny_spec(seed));
  f.sources = split_all(bundle.sources, run);
  f.target = bundle.target;
  f.model = init_model(model_config_for(run, f.sources.front()), stream_seed(run, Stream::ModelInit));
  return f;
}

std::vector<double> flat(const Tensor& t) { return t.data(); }

// Plain prompt tuning: gradient of CE(f([P, x])) with respect to P.
Tensor prompt_tuning_grad(const MoEModel& model, const Prompt& P, const Batch& b) {
  ng::Graph g;
  auto bound = bind_model(g, model, false);
  const NodeId p = g.leaf(P, true);
  const NodeId x = g.constant(b.x);
  const NodeId loss = g.cross_entropy(build_moe(g, model, bound, build_prepend(g, p, x)),
                                      g.constant(one_hot(b.labels, model.config.classes)));
  g.forward(loss);
  return g.backward(loss).at(p);
}

Tensor fd_grad_loss_R(const MoEModel& model, Prompt P, const Generator& gen, const Batch& b) {
  const double h = 1e-6;
  Tensor grad(P.shape());
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double v = P[i];
    P[i] = v + h;
    const double up = loss_R(model, P, gen, b.x, b.labels);
    P[i] = v - h;
    const double down = loss_R(model, P, gen, b.x, b.labels);
    P[i] = v;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

}  // namespace

TEST_CASE("run config json round trip and validation") {
  RunConfig c = tiny_run(7);
  c.transfer_epochs = 4;
  c.selection = SourceSelection::Random;
  c.fidelity_input = FidelityInput::CommonPlusDomain;
  c.common_gradient = CommonGradient::TrainingOnly;
  c.flags.use_moe = false;
  const Json j = c.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.transfer_passes() == 4);
  CHECK(RunConfig::from_json(Json::object()).to_json() == RunConfig{}.to_json());

  CHECK_THROWS_AS(RunConfig::from_json(Json{{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"model", {{"depth", 3}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"steps", "many"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"selection", "best"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"delta", 0.0}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"delta", 1.5}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"eta", 0.0}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"steps", 0}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"batch", 0}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(Json{{"lambda1", -1.0}}), ConfigError);
  CHECK_NOTHROW(RunConfig::from_json(Json{{"delta", 1.0}}));
}

TEST_CASE("pretraining") {
  SUBCASE("one epoch over sixteen instances with batch sixteen is one optimizer step") {
    SyntheticSpec s = tiny_spec(1);
    s.sources = 2;
    s.instances_per_domain = 16;
    auto bundle = generate_synthetic(s);
    std::vector<DomainDataset> sources{bundle.sources[0]};
    RunConfig c = tiny_run(1);
    c.epochs = 1;
    c.batch = 16;
    const MoEModel init = init_model(model_config_for(c, sources[0]), 3);
    PretrainReport report;
    pretrain(init, sources, c, &report);
    CHECK(report.optimizer_steps == 1);
    CHECK(report.epoch_loss.size() == 1);
    c.batch = 5;
    pretrain(init, sources, c, &report);
    CHECK(report.optimizer_steps == 4);
  }

  SUBCASE("same seed gives bit-identical models") {
    Fixture f = make_fixture(2, tiny_run(2));
    const auto a = pretrain(f.model, f.sources, f.run);
    const auto b = pretrain(f.model, f.sources, f.run);
    CHECK(model_bytes(a) == model_bytes(b));
    CHECK(model_bytes(a) != model_bytes(f.model));
  }

  SUBCASE("use_moe false trains a single expert") {
    RunConfig c = tiny_run(3);
    c.flags.use_moe = false;
    Fixture f = make_fixture(3, c);
    CHECK(pretrain(f.model, f.sources, c).experts.size() == 1);
  }

  SUBCASE("empty pool is rejected") {
    Fixture f = make_fixture(4, tiny_run(4));
    for (auto& d : f.sources)
      for (auto& s : d.splits) s = Split::Validation;
    CHECK_THROWS_AS(pretrain(f.model, f.sources, f.run), InvalidArgument);
  }
}

TEST_CASE("pretraining loss falls on the default synthetic spec") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec s;
    s.seed = seed;
    RunConfig c = tiny_run(seed);
    c.epochs = 50;
    c.batch = 16;
    c.model.patch = {16, 16};
    auto bundle = generate_synthetic(s);
    auto sources = split_all(bundle.sources, c);
    PretrainReport report;
    pretrain(init_model(model_config_for(c, sources[0]), stream_seed(c, Stream::ModelInit)), sources, c, &report);
    improved += report.final_loss < report.initial_loss;
  }
  CHECK(improved == 10);
}

TEST_CASE("prompt tuning") {
  Fixture f = make_fixture(5, tiny_run(5));

  SUBCASE("state initialisation") {
    TrainedState s = init_state(f.model, f.sources, f.run);
    REQUIRE(s.generators.size() == f.sources.size());
    CHECK(s.buffers.size() == f.sources.size());
    CHECK(s.source_ids == std::vector<std::string>{"S0", "S1", "S2", "S3"});
    for (const auto& gen : s.generators) CHECK(gen.params == s.generators[0].params);
    CHECK(flat(s.common) == std::vector<double>(s.common.size(), 0.0));
  }

  SUBCASE("backbone stays frozen") {
    TrainedState s = init_state(f.model, f.sources, f.run);
    reptile_tune(s, f.sources, f.run);
    CHECK(model_bytes(s.model) == model_bytes(f.model));
    target_transfer(s, take_target_shots(f.target, 6, 1), f.run);
    CHECK(model_bytes(s.model) == model_bytes(f.model));
    CHECK(s.history.size() == f.run.steps);
    CHECK(s.domain_prompts.size() == f.sources.size());
  }

  SUBCASE("exact domain prompts are recomputed from the final generators") {
    TrainedState s = init_state(f.model, f.sources, f.run);
    reptile_tune(s, f.sources, f.run);
    for (std::size_t i = 0; i < f.sources.size(); ++i) {
      const Batch b = make_batch(f.sources[i], f.sources[i].indices_of(Split::Tune));
      CHECK(flat(s.domain_prompts[i]) == flat(aggregate_domain_prompt(generate_instance_prompt(s.generators[i], b.x))));
    }
  }

  SUBCASE("common prompt step follows delta times eta times the gradient") {
    for (double delta : {1.0, 0.01, 0.3}) {
      CAPTURE(delta);
      RunConfig c = f.run;
      c.steps = 1;
      c.delta = delta;
      TrainedState before = init_state(f.model, f.sources, c);
      before.common = Tensor(before.common.shape(), {0.1, -0.2, 0.05, 0.3, 0.0, -0.1});
      TrainedState after = before;
      reptile_tune(after, f.sources, c);
      const auto& rec = after.history.at(0);
      const Batch b = make_batch(f.sources[rec.domain], rec.batch);
      const Tensor grad = fd_grad_loss_R(f.model, before.common, before.generators[rec.domain], b);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double moved = after.common[i] - before.common[i];
        CHECK(std::abs(moved + delta * c.eta * grad[i]) <= 1e-7 * delta * c.eta * (1.0 + std::abs(grad[i])));
      }
    }
  }

  SUBCASE("default rates move the prompt by 1e-5 times the gradient") {
    RunConfig c = f.run;
    c.steps = 1;
    c.delta = 0.01;
    c.eta = 0.001;
    TrainedState s = init_state(f.model, f.sources, c);
    const TrainedState before = s;
    reptile_tune(s, f.sources, c);
    const auto& rec = s.history.at(0);
    const Tensor grad =
        fd_grad_loss_R(f.model, before.common, before.generators[rec.domain], make_batch(f.sources[rec.domain], rec.batch));
    for (std::size_t i = 0; i < grad.size(); ++i)
      CHECK(std::abs(s.common[i] - (-1e-5 * grad[i])) <= 1e-11 * (1.0 + std::abs(grad[i])));
  }

  SUBCASE("zero gradient leaves the common prompt unchanged") {
    RunConfig c = f.run;
    c.flags.use_moe = false;
    MoEModel model = init_model(model_config_for(c, f.sources[0]), 9);
    for (auto& v : find_param(model.experts[0], "head.w").values()) v = 0.0;
    for (double delta : {0.01, 0.5, 1.0}) {
      c.delta = delta;
      TrainedState s = init_state(model, f.sources, c);
      s.common = Tensor(s.common.shape(), {0.4, -0.3, 0.2, 0.1, 0.7, -0.9});
      const auto start = flat(s.common);
      reptile_tune(s, f.sources, c);
      CHECK(flat(s.common) == start);
    }
  }

  SUBCASE("without generators and auxiliary losses it reduces to prompt tuning") {
    RunConfig c = f.run;
    c.weights = {0.0, 0.0};
    c.flags.use_generator = false;
    c.steps = 20;
    c.delta = 0.5;
    c.eta = 0.2;
    TrainedState s = init_state(f.model, f.sources, c);
    reptile_tune(s, f.sources, c);
    Prompt P = zero_prompt(2, 3);
    for (const auto& rec : s.history) {
      const Tensor grad = prompt_tuning_grad(f.model, P, make_batch(f.sources[rec.domain], rec.batch));
      for (std::size_t i = 0; i < P.size(); ++i) P[i] -= c.delta * c.eta * grad[i];
    }
    double moved = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
      CHECK(std::abs(s.common[i] - P[i]) <= 1e-12);
      moved += std::abs(P[i]);
    }
    CHECK(moved > 1e-3);
    for (const auto& d : s.domain_prompts) CHECK(flat(d) == std::vector<double>(d.size(), 0.0));
  }

  SUBCASE("training-only gradient switch ignores the other losses for the common prompt") {
    RunConfig c = f.run;
    c.common_gradient = CommonGradient::TrainingOnly;
    c.fidelity_input = FidelityInput::CommonPlusDomain;
    c.steps = 1;
    c.delta = 1.0;
    TrainedState s = init_state(f.model, f.sources, c);
    const TrainedState before = s;
    reptile_tune(s, f.sources, c);
    const auto& rec = s.history.at(0);
    const Tensor grad =
        fd_grad_loss_R(f.model, before.common, before.generators[rec.domain], make_batch(f.sources[rec.domain], rec.batch));
    for (std::size_t i = 0; i < grad.size(); ++i)
      CHECK(std::abs(s.common[i] + c.eta * grad[i]) <= 1e-7 * c.eta * (1.0 + std::abs(grad[i])));
  }

  SUBCASE("history records the composed objective") {
    TrainedState s = init_state(f.model, f.sources, f.run);
    reptile_tune(s, f.sources, f.run);
    for (const auto& r : s.history) {
      CHECK(r.losses.total == r.losses.training + r.losses.discrimination + r.losses.fidelity);
      CHECK_FALSE(r.losses.discrimination_fallback);
      CHECK(r.batch.size() <= f.run.batch);
    }
  }

  SUBCASE("buffers track each visited domain") {
    TrainedState s = init_state(f.model, f.sources, f.run);
    reptile_tune(s, f.sources, f.run);
    std::vector<std::size_t> visits(f.sources.size(), 1);
    for (const auto& r : s.history) ++visits[r.domain];
    for (std::size_t i = 0; i < visits.size(); ++i) CHECK(s.buffers[i].updates == visits[i]);
  }

  SUBCASE("no tunable domain is an error") {
    auto sources = f.sources;
    for (auto& d : sources)
      for (auto& t : d.splits)
        if (t == Split::Tune) t = Split::Validation;
    TrainedState s = init_state(f.model, sources, f.run);
    CHECK_THROWS_AS(reptile_tune(s, sources, f.run), InvalidArgument);
  }
}

TEST_CASE("target transfer") {
  Fixture f = make_fixture(6, tiny_run(6));
  TrainedState tuned = init_state(f.model, f.sources, f.run);
  reptile_tune(tuned, f.sources, f.run);
  const auto shots = take_target_shots(f.target, 6, 2);
  const Generator init = init_generator(tuned.generators[0].config, stream_seed(f.run, Stream::GeneratorInit));

  SUBCASE("zero passes keep the initial generator") {
    RunConfig c = f.run;
    c.transfer_epochs = 0;
    TrainedState s = tuned;
    target_transfer(s, shots, c);
    REQUIRE(s.target_generator);
    CHECK(s.target_generator->params == init.params);
    CHECK(s.transfer_loss.size() == 1);
    CHECK(flat(*s.target_prompt) == flat(aggregate_domain_prompt(generate_instance_prompt(init, make_batch(shots).x))));
  }

  SUBCASE("a pass over fewer shots than the batch is one full-batch step") {
    RunConfig c = f.run;
    c.transfer_epochs = 1;
    c.batch = 16;
    c.eta = 0.05;
    TrainedState s = tuned;
    target_transfer(s, shots, c);

    Generator expected = init;
    const Batch b = make_batch(shots);
    ng::Graph g;
    auto bound = bind_model(g, f.model, false);
    BoundParams gp(g, expected.params, true);
    const NodeId x = g.constant(b.x);
    const NodeId loss = build_prompted_loss(g, f.model, bound, g.constant(s.common),
                                            build_generator(g, expected.config, gp, x), x,
                                            g.constant(one_hot(b.labels, 2)));
    g.forward(loss);
    sgd_step(expected.params, gp, g.backward(loss), c.eta);
    for (std::size_t k = 0; k < expected.params.size(); ++k)
      for (std::size_t i = 0; i < expected.params[k].value.size(); ++i)
        CHECK(std::abs(s.target_generator->params[k].value[i] - expected.params[k].value[i]) <= 1e-12);
    CHECK(s.transfer_loss.size() == 2);
  }

  SUBCASE("generator count grows by one") {
    TrainedState s = tuned;
    target_transfer(s, shots, f.run);
    CHECK(s.generators.size() == f.sources.size());
    CHECK(s.target_generator.has_value());
    CHECK(s.target_prompt.has_value());
  }

  SUBCASE("errors") {
    TrainedState s = tuned;
    CHECK_THROWS_AS(target_transfer(s, {}, f.run), InvalidArgument);
    TrainedState empty;
    CHECK_THROWS_AS(target_transfer(empty, shots, f.run), StateError);
  }
}

TEST_CASE("shot loss does not increase on the default synthetic spec") {
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    RunConfig c = tiny_run(seed);
    c.epochs = 5;
    c.target_shots = 10;
    c.model.patch = {16, 16};
    auto bundle = generate_synthetic(spec);
    const auto out = run_pipeline(bundle.sources, bundle.target, c);
    const auto& tl = out.state.transfer_loss;
    REQUIRE(tl.size() == 6);
    ok += tl.back() <= tl.front();
  }
  CHECK(ok == 10);
}

TEST_CASE("source selection") {
  TrainedState s;
  s.source_ids = {"A", "B", "C"};
  s.domain_prompts = {Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.6, 0.8}), Tensor({1, 2}, {0.0, 1.0})};

  CHECK_THROWS_AS(select_source(s), StateError);

  SUBCASE("identical prompt wins") {
    s.target_prompt = Tensor({1, 2}, {0.6, 0.8});
    const auto sel = select_source(s);
    CHECK(sel.source == 1);
    CHECK(sel.domain_id == "B");
    CHECK(sel.similarity[1] == doctest::Approx(1.0));
    CHECK(sel.similarity[0] == doctest::Approx(0.6));
  }

  SUBCASE("positive scaling leaves the choice unchanged") {
    s.target_prompt = Tensor({1, 2}, {0.2, 0.9});
    const auto base = select_source(s).source;
    for (double c : {1e-3, 0.5, 7.0, 1e4}) {
      TrainedState t = s;
      for (auto& p : t.domain_prompts)
        for (auto& v : p.values()) v *= c;
      for (auto& v : t.target_prompt->values()) v *= c;
      CHECK(select_source(t).source == base);
    }
  }

  SUBCASE("zero-norm prompts count as -1 and ties go to the lowest index") {
    s.domain_prompts[1] = Tensor({1, 2});
    s.target_prompt = Tensor({1, 2}, {0.0, -1.0});
    auto sel = select_source(s);
    CHECK(sel.similarity[1] == -1.0);
    CHECK(sel.similarity[2] == -1.0);
    CHECK(sel.source == 0);
    s.target_prompt = Tensor({1, 2});
    sel = select_source(s);
    CHECK(sel.source == 0);
    CHECK(sel.similarity == std::vector<double>{-1.0, -1.0, -1.0});
  }

  SUBCASE("random selection is seeded") {
    s.target_prompt = Tensor({1, 2}, {0.6, 0.8});
    CHECK(select_random_source(s, 4).source == select_random_source(s, 4).source);
    CHECK(select_random_source(s, 4).source < 3);
  }

  SUBCASE("no sources") {
    TrainedState empty;
    empty.target_prompt = Tensor({1, 2});
    CHECK_THROWS_AS(select_source(empty), InvalidArgument);
  }
}

TEST_CASE("prediction and checkpoints") {
  Fixture f = make_fixture(7, tiny_run(7));
  auto bundle = generate_synthetic(tiny_spec(7));
  PipelineOutcome out = run_pipeline(bundle.sources, bundle.target, f.run);
  const auto& s = out.state;
  REQUIRE(out.predictions.size() == f.target.size() - 6);
  REQUIRE(out.truths.size() == out.predictions.size());

  SUBCASE("probabilities form a distribution and argmax is the label") {
    for (const auto& p : out.predictions) {
      double sum = 0.0;
      for (double v : p.probabilities) sum += v;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
      CHECK(p.probabilities[p.label] >= p.probabilities[1 - p.label]);
    }
  }

  SUBCASE("deterministic") {
    const auto again = predict_target(s, out.selection.source, f.target.instances);
    const auto twice = predict_target(s, out.selection.source, f.target.instances);
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].probabilities == twice[i].probabilities);
    const auto one = predict_target(s, out.selection.source, f.target.instances[3].series);
    CHECK(one.label == again[3].label);
    for (std::size_t k = 0; k < 2; ++k) CHECK(one.probabilities[k] == doctest::Approx(again[3].probabilities[k]).epsilon(1e-14));
  }

  SUBCASE("pipeline runs are reproducible") {
    const auto rerun = run_pipeline(bundle.sources, bundle.target, f.run);
    CHECK(rerun.selection.source == out.selection.source);
    for (std::size_t i = 0; i < out.predictions.size(); ++i)
      CHECK(rerun.predictions[i].probabilities == out.predictions[i].probabilities);
  }

  SUBCASE("without generators prediction is f([P, x])") {
    TrainedState t = s;
    t.flags.use_generator = false;
    const auto& x = f.target.instances[0].series;
    const Tensor input = prepend(t.common, zero_prompt(2, 3), Tensor({2, 16}, x.values));
    const Tensor probs = moe_forward(t.model, Tensor({1, 2, 19}, input.data()));
    const auto p = predict_target(t, 1, x);
    for (std::size_t k = 0; k < 2; ++k) CHECK(p.probabilities[k] == doctest::Approx(probs[k]).epsilon(1e-14));
  }

  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(predict_target(s, 0, Series(2, 15)), ShapeError);
    CHECK_THROWS_AS(predict_target(s, 9, f.target.instances[0].series), InvalidArgument);
  }

  SUBCASE("state checkpoint round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "pond_test_train";
    std::filesystem::create_directories(dir);
    save_state(s, dir / "a.pond");
    const TrainedState back = load_state(dir / "a.pond");
    save_state(back, dir / "b.pond");
    auto bytes = [](const std::filesystem::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::vector<char>(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(bytes(dir / "a.pond") == bytes(dir / "b.pond"));
    CHECK(back.source_ids == s.source_ids);
    CHECK(back.history.size() == s.history.size());
    CHECK(back.flags == s.flags);
    const auto p1 = predict_target(back, out.selection.source, f.target.instances);
    for (std::size_t i = 0; i < p1.size(); ++i)
      CHECK(p1[i].probabilities == predict_target(s, out.selection.source, f.target.instances)[i].probabilities);
    CHECK(select_source(back).source == out.selection.source);

    save_model(s.model, dir / "m.pond");
    CHECK_THROWS_AS(load_state(dir / "m.pond"), CompatibilityError);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("flexibility demo") {
  SUBCASE("non-conflicting control fits with both variants") {
    FlexibilityConfig c;
    c.conflicting = false;
    const auto r = flexibility_demo(c);
    CHECK(r.prompt_only.best_correct == 2);
    CHECK(r.generator.best_correct == 2);
    CHECK(r.generator.fit_step.has_value());
  }

  SUBCASE("report json") {
    FlexibilityConfig c;
    c.seed = 3;
    c.steps = 5;
    const auto r = flexibility_demo(c);
    const Json j = r.to_json();
    CHECK(j.at("seed") == 3);
    CHECK(j.at("conflicting") == true);
    CHECK(j.at("prompt_only").contains("best_correct"));
    CHECK(r.prompt_only.best_correct <= 2);
    CHECK(FlexibilityConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK_THROWS_AS(FlexibilityConfig::from_json(Json{{"prefix", 40}}), ConfigError);
    CHECK_THROWS_AS(FlexibilityConfig::from_json(Json{{"stepz", 4}}), ConfigError);
  }
}
