#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pond/checkpoint.hpp"
#include "pond/dataset_io.hpp"
#include "pond/diagnostics.hpp"
#include "pond/errors.hpp"
#include "pond/eval.hpp"
#include "pond/objective.hpp"
#include "pond/synthetic.hpp"
#include "pond/train.hpp"

using namespace pond;
using ng::NodeId;
using ng::Tensor;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::uint64_t> seeds(std::uint64_t n) {
  std::vector<std::uint64_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

RunConfig desk_run() {
  RunConfig c;
  c.epochs = 20;
  c.generator_hidden = 32;
  c.model.d_ff = 32;
  c.model.patch = {8, 8};
  return c;
}

SyntheticSpec benchmark(std::size_t sources) {
  SyntheticSpec s;
  s.sources = sources;
  s.length = 64;
  s.noise_sigma = 1.0;
  return s;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = gradcheck_suite(0, 1e-5, 1e-4);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < 60.0;
  double worst = 0.0;
  std::string failed;
  for (const auto& e : entries) {
    worst = std::max(worst, e.report.max_rel_error);
    if (!e.report.passed) ok = false, failed += " " + e.name;
  }
  return {ok, fmt("%zu checks, worst rel err %.2e, %.1f s%s", entries.size(), worst, secs,
                  failed.empty() ? "" : (" failed:" + failed).c_str())};
}

Outcome loss_oracles() {
  const Prompt p({2, 2}, {0.3, -1.2, 2.5, 0.7});
  const double equal = loss_D({p, p, p}).value;
  const double orth = loss_D({Prompt({1, 3}, {1, 0, 0}), Prompt({1, 3}, {0, 1, 0}), Prompt({1, 3}, {0, 0, 1})}).value;
  double worst = 0.0;
  auto ce = [&](const Tensor& probs, std::vector<std::size_t> y, double expected) {
    worst = std::max(worst, std::abs(cross_entropy(probs, y) - expected));
  };
  ce(Tensor({2, 2}, {1, 0, 0, 1}), {0, 1}, 0.0);
  ce(Tensor::filled({1, 6}, 1.0 / 6.0), {0}, std::log(6.0));
  ce(Tensor({2, 4}, {0.5, 0.5, 0, 0, 0.25, 0.25, 0.25, 0.25}), {0, 3}, 1.5 * std::log(2.0));
  ce(Tensor({1, 2}, {0.2, 0.8}), {1}, -std::log(0.8));
  ce(Tensor({1, 3}, {0.5, 0.25, 0.25}), {2}, 2.0 * std::log(2.0));
  return {equal == 0.0 && orth == 0.0 && worst <= 1e-12,
          fmt("equal %.3g, orthogonal %.3g, worst CE error %.2e", equal, orth, worst)};
}

Outcome reduction() {
  SyntheticSpec spec;
  spec.sources = 4;
  spec.classes = 2;
  spec.length = 16;
  spec.frequencies = {1.0, 3.0};
  spec.instances_per_domain = 20;
  spec.noise_sigma = 0.3;
  RunConfig c;
  c.epochs = 3;
  c.batch = 8;
  c.prompt_len = 3;
  c.generator_hidden = 8;
  c.model = {};
  c.model.experts = 2;
  c.model.d_model = 8;
  c.model.heads = 2;
  c.model.d_ff = 8;
  c.model.encoder_blocks = 1;
  c.model.router_hidden = 4;
  c.model.patch = {4, 4};
  c.weights = {0.0, 0.0};
  c.flags.use_generator = false;
  c.steps = 20;
  c.delta = 0.5;
  c.eta = 0.2;

  const auto sources = split_sources(generate_synthetic(spec).sources, c);
  const MoEModel model = init_model(model_config_for(c, sources[0]), 3);
  TrainedState s = init_state(model, sources, c);
  reptile_tune(s, sources, c);

  Prompt P = zero_prompt(spec.channels, c.prompt_len);
  for (const auto& rec : s.history) {
    const Batch b = make_batch(sources[rec.domain], rec.batch);
    ng::Graph g;
    auto bound = bind_model(g, model, false);
    const NodeId p = g.leaf(P, true);
    const NodeId loss = g.cross_entropy(build_moe(g, model, bound, build_prepend(g, p, g.constant(b.x))),
                                        g.constant(one_hot(b.labels, model.config.classes)));
    g.forward(loss);
    const Tensor grad = g.backward(loss).at(p);
    for (std::size_t i = 0; i < P.size(); ++i) P[i] -= c.delta * c.eta * grad[i];
  }
  double worst = 0.0, moved = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    worst = std::max(worst, std::abs(s.common[i] - P[i]));
    moved += std::abs(P[i]);
  }
  return {s.history.size() == 20 && worst <= 1e-12 && moved > 1e-3,
          fmt("%zu steps, max deviation %.2e, prompt moved %.3g", s.history.size(), worst, moved)};
}

Outcome selection_correctness() {
  const SyntheticSpec spec;
  const auto resolved = spec.resolved();
  std::size_t same = 0;
  const std::size_t runs = 20;
  for (auto seed : seeds(runs)) {
    SyntheticSpec s = spec;
    s.seed = seed;
    RunConfig c = desk_run();
    c.seed = seed;
    const auto bundle = generate_synthetic(s);
    const auto out = run_pipeline(bundle.sources, bundle.target, c);
    same += resolved.group_of(out.selection.source) == resolved.target_group;
  }
  return {same * 5 >= runs * 4, fmt("same-group source in %zu/%zu runs", same, runs)};
}

Outcome ablation_ordering(const AblationTable& t) {
  const double full = t.rows.back().macro_f1.mean;
  bool ok = true;
  std::string detail = fmt("full %.3f;", full);
  for (std::size_t i = 0; i + 1 < t.rows.size(); ++i) {
    const double m = t.rows[i].macro_f1.mean;
    ok = ok && full >= m - 0.02;
    detail += fmt(" %s %.3f", ablation_label(t.rows[i].flags).c_str(), m);
  }
  return {ok, detail};
}

Outcome adaptation_benefit(const AblationTable& t, const std::vector<std::uint64_t>& ss) {
  RunConfig c = desk_run();
  c.flags.use_generator = false;
  c.selection = SourceSelection::Random;
  const auto scenarios = synthetic_scenarios(benchmark(6));
  std::vector<double> f1;
  for (auto seed : ss) {
    const auto sc = scenarios(seed);
    c.seed = seed;
    f1.push_back(evaluate(run_pipeline(sc.sources, sc.target, c), sc.target.classes).macro_f1);
  }
  const double full = t.rows.back().macro_f1.mean, base = mean_of(f1);
  return {full - base >= 0.05, fmt("full %.3f vs P-only/random %.3f, margin %.3f (need 0.05)", full, base, full - base)};
}

Outcome source_trend() {
  const std::vector<std::size_t> counts{2, 4, 6, 8};
  const auto t = source_count_sweep(desk_run(), synthetic_scenarios(benchmark(8)), counts, seeds(10));
  std::string detail = fmt("spearman %.3f;", t.spearman);
  for (const auto& r : t.rows) detail += fmt(" M=%zu %.3f", r.sources, r.macro_f1.mean);
  return {t.spearman > 0.0, detail};
}

double mean_offdiag_cosine(const TrainedState& s) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t a = 0; a < s.domain_prompts.size(); ++a)
    for (std::size_t b = 0; b < s.domain_prompts.size(); ++b)
      if (a != b) sum += cosine_similarity(s.domain_prompts[a], s.domain_prompts[b]), ++n;
  return sum / double(n);
}

Outcome discrimination_effect() {
  const auto scenarios = synthetic_scenarios(benchmark(6));
  std::size_t lower = 0;
  std::vector<double> with, without;
  for (auto seed : seeds(10)) {
    const auto sc = scenarios(seed);
    RunConfig c = desk_run();
    c.seed = seed;
    with.push_back(mean_offdiag_cosine(run_pipeline(sc.sources, sc.target, c).state));
    c.weights.discrimination = 0.0;
    without.push_back(mean_offdiag_cosine(run_pipeline(sc.sources, sc.target, c).state));
    lower += with.back() < without.back();
  }
  return {lower >= 8, fmt("lower in %zu/10 pairs; mean cosine %.3f with vs %.3f without", lower, mean_of(with),
                          mean_of(without))};
}

Outcome flexibility() {
  std::size_t fits = 0;
  std::string prompt_best;
  for (auto seed : seeds(10)) {
    FlexibilityConfig f;
    f.seed = seed;
    const auto r = flexibility_demo(f);
    fits += r.generator.fit_step.has_value() && *r.generator.fit_step <= f.steps;
    prompt_best += fmt(" %zu", r.prompt_only.best_correct);
  }
  return {fits >= 9, fmt("generator fits %zu/10; prompt-only best correct per seed:%s", fits, prompt_best.c_str())};
}

template <class E, class F>
bool throws(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome determinism() {
  SyntheticSpec spec;
  spec.sources = 3;
  spec.length = 32;
  spec.instances_per_domain = 24;
  spec.seed = 5;
  RunConfig c = desk_run();
  c.epochs = 3;
  c.steps = 10;
  c.seed = 5;
  const auto bundle = generate_synthetic(spec);
  const auto once = evaluate(run_pipeline(bundle.sources, bundle.target, c), 3, "determinism", 5).to_json().dump();
  const auto twice = evaluate(run_pipeline(bundle.sources, bundle.target, c), 3, "determinism", 5).to_json().dump();
  std::vector<std::string> problems;
  if (once != twice) problems.push_back("metrics JSON differs");

  const auto ds = split_sources(bundle.sources, c)[0];
  const auto ds_bytes = encode_dataset(ds);
  if (!(decode_dataset(ds_bytes) == ds) || encode_dataset(decode_dataset(ds_bytes)) != ds_bytes)
    problems.push_back("dataset round trip");
  const auto model = init_model(model_config_for(c, ds), 1);
  Archive a;
  a.kind = "model";
  append_model(a, model);
  const auto ck = encode_archive(a);
  if (encode_archive(decode_archive(ck)) != ck) problems.push_back("checkpoint round trip");

  auto flipped = ds_bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  if (!throws<ChecksumError>([&] { decode_dataset(flipped); })) problems.push_back("dataset checksum");
  auto magic = ck;
  magic[1] = 'X';
  if (!throws<BadMagicError>([&] { decode_archive(magic); })) problems.push_back("checkpoint magic");
  auto cut = ck;
  cut.resize(cut.size() - 7);
  if (!throws<TruncatedError>([&] { decode_archive(cut); })) problems.push_back("checkpoint truncation");
  auto ckflip = ck;
  ckflip[ckflip.size() - 30] ^= 0x01;
  if (!throws<ChecksumError>([&] { decode_archive(ckflip); })) problems.push_back("checkpoint checksum");

  std::string detail = problems.empty() ? "metrics identical, round trips exact, corruption rejected" : "failed:";
  for (const auto& p : problems) detail += " " + p + ";";
  return {problems.empty(), detail};
}

double entropy_bits(const std::map<int, double>& counts, double n) {
  double h = 0.0;
  for (const auto& [k, c] : counts) h -= (c / n) * std::log2(c / n);
  return h;
}

Outcome mi_oracle() {
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t ax = 2 + rng.index(3), ay = 2 + rng.index(3), n = 20 + rng.index(80);
    std::vector<int> x, y;
    std::map<int, double> py;
    std::map<int, std::map<int, double>> joint;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(int(rng.index(ax)));
      y.push_back(int(rng.index(ay)));
      py[y.back()] += 1;
      joint[x.back()][y.back()] += 1;
    }
    double h_y_given_x = 0.0;
    for (const auto& [xv, row] : joint) {
      double nx = 0.0;
      for (const auto& [yv, c] : row) nx += c;
      h_y_given_x += nx / double(n) * entropy_bits(row, nx);
    }
    worst = std::max(worst, std::abs(brute_force_mi(x, y) - (entropy_bits(py, double(n)) - h_y_given_x)));
  }
  double product = 0.0;
  for (int ax : {2, 3})
    for (int ay : {2, 4}) {
      std::vector<int> x, y;
      for (int a = 0; a < ax; ++a)
        for (int b = 0; b < ay; ++b)
          for (int r = 0; r < 3; ++r) x.push_back(a), y.push_back(b);
      product = std::max(product, std::abs(brute_force_mi(x, y)));
    }
  return {worst <= 1e-12 && product <= 1e-12, fmt("max deviation %.2e over 50 joints, product joints %.2e", worst, product)};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.passed;
    std::printf("%s  %2d %-28s %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "gradient fidelity", gradient_fidelity);
  report(2, "loss-formula oracles", loss_oracles);
  report(3, "reduction to prompt tuning", reduction);
  report(4, "source selection", selection_correctness);

  AblationTable table;
  const auto ablation_seeds = seeds(10);
  std::string ablation_error;
  try {
    table = ablation_grid(desk_run(), synthetic_scenarios(benchmark(6)), ablation_seeds);
  } catch (const std::exception& e) {
    ablation_error = e.what();
  }
  auto needs_table = [&](auto f) {
    return [&, f]() -> Outcome {
      if (!ablation_error.empty()) return {false, "ablation grid failed: " + ablation_error};
      return f();
    };
  };
  report(5, "ablation ordering", needs_table([&] { return ablation_ordering(table); }));
  report(6, "adaptation benefit", needs_table([&] { return adaptation_benefit(table, ablation_seeds); }));
  report(7, "source-count trend", source_trend);
  report(8, "discrimination effect", discrimination_effect);
  report(9, "flexibility", flexibility);
  report(10, "determinism and formats", determinism);
  report(11, "mutual information oracle", mi_oracle);

  std::printf("%d of 11 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
