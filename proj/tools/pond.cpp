#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>

#include "CLI11.hpp"
#include "pond/checkpoint.hpp"
#include "pond/dataset_io.hpp"
#include "pond/diagnostics.hpp"
#include "pond/errors.hpp"
#include "pond/eval.hpp"
#include "pond/json_util.hpp"
#include "pond/synthetic.hpp"
#include "pond/train.hpp"

namespace fs = std::filesystem;
using namespace pond;

namespace {

struct CliConfig {
  SyntheticSpec synthetic;
  RunConfig run;
  std::string scenario = "synthetic";
  std::vector<std::uint64_t> ablate_seeds;
  std::vector<std::size_t> sweep_counts{2, 4, 6};
  std::vector<std::uint64_t> sweep_seeds;
  FlexibilityConfig flex;
  std::vector<std::uint64_t> flex_seeds;
  std::uint64_t gradcheck_seed = 0;
  double gradcheck_step = 1e-5;
  double gradcheck_tol = 1e-4;
  Json paths = Json::object();
};

std::vector<std::uint64_t> seed_range(std::uint64_t n) {
  std::vector<std::uint64_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path sidecar(const fs::path& p, const char* ext) {
  fs::path s = p;
  s += ext;
  return s;
}

CliConfig load_config(const std::string& path) {
  CliConfig c;
  c.ablate_seeds = seed_range(10);
  c.sweep_seeds = seed_range(10);
  c.flex_seeds = seed_range(10);
  if (!path.empty()) {
    Json j;
    try {
      j = Json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path + " is not valid JSON: " + e.what());
    }
    check_keys(j, {"synthetic", "run", "scenario", "paths", "ablate", "sweep", "flexdemo", "gradcheck"}, "config");
    if (j.contains("synthetic")) c.synthetic = SyntheticSpec::from_json(j["synthetic"]);
    if (j.contains("run")) c.run = RunConfig::from_json(j["run"]);
    read_key(j, "scenario", c.scenario, "config");
    if (j.contains("paths")) {
      check_keys(j["paths"], {"data", "out", "checkpoint", "state", "target"}, "config.paths");
      for (const auto& [k, v] : j["paths"].items())
        if (!v.is_string()) throw ConfigError("config.paths." + k + " must be a string");
      c.paths = j["paths"];
    }
    if (j.contains("ablate")) {
      check_keys(j["ablate"], {"seeds"}, "config.ablate");
      read_key(j["ablate"], "seeds", c.ablate_seeds, "config.ablate");
    }
    if (j.contains("sweep")) {
      check_keys(j["sweep"], {"counts", "seeds"}, "config.sweep");
      read_key(j["sweep"], "counts", c.sweep_counts, "config.sweep");
      read_key(j["sweep"], "seeds", c.sweep_seeds, "config.sweep");
    }
    if (j.contains("flexdemo")) {
      Json f = j["flexdemo"];
      if (f.is_object() && f.contains("seeds")) {
        read_key(f, "seeds", c.flex_seeds, "config.flexdemo");
        f.erase("seeds");
      }
      if (f.is_object() && f.contains("seed")) throw ConfigError("config.flexdemo takes a 'seeds' list, not 'seed'");
      c.flex = FlexibilityConfig::from_json(f);
    }
    if (j.contains("gradcheck")) {
      check_keys(j["gradcheck"], {"seed", "step", "tolerance"}, "config.gradcheck");
      read_key(j["gradcheck"], "seed", c.gradcheck_seed, "config.gradcheck");
      read_key(j["gradcheck"], "step", c.gradcheck_step, "config.gradcheck");
      read_key(j["gradcheck"], "tolerance", c.gradcheck_tol, "config.gradcheck");
    }
  }
  if (const char* env = std::getenv("POND_SEED"); env && *env) {
    std::uint64_t seed = 0;
    try {
      std::size_t used = 0;
      seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("POND_SEED must be a non-negative integer, got '") + env + "'");
    }
    c.run.seed = c.synthetic.seed = c.gradcheck_seed = seed;
    c.ablate_seeds = c.sweep_seeds = c.flex_seeds = {seed};
  }
  if (c.ablate_seeds.empty() || c.sweep_seeds.empty() || c.flex_seeds.empty())
    throw ConfigError("seed lists must not be empty");
  if (!(c.gradcheck_step > 0) || !(c.gradcheck_tol > 0)) throw ConfigError("gradcheck step and tolerance must be positive");
  c.synthetic.resolved();
  return c;
}

// Fills an unset path option from config.paths; missing both is a usage error.
std::string resolve(const std::string& given, const CliConfig& c, const char* key) {
  if (!given.empty()) return given;
  if (c.paths.contains(key)) return c.paths[key].get<std::string>();
  throw ConfigError(std::string("--") + key + " is required");
}

struct Manifest {
  std::vector<DomainDataset> sources;
  DomainDataset target;
};

Manifest load_data(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  Json m;
  try {
    m = Json::parse(read_text(mpath));
  } catch (const nlohmann::json::parse_error& e) {
    throw CompatibilityError(mpath.string() + " is not valid JSON: " + e.what());
  }
  Manifest out;
  try {
    for (const auto& s : m.at("sources")) out.sources.push_back(load_dataset(dir / s.at("file").get<std::string>()));
    out.target = load_dataset(dir / m.at("target").at("file").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  if (out.sources.empty()) throw CompatibilityError("manifest lists no source domains");
  return out;
}

void check_geometry(const ModelConfig& mc, const DomainDataset& d, const RunConfig& run) {
  if (mc.channels != d.channels || mc.length != d.length || mc.classes != d.classes)
    throw CompatibilityError("checkpoint expects n=" + std::to_string(mc.channels) + " L=" + std::to_string(mc.length) +
                             " K=" + std::to_string(mc.classes) + " but domain " + d.domain_id + " has n=" +
                             std::to_string(d.channels) + " L=" + std::to_string(d.length) +
                             " K=" + std::to_string(d.classes));
  if (mc.prompt_len != run.prompt_len)
    throw CompatibilityError("checkpoint was pretrained with prompt length " + std::to_string(mc.prompt_len) +
                             ", config asks for " + std::to_string(run.prompt_len));
}

Json history_json(const TrainedState& s) {
  Json steps = Json::array();
  for (const auto& r : s.history)
    steps.push_back({{"step", r.step}, {"domain", s.source_ids[r.domain]}, {"batch", r.batch}, {"losses", r.losses.to_json()}});
  return Json{{"sources", s.source_ids}, {"steps", steps}};
}

int cmd_gen_data(const CliConfig& c, const fs::path& out) {
  const auto bundle = generate_synthetic(c.synthetic);
  const auto sources = split_sources(bundle.sources, c.run);
  fs::create_directories(out);
  const auto spec = c.synthetic.resolved();
  Json m{{"synthetic", c.synthetic.to_json()}, {"split_seed", stream_seed(c.run, Stream::Split)}};
  m["sources"] = Json::array();
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const std::string file = sources[i].domain_id + ".pondds";
    save_dataset(sources[i], out / file);
    m["sources"].push_back({{"id", sources[i].domain_id}, {"file", file}, {"group", spec.group_of(i)}});
  }
  save_dataset(bundle.target, out / "T.pondds");
  m["target"] = {{"id", bundle.target.domain_id}, {"file", "T.pondds"}, {"group", spec.target_group}};
  write_json(out / "manifest.json", m);
  std::printf("wrote %zu source domains and 1 target to %s\n", sources.size(), out.c_str());
  return 0;
}

int cmd_pretrain(CliConfig c, const fs::path& data, const fs::path& out, std::optional<std::size_t> epochs) {
  if (epochs) c.run.epochs = *epochs;
  const auto d = load_data(data);
  const ModelConfig mc = model_config_for(c.run, d.sources.front());
  const MoEModel init = init_model(mc, stream_seed(c.run, Stream::ModelInit));
  PretrainReport report;
  const MoEModel model = c.run.epochs == 0 ? init : pretrain(init, d.sources, c.run, &report);
  if (c.run.epochs == 0) {
    report.initial_loss = report.final_loss = std::nan("");
  }
  save_model(model, out);
  Json j = report.to_json();
  if (c.run.epochs == 0) j["initial_loss"] = j["final_loss"] = nullptr;
  j["model"] = mc.to_json();
  j["epochs"] = c.run.epochs;
  write_json(sidecar(out, ".json"), j);
  std::printf("pretrained %zu epochs (%zu optimizer steps)\n", c.run.epochs, report.optimizer_steps);
  return 0;
}

int cmd_tune(const CliConfig& c, const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
  const MoEModel model = load_model(checkpoint);
  const auto d = load_data(data);
  for (const auto& s : d.sources) check_geometry(model.config, s, c.run);
  TrainedState state = init_state(model, d.sources, c.run);
  reptile_tune(state, d.sources, c.run);
  save_state(state, out);
  write_json(sidecar(out, ".json"), history_json(state));
  std::printf("ran %zu prompt-tuning steps over %zu sources\n", state.history.size(), state.source_count());
  return 0;
}

int cmd_adapt(const CliConfig& c, const fs::path& state_path, const fs::path& target_path, const fs::path& out,
              const fs::path& state_out) {
  TrainedState state = load_state(state_path);
  const DomainDataset target = load_dataset(target_path);
  check_geometry(state.model.config, target, c.run);
  const Selection sel = adapt_to_target(state, target, c.run);
  save_state(state, state_out);
  Json sims = Json::array();
  for (std::size_t i = 0; i < sel.similarity.size(); ++i)
    sims.push_back({{"source", state.source_ids[i]}, {"cosine", sel.similarity[i]}});
  write_json(out, Json{{"selected_source", sel.domain_id},
                       {"selected_index", sel.source},
                       {"selection", c.run.selection == SourceSelection::Nearest ? "nearest" : "random"},
                       {"similarity", sims},
                       {"shots", state.shot_indices},
                       {"transfer_loss", state.transfer_loss}});
  std::printf("selected %s\n", sel.domain_id.c_str());
  return 0;
}

int cmd_eval(const fs::path& state_path, const fs::path& target_path, const fs::path& out, const std::string& scenario,
             std::uint64_t seed) {
  const TrainedState state = load_state(state_path);
  if (!state.selected_source) throw StateError("state has not been adapted to a target; run 'adapt' first");
  const DomainDataset target = load_dataset(target_path);
  const auto rest = held_out(state, target);
  if (rest.empty()) throw InvalidArgument("target has no held-out instances");
  const auto preds = predict_target(state, *state.selected_source, rest);
  std::vector<std::size_t> p, t;
  for (std::size_t i = 0; i < rest.size(); ++i) p.push_back(preds[i].label), t.push_back(rest[i].label);
  MetricsReport r = evaluate(p, t, target.classes, scenario, seed);
  r.selected_source = state.source_ids[*state.selected_source];
  r.losses["tune_final"] = state.history.empty() ? Json(nullptr) : state.history.back().losses.to_json();
  r.losses["transfer"] = state.transfer_loss;
  write_json(out, r.to_json());
  std::printf("accuracy %.4f  macro-F1 %.4f\n", r.accuracy, r.macro_f1);
  return 0;
}

int cmd_run(const CliConfig& c, const fs::path& out) {
  const auto bundle = generate_synthetic(c.synthetic);
  const auto outcome = run_pipeline(bundle.sources, bundle.target, c.run);
  const auto r = evaluate(outcome, bundle.target.classes, c.scenario, c.run.seed);
  write_json(out, r.to_json());
  std::printf("selected %s  accuracy %.4f  macro-F1 %.4f\n", r.selected_source.c_str(), r.accuracy, r.macro_f1);
  return 0;
}

int cmd_ablate(const CliConfig& c, const fs::path& out) {
  const auto table = ablation_grid(c.run, synthetic_scenarios(c.synthetic), c.ablate_seeds);
  write_json(out, table.to_json());
  write_text(fs::path(out).replace_extension(".csv"), table.to_csv());
  for (const auto& row : table.rows)
    std::printf("%-22s macro-F1 %.4f +/- %.4f\n", ablation_label(row.flags).c_str(), row.macro_f1.mean, row.macro_f1.std);
  return 0;
}

int cmd_sweep(const CliConfig& c, const fs::path& out) {
  const auto table = source_count_sweep(c.run, synthetic_scenarios(c.synthetic), c.sweep_counts, c.sweep_seeds);
  write_json(out, table.to_json());
  write_text(fs::path(out).replace_extension(".csv"), table.to_csv());
  for (const auto& row : table.rows)
    std::printf("M=%-3zu macro-F1 %.4f +/- %.4f\n", row.sources, row.macro_f1.mean, row.macro_f1.std);
  std::printf("spearman %.4f\n", table.spearman);
  return 0;
}

int cmd_heatmap(const fs::path& state_path, const fs::path& out) {
  const auto h = discrimination_heatmap(load_state(state_path));
  h.write(out);
  std::printf("wrote %zux%zu heatmap%s\n", h.values.size(), h.values.size(), h.fallback ? " (two-domain fallback)" : "");
  return 0;
}

int cmd_flexdemo(const CliConfig& c, const fs::path& out) {
  Json reports = Json::array();
  std::size_t gen_fits = 0, prompt_fits = 0;
  for (auto seed : c.flex_seeds) {
    FlexibilityConfig f = c.flex;
    f.seed = seed;
    const auto r = flexibility_demo(f);
    gen_fits += r.generator.fit_step.has_value();
    prompt_fits += r.prompt_only.fit_step.has_value();
    reports.push_back(r.to_json());
  }
  Json cfg = c.flex.to_json();
  cfg.erase("seed");
  write_json(out, Json{{"config", cfg},
                       {"reports", reports},
                       {"seeds", c.flex_seeds.size()},
                       {"generator_fits", gen_fits},
                       {"prompt_only_fits", prompt_fits}});
  std::printf("generator fits %zu/%zu, prompt-only fits %zu/%zu\n", gen_fits, c.flex_seeds.size(), prompt_fits,
              c.flex_seeds.size());
  return 0;
}

int cmd_gradcheck(const CliConfig& c, const std::string& out) {
  const auto entries = gradcheck_suite(c.gradcheck_seed, c.gradcheck_step, c.gradcheck_tol);
  bool ok = true;
  for (const auto& e : entries) {
    std::printf("%-16s %-4s max rel err %.3e over %zu entries\n", e.name.c_str(), e.report.passed ? "ok" : "FAIL",
                e.report.max_rel_error, e.report.entries_checked);
    ok = ok && e.report.passed;
  }
  if (!out.empty()) write_json(out, gradcheck_json(entries));
  return ok ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-based multi-source time-series domain adaptation"};
  app.require_subcommand(1);
  std::string config, out, data, checkpoint, state, target, state_out, scenario = "eval";
  std::optional<std::size_t> epochs;
  std::uint64_t seed = 0;

  auto with_config = [&](CLI::App* sub) { sub->add_option("--config", config, "JSON configuration")->check(CLI::ExistingFile); };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
  with_config(gen);
  gen->add_option("--out", out, "Output directory")->required();
  auto* pre = app.add_subcommand("pretrain", "Pretrain the mixture-of-experts classifier");
  with_config(pre);
  pre->add_option("--data", data, "Dataset directory with manifest.json");
  pre->add_option("--out", out, "Checkpoint path");
  pre->add_option("--epochs", epochs, "Override run.epochs");
  auto* tune = app.add_subcommand("tune", "Prompt tuning over the source domains");
  with_config(tune);
  tune->add_option("--checkpoint", checkpoint, "Pretrained model checkpoint");
  tune->add_option("--data", data, "Dataset directory with manifest.json");
  tune->add_option("--out", out, "Tuned state path");
  auto* adapt = app.add_subcommand("adapt", "Transfer to the target shots and select a source");
  with_config(adapt);
  adapt->add_option("--state", state, "Tuned state");
  adapt->add_option("--target", target, "Target dataset file");
  adapt->add_option("--out", out, "Selection report JSON");
  adapt->add_option("--state-out", state_out, "Adapted state path")->required();
  auto* ev = app.add_subcommand("eval", "Score the adapted state on the held-out target instances");
  ev->add_option("--state", state, "Adapted state")->required();
  ev->add_option("--target", target, "Target dataset file")->required();
  ev->add_option("--out", out, "Metrics JSON")->required();
  ev->add_option("--scenario", scenario, "Scenario id recorded in the report");
  ev->add_option("--seed", seed, "Seed recorded in the report");
  auto* run = app.add_subcommand("run", "Generate data and run the whole pipeline in one process");
  with_config(run);
  run->add_option("--out", out, "Metrics JSON")->required();
  auto* abl = app.add_subcommand("ablate", "Component ablation grid");
  with_config(abl);
  abl->add_option("--out", out, "Table JSON (a CSV is written next to it)")->required();
  auto* sweep = app.add_subcommand("sweep-sources", "Source-count sensitivity sweep");
  with_config(sweep);
  sweep->add_option("--out", out, "Table JSON (a CSV is written next to it)")->required();
  auto* heat = app.add_subcommand("heatmap", "Pairwise discrimination heatmap");
  heat->add_option("--state", state, "Tuned state")->required();
  heat->add_option("--out", out, "CSV path (a JSON sidecar is written next to it)")->required();
  auto* flex = app.add_subcommand("flexdemo", "Conflicting-instance flexibility demonstration");
  with_config(flex);
  flex->add_option("--out", out, "Report JSON")->required();
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and the full objective");
  with_config(gc);
  gc->add_option("--out", out, "Report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*ev) return cmd_eval(state, target, out, scenario, seed);
    if (*heat) return cmd_heatmap(state, out);
    const CliConfig c = load_config(config);
    if (*gen) return cmd_gen_data(c, out);
    if (*pre) return cmd_pretrain(c, resolve(data, c, "data"), resolve(out, c, "out"), epochs);
    if (*tune)
      return cmd_tune(c, resolve(checkpoint, c, "checkpoint"), resolve(data, c, "data"), resolve(out, c, "out"));
    if (*adapt)
      return cmd_adapt(c, resolve(state, c, "state"), resolve(target, c, "target"), resolve(out, c, "out"), state_out);
    if (*run) return cmd_run(c, out);
    if (*abl) return cmd_ablate(c, out);
    if (*sweep) return cmd_sweep(c, out);
    if (*flex) return cmd_flexdemo(c, out);
    if (*gc) return cmd_gradcheck(c, out);
  } catch (const pond::Error& e) {
    std::fprintf(stderr, "pond: %s\n", e.what());
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "pond: io error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pond: internal error: %s\n", e.what());
    return 4;
  }
  return 2;
}
