#include "pond/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "pond/errors.hpp"

namespace pond {

using ng::Tensor;

namespace {

void check_pairs(std::span<const std::size_t> predictions, std::span<const std::size_t> truths) {
  if (predictions.size() != truths.size())
    throw InvalidArgument("predictions and truths differ in length (" + std::to_string(predictions.size()) + " vs " +
                          std::to_string(truths.size()) + ")");
  if (truths.empty()) throw InvalidArgument("metrics of an empty prediction list");
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> predictions,
                                                       std::span<const std::size_t> truths, std::size_t K) {
  check_pairs(predictions, truths);
  std::vector<std::vector<std::size_t>> c(K, std::vector<std::size_t>(K, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= K || predictions[i] >= K) throw InvalidArgument("label out of range for K = " + std::to_string(K));
    ++c[truths[i]][predictions[i]];
  }
  return c;
}

std::vector<ClassMetrics> class_metrics(const std::vector<std::vector<std::size_t>>& c) {
  const std::size_t K = c.size();
  std::vector<ClassMetrics> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t j = 0; j < K; ++j) predicted += c[j][k], actual += c[k][j];
    const double tp = double(c[k][k]);
    out[k].precision = predicted ? tp / double(predicted) : 0.0;
    out[k].recall = actual ? tp / double(actual) : 0.0;
    const double denom = double(predicted + actual);
    out[k].f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> truths) {
  check_pairs(predictions, truths);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) hit += predictions[i] == truths[i];
  return double(hit) / double(truths.size());
}

double macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> truths, std::size_t classes) {
  if (classes == 0) throw InvalidArgument("macro-F1 needs K >= 1");
  double s = 0.0;
  for (const auto& m : class_metrics(confusion_matrix(predictions, truths, classes))) s += m.f1;
  return s / double(classes);
}

Json MetricsReport::to_json() const {
  Json pc = Json::array();
  for (const auto& m : per_class) pc.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}});
  return Json{{"scenario", scenario},
              {"seed", seed},
              {"accuracy", accuracy},
              {"macro_f1", macro_f1},
              {"per_class", pc},
              {"confusion", confusion},
              {"selected_source", selected_source},
              {"losses", losses}};
}

MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truths,
                       std::size_t classes, std::string scenario, std::uint64_t seed) {
  MetricsReport r;
  r.scenario = std::move(scenario);
  r.seed = seed;
  r.confusion = confusion_matrix(predictions, truths, classes);
  r.per_class = class_metrics(r.confusion);
  r.accuracy = accuracy(predictions, truths);
  double s = 0.0;
  for (const auto& m : r.per_class) s += m.f1;
  r.macro_f1 = s / double(classes);
  return r;
}

MetricsReport evaluate(const PipelineOutcome& outcome, std::size_t classes, std::string scenario,
                       std::uint64_t seed) {
  std::vector<std::size_t> predicted;
  for (const auto& p : outcome.predictions) predicted.push_back(p.label);
  MetricsReport r = evaluate(predicted, outcome.truths, classes, std::move(scenario), seed);
  r.selected_source = outcome.selection.domain_id;
  r.losses["pretrain"] = outcome.pretrain.to_json();
  r.losses["tune_final"] = outcome.state.history.empty() ? Json(nullptr) : outcome.state.history.back().losses.to_json();
  r.losses["transfer"] = outcome.state.transfer_loss;
  return r;
}

ScenarioFactory synthetic_scenarios(const SyntheticSpec& spec) {
  spec.resolved();
  return [spec](std::uint64_t seed) {
    SyntheticSpec s = spec;
    s.seed = seed;
    auto b = generate_synthetic(s);
    return Scenario{std::move(b.sources), std::move(b.target)};
  };
}

ScenarioFactory fixed_scenario(Scenario scenario) {
  return [scenario = std::move(scenario)](std::uint64_t) { return scenario; };
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("summary of no values");
  Summary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  double v = 0.0;
  for (double x : values) v += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(v / double(values.size()));
  return s;
}

std::vector<AblationFlags> ablation_rows() {
  return {{false, true, false}, {false, false, true}, {false, true, true},
          {true, false, true},  {true, true, false},  {true, true, true}};
}

std::string ablation_label(const AblationFlags& f) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += name;
  };
  add(f.use_moe, "moe");
  add(f.use_common_prompt, "common");
  add(f.use_generator, "generator");
  return s.empty() ? "none" : s;
}

namespace {

MetricsReport run_one(RunConfig config, const Scenario& sc, std::uint64_t seed, const std::string& label) {
  config.seed = seed;
  if (sc.sources.empty()) throw InvalidArgument("scenario has no source domains");
  const auto out = run_pipeline(sc.sources, sc.target, config);
  return evaluate(out, sc.target.classes, label, seed);
}

template <class Row>
void fill_summary(Row& row) {
  std::vector<double> f1, acc;
  for (const auto& r : row.runs) f1.push_back(r.macro_f1), acc.push_back(r.accuracy);
  row.macro_f1 = summarize(f1);
  row.accuracy = summarize(acc);
}

Json summary_json(const Summary& s) { return Json{{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

AblationTable ablation_grid(const RunConfig& config, const ScenarioFactory& scenarios,
                            std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw InvalidArgument("ablation grid needs at least one seed");
  config.validate();
  AblationTable table;
  for (const auto& flags : ablation_rows()) table.rows.push_back({flags, {}, {}, {}});
  for (std::uint64_t seed : seeds) {
    const Scenario sc = scenarios(seed);
    for (auto& row : table.rows) {
      RunConfig c = config;
      c.flags = row.flags;
      row.runs.push_back(run_one(c, sc, seed, "ablation:" + ablation_label(row.flags)));
    }
  }
  for (auto& row : table.rows) fill_summary(row);
  return table;
}

Json AblationTable::to_json() const {
  Json rows_json = Json::array();
  for (const auto& r : rows) {
    Json runs = Json::array();
    for (const auto& m : r.runs) runs.push_back(m.to_json());
    rows_json.push_back({{"use_moe", r.flags.use_moe},
                         {"use_common_prompt", r.flags.use_common_prompt},
                         {"use_generator", r.flags.use_generator},
                         {"label", ablation_label(r.flags)},
                         {"macro_f1", summary_json(r.macro_f1)},
                         {"accuracy", summary_json(r.accuracy)},
                         {"runs", runs}});
  }
  return Json{{"rows", rows_json}};
}

std::string AblationTable::to_csv() const {
  std::string s = "use_moe,use_common_prompt,use_generator,macro_f1_mean,macro_f1_std,accuracy_mean,accuracy_std\n";
  for (const auto& r : rows)
    s += std::to_string(int(r.flags.use_moe)) + "," + std::to_string(int(r.flags.use_common_prompt)) + "," +
         std::to_string(int(r.flags.use_generator)) + "," + fmt(r.macro_f1.mean) + "," + fmt(r.macro_f1.std) + "," +
         fmt(r.accuracy.mean) + "," + fmt(r.accuracy.std) + "\n";
  return s;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("spearman needs two equal-length lists of >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (double(i) + double(j)) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

SweepTable source_count_sweep(const RunConfig& config, const ScenarioFactory& scenarios,
                              std::span<const std::size_t> counts, std::span<const std::uint64_t> seeds) {
  if (counts.empty() || seeds.empty()) throw InvalidArgument("source sweep needs counts and seeds");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) throw InvalidArgument("source counts must be positive");
    if (i > 0 && counts[i] <= counts[i - 1]) throw InvalidArgument("source counts must be strictly ascending");
  }
  config.validate();
  SweepTable table;
  for (std::size_t c : counts) table.rows.push_back({c, {}, {}, {}});
  for (std::uint64_t seed : seeds) {
    const Scenario full = scenarios(seed);
    if (counts.back() > full.sources.size())
      throw InvalidArgument("source count " + std::to_string(counts.back()) + " exceeds the " +
                            std::to_string(full.sources.size()) + " available");
    for (auto& row : table.rows) {
      Scenario sc{{full.sources.begin(), full.sources.begin() + long(row.sources)}, full.target};
      row.runs.push_back(run_one(config, sc, seed, "sources:" + std::to_string(row.sources)));
    }
  }
  std::vector<double> x, y;
  for (auto& row : table.rows) {
    fill_summary(row);
    x.push_back(double(row.sources));
    y.push_back(row.macro_f1.mean);
  }
  table.spearman = table.rows.size() >= 2 ? spearman(x, y) : 0.0;
  return table;
}

Json SweepTable::to_json() const {
  Json rows_json = Json::array();
  for (const auto& r : rows) {
    Json f1 = Json::array();
    for (const auto& m : r.runs) f1.push_back(m.macro_f1);
    rows_json.push_back({{"sources", r.sources},
                         {"macro_f1", summary_json(r.macro_f1)},
                         {"accuracy", summary_json(r.accuracy)},
                         {"per_seed_macro_f1", f1}});
  }
  return Json{{"rows", rows_json}, {"spearman", spearman}};
}

std::string SweepTable::to_csv() const {
  std::string s = "sources,macro_f1_mean,macro_f1_std,accuracy_mean,accuracy_std\n";
  for (const auto& r : rows)
    s += std::to_string(r.sources) + "," + fmt(r.macro_f1.mean) + "," + fmt(r.macro_f1.std) + "," +
         fmt(r.accuracy.mean) + "," + fmt(r.accuracy.std) + "\n";
  return s;
}

Heatmap discrimination_heatmap(const TrainedState& state) {
  const std::size_t M = state.domain_prompts.size();
  if (M != state.source_count()) throw StateError("heatmap needs exact domain prompts from prompt tuning");
  const Tensor T = discrimination_pair_terms(state.domain_prompts);
  Heatmap h;
  h.domain_ids = state.source_ids;
  h.fallback = M == 2;
  h.values.assign(M, std::vector<double>(M, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = 0; b < M; ++b)
      if (a != b) h.values[a][b] = std::exp(0.5 * (T.at(a, b) + T.at(b, a)));
  return h;
}

std::string Heatmap::to_csv() const {
  std::string s;
  for (const auto& id : domain_ids) s += "," + id;
  s += "\n";
  for (std::size_t a = 0; a < values.size(); ++a) {
    s += domain_ids[a];
    for (std::size_t b = 0; b < values.size(); ++b) s += "," + (a == b ? std::string() : fmt(values[a][b]));
    s += "\n";
  }
  return s;
}

Heatmap Heatmap::from_csv(const std::string& text) {
  auto split_line = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("empty heatmap CSV");
  auto header = split_line(line);
  if (header.empty() || !header[0].empty()) throw InvalidArgument("heatmap CSV header must start with an empty cell");
  Heatmap h;
  h.domain_ids.assign(header.begin() + 1, header.end());
  const std::size_t M = h.domain_ids.size();
  h.values.assign(M, std::vector<double>(M, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t a = 0; a < M; ++a) {
    if (!std::getline(in, line)) throw InvalidArgument("heatmap CSV has too few rows");
    auto cells = split_line(line);
    if (cells.size() != M + 1 || cells[0] != h.domain_ids[a]) throw InvalidArgument("malformed heatmap CSV row");
    for (std::size_t b = 0; b < M; ++b) {
      if (a == b) {
        if (!cells[b + 1].empty()) throw InvalidArgument("heatmap CSV diagonal must be empty");
        continue;
      }
      const auto& c = cells[b + 1];
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size()) throw InvalidArgument("bad heatmap value '" + c + "'");
      h.values[a][b] = v;
    }
  }
  return h;
}

Json Heatmap::sidecar() const {
  return Json{{"domain_ids", domain_ids},
              {"quantity", "exp of the symmetrised pairwise discrimination term"},
              {"diagonal", "absent"},
              {"fallback", fallback}};
}

void Heatmap::write(const std::filesystem::path& csv_path) const {
  const std::string csv = to_csv();
  write_file(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  const std::string side = sidecar().dump(2) + "\n";
  auto json_path = csv_path;
  json_path += ".json";
  write_file(json_path, std::span(reinterpret_cast<const std::uint8_t*>(side.data()), side.size()));
}

}  // namespace pond
