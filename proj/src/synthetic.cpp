#include "pond/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pond/errors.hpp"
#include "pond/json_util.hpp"
#include "pond/rng.hpp"

namespace pond {

SyntheticSpec SyntheticSpec::resolved() const {
  SyntheticSpec s = *this;
  if (s.classes < 2) throw ConfigError("synthetic spec needs K >= 2");
  if (s.sources < 2) throw ConfigError("synthetic spec needs M >= 2 source domains");
  if (s.groups < 1 || s.groups > s.sources) throw ConfigError("synthetic spec needs 1 <= groups <= M");
  if (s.channels < 1 || s.length < 2) throw ConfigError("synthetic spec needs n >= 1 and L >= 2");
  if (s.frequencies.size() != s.classes) throw ConfigError("need one frequency per class");
  auto sorted = s.frequencies;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("class frequencies must be distinct");
  if (!(s.noise_sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  if (s.domain_jitter < 0.0 || s.target_jitter < 0.0) throw ConfigError("jitter must be >= 0");
  if (s.target_group >= s.groups) throw ConfigError("target group out of range");
  if (s.group_phase.empty())
    for (std::size_t g = 0; g < s.groups; ++g)
      s.group_phase.push_back(std::numbers::pi * static_cast<double>(g) / static_cast<double>(s.groups));
  if (s.group_gain.empty())
    for (std::size_t g = 0; g < s.groups; ++g) {
      std::vector<double> gains;
      for (std::size_t c = 0; c < s.channels; ++c) gains.push_back(c % s.groups == g ? 1.0 : 0.4);
      s.group_gain.push_back(std::move(gains));
    }
  if (s.group_phase.size() != s.groups) throw ConfigError("need one phase per group");
  if (s.group_gain.size() != s.groups) throw ConfigError("need one gain list per group");
  for (const auto& gains : s.group_gain)
    if (gains.size() != s.channels) throw ConfigError("need one gain per channel in every group");
  return s;
}

Json SyntheticSpec::to_json() const {
  return Json{{"sources", sources},
              {"groups", groups},
              {"classes", classes},
              {"channels", channels},
              {"length", length},
              {"frequencies", frequencies},
              {"group_phase", group_phase},
              {"group_gain", group_gain},
              {"noise_sigma", noise_sigma},
              {"instances_per_domain", instances_per_domain},
              {"target_group", target_group},
              {"domain_jitter", domain_jitter},
              {"target_jitter", target_jitter},
              {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const Json& j) {
  check_keys(j,
             {"sources", "groups", "classes", "channels", "length", "frequencies", "group_phase", "group_gain",
              "noise_sigma", "instances_per_domain", "target_group", "domain_jitter", "target_jitter", "seed"},
             "synthetic");
  SyntheticSpec s;
  read_key(j, "sources", s.sources, "synthetic");
  read_key(j, "groups", s.groups, "synthetic");
  read_key(j, "classes", s.classes, "synthetic");
  read_key(j, "channels", s.channels, "synthetic");
  read_key(j, "length", s.length, "synthetic");
  read_key(j, "frequencies", s.frequencies, "synthetic");
  read_key(j, "group_phase", s.group_phase, "synthetic");
  read_key(j, "group_gain", s.group_gain, "synthetic");
  read_key(j, "noise_sigma", s.noise_sigma, "synthetic");
  read_key(j, "instances_per_domain", s.instances_per_domain, "synthetic");
  read_key(j, "target_group", s.target_group, "synthetic");
  read_key(j, "domain_jitter", s.domain_jitter, "synthetic");
  read_key(j, "target_jitter", s.target_jitter, "synthetic");
  read_key(j, "seed", s.seed, "synthetic");
  s.resolved();
  return s;
}

Series class_template(const SyntheticSpec& spec, std::size_t cls, std::size_t group, double phase) {
  Series x(spec.channels, spec.length);
  const double L = static_cast<double>(spec.length);
  for (std::size_t c = 0; c < spec.channels; ++c)
    for (std::size_t t = 0; t < spec.length; ++t)
      x.at(c, t) = spec.group_gain[group][c] *
                   std::sin(2.0 * std::numbers::pi * spec.frequencies[cls] * static_cast<double>(t) / L + phase);
  return x;
}

namespace {

DomainDataset make_domain(const SyntheticSpec& s, std::string id, std::size_t group, double phase,
                          Rng& rng, Split tag) {
  DomainDataset d;
  d.domain_id = std::move(id);
  d.channels = s.channels;
  d.length = s.length;
  d.classes = s.classes;
  std::vector<Series> templates;
  for (std::size_t k = 0; k < s.classes; ++k) templates.push_back(class_template(s, k, group, phase));
  for (std::size_t j = 0; j < s.instances_per_domain; ++j) {
    LabeledInstance inst{templates[j % s.classes], j % s.classes};
    if (s.noise_sigma > 0.0)
      for (auto& v : inst.series.values) v += rng.normal(0.0, s.noise_sigma);
    d.instances.push_back(std::move(inst));
    d.splits.push_back(tag);
  }
  return d;
}

}  // namespace

SyntheticBundle generate_synthetic(const SyntheticSpec& spec) {
  const SyntheticSpec s = spec.resolved();
  SyntheticBundle bundle;
  for (std::size_t i = 0; i < s.sources; ++i) {
    Rng rng(Rng::derive(s.seed, i));
    const std::size_t g = s.group_of(i);
    const double phase = s.group_phase[g] + rng.uniform(-s.domain_jitter, s.domain_jitter);
    bundle.source_phase.push_back(phase);
    bundle.sources.push_back(make_domain(s, "S" + std::to_string(i), g, phase, rng, Split::Pretrain));
  }
  Rng rng(Rng::derive(s.seed, 1000));
  bundle.target_phase = s.group_phase[s.target_group] + rng.uniform(-s.target_jitter, s.target_jitter);
  bundle.target = make_domain(s, "T", s.target_group, bundle.target_phase, rng, Split::Test);
  return bundle;
}

}  // namespace pond
