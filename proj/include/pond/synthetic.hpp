#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pond/container.hpp"
#include "pond/data.hpp"

namespace pond {

// Group-structured multi-domain sine benchmark. Source domain i belongs to
// group i % groups; the target is drawn from `target_group`.
struct SyntheticSpec {
  std::size_t sources = 6;
  std::size_t groups = 2;
  std::size_t classes = 3;
  std::size_t channels = 2;
  std::size_t length = 128;
  // Cycles per window, one per class.
  std::vector<double> frequencies{2.0, 5.0, 9.0};
  // Per-group phase offset (radians). Empty: group g gets g*pi/groups.
  std::vector<double> group_phase;
  // Per-group, per-channel gain. Empty: 1.0 on channel c when c % groups == g, else 0.4.
  std::vector<std::vector<double>> group_gain;
  double noise_sigma = 0.1;
  std::size_t instances_per_domain = 60;
  std::size_t target_group = 0;
  // Each source domain's phase is jittered uniformly within +/- this.
  double domain_jitter = 0.1;
  // Fresh jitter for the target domain's phase.
  double target_jitter = 0.1;
  std::uint64_t seed = 0;

  // Copy with empty per-group lists filled in. Throws ConfigError on an
  // invalid spec.
  SyntheticSpec resolved() const;
  std::size_t group_of(std::size_t source) const { return source % groups; }

  Json to_json() const;
  // Rejects unknown keys; absent keys keep their defaults.
  static SyntheticSpec from_json(const Json& j);
};

struct SyntheticBundle {
  std::vector<DomainDataset> sources;
  DomainDataset target;
  // Phase actually used per source domain and for the target.
  std::vector<double> source_phase;
  double target_phase = 0.0;
};

// Noise-free class template for `group` at `phase`.
Series class_template(const SyntheticSpec& spec, std::size_t cls, std::size_t group, double phase);

// Sources come back tagged Pretrain (call split() next); target instances are
// tagged Test. Labels cycle 0..K-1 so classes are balanced.
SyntheticBundle generate_synthetic(const SyntheticSpec& spec);

}  // namespace pond
