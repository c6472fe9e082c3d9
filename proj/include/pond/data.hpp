#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace pond {

enum class Split : std::uint8_t { Pretrain, Tune, Validation, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

// n channels x L time steps, stored [channel][time].
struct Series {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<double> values;

  Series() = default;
  Series(std::size_t n, std::size_t L);
  Series(std::size_t n, std::size_t L, std::vector<double> v);

  double at(std::size_t c, std::size_t t) const { return values[c * length + t]; }
  double& at(std::size_t c, std::size_t t) { return values[c * length + t]; }

  friend bool operator==(const Series&, const Series&) = default;
};

struct LabeledInstance {
  Series series;
  std::size_t label = 0;

  friend bool operator==(const LabeledInstance&, const LabeledInstance&) = default;
};

// One domain's labeled series. All instances share n, L and the class count;
// `splits[i]` tags instance i.
struct DomainDataset {
  std::string domain_id;
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t classes = 0;
  std::vector<LabeledInstance> instances;
  std::vector<Split> splits;

  std::size_t size() const noexcept { return instances.size(); }
  std::vector<std::size_t> indices_of(Split s) const;
  std::vector<LabeledInstance> subset(Split s) const;
  std::vector<std::size_t> class_counts() const;
  // Throws InvalidArgument when an invariant is broken.
  void validate() const;

  friend bool operator==(const DomainDataset&, const DomainDataset&) = default;
};

struct SplitRatios {
  double pretrain = 0.6;
  double tune = 0.2;
  double validation = 0.2;
};

// Stratified by class; per-class counts follow the ratios with
// largest-remainder rounding (ties go to the earlier split). Each class needs
// at least five instances.
DomainDataset split(const DomainDataset& dataset, const SplitRatios& ratios, std::uint64_t seed);

// Largest-remainder apportionment of `total` over `weights` (summing to 1).
std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights);

// Class-stratified few-shot draw: floor(count/K) per class plus the remainder
// to the lowest classes; classes short of instances hand their deficit
// round-robin (lowest class first) to classes with spares. Returns sorted
// instance indices.
std::vector<std::size_t> select_target_shots(const DomainDataset& target, std::size_t count,
                                             std::uint64_t seed);
std::vector<LabeledInstance> take_target_shots(const DomainDataset& target, std::size_t count,
                                               std::uint64_t seed);

}  // namespace pond
