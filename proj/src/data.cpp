#include "pond/data.hpp"

#include <algorithm>
#include <cmath>

#include "pond/errors.hpp"
#include "pond/rng.hpp"

namespace pond {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Tune: return "tune";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::Pretrain, Split::Tune, Split::Validation, Split::Test})
    if (split_name(s) == name) return s;
  throw InvalidArgument("unknown split tag '" + std::string(name) + "'");
}

Series::Series(std::size_t n, std::size_t L) : channels(n), length(L), values(n * L, 0.0) {}

Series::Series(std::size_t n, std::size_t L, std::vector<double> v)
    : channels(n), length(L), values(std::move(v)) {
  if (values.size() != n * L) throw InvalidArgument("series value count does not match n*L");
}

std::vector<std::size_t> DomainDataset::indices_of(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

std::vector<LabeledInstance> DomainDataset::subset(Split s) const {
  std::vector<LabeledInstance> out;
  for (auto i : indices_of(s)) out.push_back(instances[i]);
  return out;
}

std::vector<std::size_t> DomainDataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& inst : instances) ++counts.at(inst.label);
  return counts;
}

void DomainDataset::validate() const {
  if (channels < 1 || length < 2) throw InvalidArgument(domain_id + ": need n >= 1 and L >= 2");
  if (splits.size() != instances.size())
    throw InvalidArgument(domain_id + ": every instance needs exactly one split tag");
  for (const auto& inst : instances) {
    if (inst.series.channels != channels || inst.series.length != length ||
        inst.series.values.size() != channels * length)
      throw InvalidArgument(domain_id + ": instance geometry differs from the dataset's");
    if (inst.label >= classes) throw InvalidArgument(domain_id + ": label out of range");
    for (double v : inst.series.values)
      if (!std::isfinite(v)) throw InvalidArgument(domain_id + ": non-finite series value");
  }
}

std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights) {
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = weights[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    assigned += counts[i];
    remainders.emplace_back(quota - static_cast<double>(counts[i]), i);
  }
  // Largest fractional part first; ties resolved by lower index.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

DomainDataset split(const DomainDataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  const double sum = ratios.pretrain + ratios.tune + ratios.validation;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.pretrain < 0 || ratios.tune < 0 || ratios.validation < 0)
    throw InvalidArgument("split ratios must be non-negative and sum to 1");

  std::vector<std::vector<std::size_t>> by_class(dataset.classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class.at(dataset.instances[i].label).push_back(i);

  DomainDataset out = dataset;
  const std::vector<double> weights{ratios.pretrain, ratios.tune, ratios.validation};
  const Split tags[] = {Split::Pretrain, Split::Tune, Split::Validation};
  Rng rng(seed);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < 5)
      throw InvalidArgument(dataset.domain_id + ": class " + std::to_string(c) + " has " +
                            std::to_string(members.size()) + " instances, split needs at least 5");
    rng.shuffle(members);
    const auto counts = largest_remainder(members.size(), weights);
    std::size_t k = 0;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t j = 0; j < counts[s]; ++j) out.splits[members[k++]] = tags[s];
  }
  return out;
}

std::vector<std::size_t> select_target_shots(const DomainDataset& target, std::size_t count,
                                             std::uint64_t seed) {
  if (count > target.size())
    throw InvalidArgument("requested " + std::to_string(count) + " target shots from " +
                          std::to_string(target.size()) + " instances");
  const std::size_t K = target.classes;
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < target.size(); ++i) by_class.at(target.instances[i].label).push_back(i);
  Rng rng(seed);
  for (auto& members : by_class) rng.shuffle(members);

  std::vector<std::size_t> take(K, 0);
  std::size_t deficit = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const std::size_t want = count / K + (c < count % K ? 1 : 0);
    take[c] = std::min(want, by_class[c].size());
    deficit += want - take[c];
  }
  while (deficit > 0) {
    for (std::size_t c = 0; c < K && deficit > 0; ++c)
      if (take[c] < by_class[c].size()) {
        ++take[c];
        --deficit;
      }
  }

  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < K; ++c)
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

std::vector<LabeledInstance> take_target_shots(const DomainDataset& target, std::size_t count,
                                               std::uint64_t seed) {
  std::vector<LabeledInstance> out;
  for (auto i : select_target_shots(target, count, seed)) out.push_back(target.instances[i]);
  return out;
}

}  // namespace pond
