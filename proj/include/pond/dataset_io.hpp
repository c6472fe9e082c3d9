#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pond/container.hpp"
#include "pond/data.hpp"

namespace pond {

inline constexpr Magic kDatasetMagic{'P', 'O', 'N', 'D', 'D', 'S', '1', '\0'};

// PONDDS1 container: header {domain_id, n, L, K, count, splits, labels},
// payload [instance][channel][time].
std::vector<std::uint8_t> encode_dataset(const DomainDataset& dataset);
DomainDataset decode_dataset(std::span<const std::uint8_t> bytes);

void save_dataset(const DomainDataset& dataset, const std::filesystem::path& path);
DomainDataset load_dataset(const std::filesystem::path& path);

}  // namespace pond
