#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace pond {

using Json = nlohmann::json;
using Magic = std::array<char, 8>;

// Shared binary layout of dataset and checkpoint files:
//   8-byte magic | u32 LE header length | UTF-8 JSON header |
//   payload of f64 LE | u32 LE CRC-32 of the payload bytes
struct Container {
  Json header;
  std::vector<double> payload;
};

std::vector<std::uint8_t> encode_container(const Magic& magic, const Json& header,
                                           std::span<const double> payload);

// `payload_doubles` derives the expected payload length from the header.
// Throws BadMagicError, TruncatedError, ChecksumError or IoError.
Container decode_container(std::span<const std::uint8_t> bytes, const Magic& magic,
                           const std::function<std::size_t(const Json&)>& payload_doubles);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace pond
