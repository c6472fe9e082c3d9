#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pond/container.hpp"
#include "pond/model.hpp"
#include "pond/params.hpp"

namespace pond {

inline constexpr Magic kCheckpointMagic{'P', 'O', 'N', 'D', 'C', 'K', '1', '\0'};

// Named tensors plus free-form metadata, stored as a PONDCK1 container:
// header {kind, meta, tensors: [{name, shape}]}, payload in tensor order.
struct Archive {
  std::string kind;
  Json meta = Json::object();
  std::vector<NamedTensor> tensors;

  const ng::Tensor& at(const std::string& name) const { return find_param(tensors, name); }
  bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> encode_archive(const Archive& archive);
Archive decode_archive(std::span<const std::uint8_t> bytes);

void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

// Model tensors are named "expert<e>/<param>" and "router/<param>".
void append_model(Archive& archive, const MoEModel& model);
MoEModel extract_model(const Archive& archive);

void save_model(const MoEModel& model, const std::filesystem::path& path);
MoEModel load_model(const std::filesystem::path& path);

}  // namespace pond
