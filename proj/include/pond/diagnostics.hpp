#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pond/container.hpp"
#include "pond/grad_check.hpp"

namespace pond {

struct GradCheckEntry {
  std::string name;
  ng::GradCheckReport report;
};

// Finite-difference checks of every graph primitive on random inputs, then of
// the full prompt-tuning objective on a tiny model (d_model 8, one block, two
// heads, m 3) with the model, a generator and the common prompt all trainable.
std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step = 1e-5, double tol = 1e-4);

Json gradcheck_json(const std::vector<GradCheckEntry>& entries);

}  // namespace pond
