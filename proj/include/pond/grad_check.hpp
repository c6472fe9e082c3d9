#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pond/graph.hpp"

namespace pond::ng {

struct GradCheckFailure {
  NodeId leaf = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t entries_checked = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::vector<GradCheckFailure> failures;
};

// Relative error between an analytic and a numeric derivative. The
// denominator is floored at 1e-3 so entries that are zero up to rounding
// are judged on absolute error.
double relative_error(double analytic, double numeric);

// Compares the analytic gradient of the scalar `root` against central finite
// differences for every entry of every trainable leaf. Leaves the graph bound
// to the original values.
GradCheckReport grad_check(Graph& graph, NodeId root, const Bindings& bindings, double step,
                           double tol);

}  // namespace pond::ng
