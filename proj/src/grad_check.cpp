#include "pond/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "pond/errors.hpp"

namespace pond::ng {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(Graph& graph, NodeId root, const Bindings& bindings, double step,
                           double tol) {
  if (!(step > 0.0)) throw InvalidArgument("grad_check step must be positive");
  GradCheckReport report;
  report.tolerance = tol;

  graph.forward(root, bindings);
  const Gradients analytic = graph.backward(root);

  for (const auto& [leaf, grad] : analytic) {
    const Tensor original = graph.value(leaf);
    Tensor probe = original;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      probe[i] = original[i] + step;
      graph.bind(leaf, probe);
      const double up = graph.forward(root).item();
      probe[i] = original[i] - step;
      graph.bind(leaf, probe);
      const double down = graph.forward(root).item();
      probe[i] = original[i];

      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(grad[i], numeric);
      ++report.entries_checked;
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (!(err <= tol)) {
        report.passed = false;
        report.failures.push_back({leaf, i, grad[i], numeric, err});
      }
    }
    graph.bind(leaf, original);
  }
  graph.forward(root);
  return report;
}

}  // namespace pond::ng
