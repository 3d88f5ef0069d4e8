// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sentinel/autodiff.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

// Compares reverse-mode gradients against central finite differences. The
// whole evaluation runs in the double instantiation of the engine, so the
// comparison is a genuine 64-bit shadow of the 32-bit production path.
struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string worst_location;
};

using ScalarFn =
    std::function<GraphT<double>::Var(GraphT<double>&, std::vector<GraphT<double>::Var>&)>;

inline GradCheckReport grad_check(const ScalarFn& fn, std::vector<TensorT<double>> point,
                                  double tolerance, double step = 1e-3) {
  GradCheckReport report;
  for (auto& t : point) t.requires_grad = true;

  // analytic gradients
  std::vector<TensorT<double>> analytic;
  {
    GraphT<double> g;
    std::vector<GraphT<double>::Var> vars;
    vars.reserve(point.size());
    for (const auto& t : point) vars.push_back(g.leaf(t));
    auto out = fn(g, vars);
    if (g.val(out).numel() != 1)
      fail(ErrorKind::Dimension, "grad_check target must produce a scalar");
    if (!std::isfinite(g.val(out).data[0])) {
      report.worst_location = "forward value non-finite";
      return report;
    }
    g.backward(out);
    for (auto v : vars) analytic.push_back(g.grad(v));
  }

  auto eval = [&](const std::vector<TensorT<double>>& p) {
    GraphT<double> g;
    std::vector<GraphT<double>::Var> vars;
    for (const auto& t : p) vars.push_back(g.leaf(t));
    auto out = fn(g, vars);
    return g.val(out).data[0];
  };

  double max_rel = 0.0;
  std::string worst = "(none)";
  for (size_t ti = 0; ti < point.size(); ++ti) {
    for (size_t i = 0; i < point[ti].data.size(); ++i) {
      auto plus = point;
      auto minus = point;
      plus[ti].data[i] += step;
      minus[ti].data[i] -= step;
      const double fp = eval(plus);
      const double fm = eval(minus);
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.worst_location =
            "tensor " + std::to_string(ti) + " index " + std::to_string(i) + ": non-finite probe";
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double exact = analytic[ti].data[i];
      const double denom = std::max({std::abs(numeric), std::abs(exact), 1e-8});
      const double rel = std::abs(numeric - exact) / denom;
      if (rel > max_rel) {
        max_rel = rel;
        worst = "tensor " + std::to_string(ti) + " index " + std::to_string(i);
      }
    }
  }
  report.max_rel_err = max_rel;
  report.worst_location = worst;
  report.pass = max_rel <= tolerance;
  return report;
}

}  // namespace sentinel
