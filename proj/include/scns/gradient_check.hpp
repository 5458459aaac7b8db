#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/loss_evaluation.hpp"

namespace scns {

using GradientInputs = std::map<std::string, std::vector<double>>;
using LossFunction = std::function<LossEvaluation(const GradientInputs&)>;

struct GradientReport {
  /// Max over inputs of |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2).
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_input;
  bool pass = false;
};

/// Central finite differences over every coordinate of every named input.
/// Inputs whose analytic and numeric gradients both have norm below 1e-12 are
/// compared by absolute error instead.
inline GradientReport check_gradient(const LossFunction& loss_fn, GradientInputs inputs,
                                     double step, double tolerance) {
  if (!(step > 0.0)) throw BoundsError("gradient_check: step must be positive");
  const LossEvaluation base = loss_fn(inputs);
  GradientReport report;
  for (auto& [name, values] : inputs) {
    const auto& analytic = base.grad(name);
    if (analytic.size() != values.size()) {
      throw ShapeError("gradient_check: gradient '" + name + "' has the wrong size");
    }
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn(inputs).value;
      values[i] = saved - step;
      const double down = loss_fn(inputs).value;
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    double diff = 0.0, na = 0.0, nn = 0.0, worst_abs = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double d = analytic[i] - numeric[i];
      diff += d * d;
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
      worst_abs = std::max(worst_abs, std::abs(d));
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    const double rel = scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
    report.max_abs_error = std::max(report.max_abs_error, worst_abs);
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_input = name;
    }
  }
  report.pass = report.max_relative_error < tolerance;
  return report;
}

}  // namespace scns
