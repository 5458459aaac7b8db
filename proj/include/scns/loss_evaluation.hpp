#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scns/error.hpp"

namespace scns {

/// Scalar loss plus gradients with respect to named inputs. Matrix-valued
/// inputs are flattened row-major; every gradient has its input's size.
struct LossEvaluation {
  double value = 0.0;
  std::map<std::string, std::vector<double>> grads;

  const std::vector<double>& grad(const std::string& name) const {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("losses: no gradient named '" + name + "'");
    return it->second;
  }

  /// this += scale * other, matching gradients by name.
  void accumulate(const LossEvaluation& other, double scale) {
    value += scale * other.value;
    for (const auto& [name, g] : other.grads) {
      auto& dst = grads[name];
      if (dst.empty()) dst.assign(g.size(), 0.0);
      if (dst.size() != g.size()) throw ShapeError("losses: gradient size mismatch for " + name);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
    }
  }
};

}  // namespace scns
