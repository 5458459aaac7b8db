#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "scns/error.hpp"

namespace scns {

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Pearson goodness-of-fit of observed counts against category probabilities.
/// Categories with zero expected probability must have zero observations (else
/// p = 0); they do not contribute degrees of freedom.
inline ChiSquareResult chi_square_gof(std::span<const std::uint64_t> observed,
                                      std::span<const double> probs) {
  if (observed.size() != probs.size() || observed.empty()) {
    throw ShapeError("stats: observed/probability size mismatch");
  }
  std::uint64_t total = 0;
  for (auto o : observed) total += o;
  ChiSquareResult out;
  std::size_t support = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (probs[i] <= 0.0) {
      if (observed[i] != 0) {
        out.statistic = INFINITY;
        out.p_value = 0.0;
        return out;
      }
      continue;
    }
    ++support;
    const double expected = probs[i] * static_cast<double>(total);
    const double diff = static_cast<double>(observed[i]) - expected;
    out.statistic += diff * diff / expected;
  }
  if (support < 2) {
    out.dof = 0;
    out.p_value = 1.0;
    return out;
  }
  out.dof = support - 1;
  boost::math::chi_squared dist(static_cast<double>(out.dof));
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.statistic));
  return out;
}

/// Streaming mean and variance (Welford), mergeable across workers.
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  void merge(const RunningStats& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(n_ + o.n_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.n_) / n;
    m2_ += o.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(o.n_) / n;
    n_ += o.n_;
  }

  std::uint64_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  /// Half-width of the normal-approximation 95% confidence interval.
  double ci95() const {
    return n_ > 1 ? 1.959963984540054 * std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
  }

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

}  // namespace scns
