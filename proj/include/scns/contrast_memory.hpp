#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/loss_evaluation.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"

namespace scns {

/// Momentum lookup table V (one unit row per target) and a FIFO ring buffer Q
/// of unit negative features. Queries score a unit feature z against every V
/// row and every queued entry at temperature tau.
///
/// Single writer: only the training loop mutates a memory; const queries may
/// run concurrently between updates.
class ContrastMemory {
 public:
  static constexpr double kUnitTolerance = 1e-6;

  ContrastMemory(std::size_t value_rows, std::size_t queue_capacity, std::size_t dim,
                 double gamma, double tau, CounterRng& rng)
      : values_(value_rows, dim), queue_(queue_capacity, dim), gamma_(gamma), tau_(tau) {
    if (value_rows < 1 || queue_capacity < 1 || dim < 1) {
      throw BoundsError("memory: N_v, N_q and d_l must all be at least 1");
    }
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw BoundsError("memory: gamma must lie in [0, 1]");
    if (!(tau > 0.0)) throw BoundsError("memory: tau must be positive");
    for (std::size_t r = 0; r < value_rows; ++r) {
      auto row = values_.row(r);
      double n = 0.0;
      do {
        for (double& v : row) v = rng.normal();
        n = norm2(row);
      } while (n == 0.0);
      for (double& v : row) v /= n;
    }
  }

  std::size_t value_rows() const { return values_.rows(); }
  std::size_t queue_capacity() const { return queue_.rows(); }
  std::size_t queue_size() const { return queue_size_; }
  std::size_t dim() const { return values_.cols(); }
  double gamma() const { return gamma_; }
  double tau() const { return tau_; }

  std::span<const double> value(std::size_t i) const { return values_.row(i); }

  /// Queue entry by FIFO position: 0 is the oldest entry still held.
  std::span<const double> queue_entry(std::size_t n) const {
    if (n >= queue_size_) throw BoundsError("memory: queue slot " + std::to_string(n) + " empty");
    return queue_.row((head_ + n) % queue_.rows());
  }

  double positive_prob(std::span<const double> z, std::size_t i) const {
    check_unit(z);
    check_row(i);
    const Scores s = score(z);
    return std::exp(s.value[i] - s.log_partition);
  }

  double negative_prob(std::span<const double> z, std::size_t n) const {
    check_unit(z);
    if (n >= queue_size_) throw BoundsError("memory: queue slot " + std::to_string(n) + " empty");
    const Scores s = score(z);
    return std::exp(s.queue[n] - s.log_partition);
  }

  /// -log p_i and its gradient with respect to z (key "z").
  LossEvaluation nce_loss_and_grad(std::span<const double> z, std::size_t i) const {
    check_unit(z);
    check_row(i);
    return nce_objective(z, i);
  }

  /// nce_loss_and_grad without the unit-norm precondition. The formula is
  /// defined for any z; finite-difference probes need off-sphere points.
  LossEvaluation nce_objective(std::span<const double> z, std::size_t i) const {
    if (z.size() != dim()) throw ShapeError("memory: feature dimension mismatch");
    const Scores s = score(z);
    LossEvaluation out;
    out.value = s.log_partition - s.value[i];
    std::vector<double> g(dim(), 0.0);
    for (std::size_t m = 0; m < value_rows(); ++m) {
      const double p = std::exp(s.value[m] - s.log_partition);
      axpy((p - (m == i ? 1.0 : 0.0)) / tau_, values_.row(m), g);
    }
    for (std::size_t n = 0; n < queue_size_; ++n) {
      const double q = std::exp(s.queue[n] - s.log_partition);
      axpy(q / tau_, queue_entry(n), g);
    }
    out.grads["z"] = std::move(g);
    return out;
  }

  /// v_i <- gamma v_i + (1 - gamma) z, re-normalised to unit length.
  void momentum_update(std::size_t i, std::span<const double> z) {
    check_unit(z);
    check_row(i);
    auto row = values_.row(i);
    Vector mixed(dim());
    for (std::size_t c = 0; c < dim(); ++c) mixed[c] = gamma_ * row[c] + (1.0 - gamma_) * z[c];
    const double n = norm2(mixed);
    if (n < 1e-12) {
      throw DegenerateVectorError("memory: momentum update of row " + std::to_string(i) +
                                      " cancels to zero",
                                  i);
    }
    for (std::size_t c = 0; c < dim(); ++c) row[c] = mixed[c] / n;
  }

  /// Append z; once full, the oldest entry is evicted.
  void enqueue(std::span<const double> z) {
    check_unit(z);
    const std::size_t cap = queue_.rows();
    std::size_t slot;
    if (queue_size_ < cap) {
      slot = (head_ + queue_size_) % cap;
      ++queue_size_;
    } else {
      slot = head_;
      head_ = (head_ + 1) % cap;
    }
    std::copy(z.begin(), z.end(), queue_.row(slot).begin());
  }

  /// Overwrite row i directly (used to seed a table from current features).
  void set_value(std::size_t i, std::span<const double> z) {
    check_unit(z);
    check_row(i);
    std::copy(z.begin(), z.end(), values_.row(i).begin());
  }

  /// CSV dump: kind,slot,x0..x{d-1}; V rows first, then queue entries oldest
  /// first.
  void write_csv(std::ostream& os) const {
    os << "kind,slot";
    for (std::size_t c = 0; c < dim(); ++c) os << ",x" << c;
    os << '\n';
    std::ostringstream line;
    line.precision(17);
    auto emit = [&](const char* kind, std::size_t slot, std::span<const double> row) {
      line.str("");
      line << kind << ',' << slot;
      for (double v : row) line << ',' << v;
      line << '\n';
      os << line.str();
    };
    for (std::size_t r = 0; r < value_rows(); ++r) emit("V", r, value(r));
    for (std::size_t n = 0; n < queue_size_; ++n) emit("Q", n, queue_entry(n));
  }

 private:
  struct Scores {
    std::vector<double> value;
    std::vector<double> queue;
    double log_partition = 0.0;
  };

  Scores score(std::span<const double> z) const {
    if (z.size() != dim()) throw ShapeError("memory: feature dimension mismatch");
    Scores s;
    s.value.resize(value_rows());
    s.queue.resize(queue_size_);
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < value_rows(); ++m) {
      s.value[m] = dot(values_.row(m), z) / tau_;
      peak = std::max(peak, s.value[m]);
    }
    for (std::size_t n = 0; n < queue_size_; ++n) {
      s.queue[n] = dot(queue_entry(n), z) / tau_;
      peak = std::max(peak, s.queue[n]);
    }
    double total = 0.0;
    for (double v : s.value) total += std::exp(v - peak);
    for (double v : s.queue) total += std::exp(v - peak);
    s.log_partition = peak + std::log(total);
    return s;
  }

  void check_unit(std::span<const double> z) const {
    if (z.size() != dim()) throw ShapeError("memory: feature dimension mismatch");
    const double n = norm2(z);
    if (!(std::abs(n - 1.0) <= kUnitTolerance)) {
      throw DegenerateVectorError("memory: feature is not unit norm (|z| = " +
                                  std::to_string(n) + ")");
    }
  }

  void check_row(std::size_t i) const {
    if (i >= value_rows()) throw BoundsError("memory: value row " + std::to_string(i) + " out of range");
  }

  Matrix values_;
  Matrix queue_;
  std::size_t head_ = 0;
  std::size_t queue_size_ = 0;
  double gamma_;
  double tau_;
};

}  // namespace scns
