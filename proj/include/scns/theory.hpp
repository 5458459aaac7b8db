#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/quadrature/exp_sinh.hpp>

#include "scns/embedding.hpp"
#include "scns/error.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"
#include "scns/sampling.hpp"
#include "scns/stats.hpp"

namespace scns {

// ---------------------------------------------------------------------------
// Alignment weights and mutual-information bounds (natural log throughout).
// ---------------------------------------------------------------------------

using AlignmentFn = std::function<double(std::span<const double>, std::span<const double>)>;

/// (cos(u, v) + 1) / 2, which lies in [0, 1].
inline double cosine_alignment(std::span<const double> u, std::span<const double> v) {
  return 0.5 * (cosine_similarity(u, v) + 1.0);
}

/// One anchor with its top-k negatives and the remaining negatives.
struct AnchorNegatives {
  std::size_t anchor = 0;
  std::vector<std::size_t> topk;
  std::vector<std::size_t> rest;
};

struct AlignmentReport {
  Vector a_topk;            // mean alignment of the anchor to its top-k set
  Vector a_rest;            // mean alignment to the remaining negatives
  Vector omega_per_anchor;  // 1 - a_topk / (a_topk + a_rest)
  double omega_total = 0.0;
  double bound_uniform = 0.0;  // ln(M) - loss, M = number of anchors
  double bound_scns = 0.0;     // ln(2 omega_total) - loss
};

/// ln(M) - loss.
inline double mi_bound_uniform(double loss, std::size_t m) {
  if (m < 1) throw BoundsError("theory: M must be at least 1");
  return std::log(static_cast<double>(m)) - loss;
}

inline AlignmentReport alignment_report(const EmbeddingMatrix& reps,
                                        std::span<const AnchorNegatives> anchors, double loss,
                                        const AlignmentFn& alignment = cosine_alignment) {
  if (anchors.empty()) throw Error("theory: alignment_report needs at least one anchor");
  AlignmentReport out;
  auto mean_alignment = [&](std::size_t anchor, const std::vector<std::size_t>& set,
                            const char* what) {
    if (set.empty()) {
      throw Error(std::string("theory: empty ") + what + " set for anchor " +
                  std::to_string(anchor));
    }
    double total = 0.0;
    for (auto j : set) {
      if (j >= reps.rows()) throw BoundsError("theory: index " + std::to_string(j) + " out of range");
      const double a = alignment(reps.row(anchor), reps.row(j));
      if (!(a >= 0.0 && a <= 1.0)) {
        throw BoundsError("theory: alignment " + std::to_string(a) + " outside [0, 1]");
      }
      total += a;
    }
    return total / static_cast<double>(set.size());
  };
  for (const auto& entry : anchors) {
    if (entry.anchor >= reps.rows()) throw BoundsError("theory: anchor out of range");
    std::vector<std::size_t> a(entry.topk), b(entry.rest);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> shared;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(shared));
    if (!shared.empty()) throw Error("theory: top-k and rest sets overlap");
    const double ak = mean_alignment(entry.anchor, entry.topk, "top-k");
    const double ar = mean_alignment(entry.anchor, entry.rest, "rest");
    if (ak + ar == 0.0) throw DegenerateVectorError("theory: both alignments are zero");
    const double omega = 1.0 - ak / (ak + ar);
    out.a_topk.push_back(ak);
    out.a_rest.push_back(ar);
    out.omega_per_anchor.push_back(omega);
    out.omega_total += omega;
  }
  out.bound_uniform = mi_bound_uniform(loss, anchors.size());
  out.bound_scns = std::log(2.0 * out.omega_total) - loss;
  return out;
}

// ---------------------------------------------------------------------------
// Coupon-collector sample complexity.
// ---------------------------------------------------------------------------

struct CcpEstimate {
  double analytic = 0.0;
  double mc_mean = 0.0;
  double mc_ci95 = 0.0;
  std::uint64_t trials = 0;
};

struct MonteCarloOptions {
  std::uint64_t trials = 100000;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

/// Runs `trial` `trials` times. Trials are split into fixed chunks, chunk c
/// drawing from stream c of `seed`, and chunk statistics are merged in chunk
/// order, so the result does not depend on the thread count.
inline RunningStats run_monte_carlo(const MonteCarloOptions& opts,
                                    const std::function<double(CounterRng&)>& trial) {
  if (opts.trials < 1) throw BoundsError("theory: Monte Carlo needs at least one trial");
  constexpr std::uint64_t kChunk = 4096;
  const std::uint64_t chunks = (opts.trials + kChunk - 1) / kChunk;
  std::vector<RunningStats> partial(chunks);
  auto work = [&](std::uint64_t first, std::uint64_t stride) {
    for (std::uint64_t c = first; c < chunks; c += stride) {
      CounterRng rng(opts.seed, c);
      const std::uint64_t n = std::min(kChunk, opts.trials - c * kChunk);
      for (std::uint64_t t = 0; t < n; ++t) partial[c].add(trial(rng));
    }
  };
  const unsigned threads = std::max(1u, opts.threads);
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }
  RunningStats total;
  for (const auto& p : partial) total.merge(p);
  return total;
}

namespace detail {

/// Neumaier-compensated sum in extended precision.
class CompensatedSum {
 public:
  void add(long double x) {
    const long double t = sum_ + x;
    if (std::fabs(sum_) >= std::fabs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  long double value() const { return sum_ + comp_; }

 private:
  long double sum_ = 0.0L;
  long double comp_ = 0.0L;
};

inline CcpEstimate with_mc(double analytic, const RunningStats& s) {
  return {analytic, s.mean(), s.ci95(), s.count()};
}

}  // namespace detail

/// Expected uniform draws from M items until a fixed k-subset has been seen:
/// M * H_k.
inline double ccp_uniform_analytic(std::size_t m, std::size_t k) {
  if (k < 1 || k > m) {
    throw BoundsError("theory: need 1 <= k <= M (k=" + std::to_string(k) +
                      ", M=" + std::to_string(m) + ")");
  }
  double h = 0.0;
  for (std::size_t i = k; i >= 1; --i) h += 1.0 / static_cast<double>(i);
  return static_cast<double>(m) * h;
}

inline CcpEstimate ccp_uniform_draws(std::size_t m, std::size_t k,
                                     const MonteCarloOptions& opts = {}) {
  const double analytic = ccp_uniform_analytic(m, k);
  const auto stats = run_monte_carlo(opts, [m, k](CounterRng& rng) {
    std::vector<std::uint8_t> seen(k, 0);
    std::size_t remaining = k;
    std::uint64_t draws = 0;
    while (remaining > 0) {
      ++draws;
      const std::size_t r = rng.index(m);
      if (r < k && !seen[r]) {
        seen[r] = 1;
        --remaining;
      }
    }
    return static_cast<double>(draws);
  });
  return detail::with_mc(analytic, stats);
}

inline constexpr std::size_t kBatchedMaxM = 25;

/// Expected number of batches of b uniform draws (with replacement) until all
/// M items have appeared:
///   sum_{j=0}^{M-1} (-1)^{M-j+1} C(M, j) / (1 - (j/M)^b).
/// The alternating sum is evaluated in extended precision with compensated
/// summation and refused above M = 25.
inline double ccp_batched_analytic(std::size_t m, std::size_t b) {
  if (m < 1 || b < 1) throw BoundsError("theory: need M >= 1 and b >= 1");
  if (m > kBatchedMaxM) {
    throw PrecisionError("theory: batched coupon-collector sum is unreliable above M=" +
                         std::to_string(kBatchedMaxM) + " (got M=" + std::to_string(m) +
                         "); use the Monte Carlo estimate");
  }
  const long double mm = static_cast<long double>(m);
  detail::CompensatedSum sum;
  long double binom = 1.0L;  // C(M, j)
  for (std::size_t j = 0; j < m; ++j) {
    const long double ratio = std::pow(static_cast<long double>(j) / mm, static_cast<long double>(b));
    const long double sign = ((m - j + 1) % 2 == 0) ? 1.0L : -1.0L;
    sum.add(sign * binom / (1.0L - ratio));
    binom = binom * static_cast<long double>(m - j) / static_cast<long double>(j + 1);
  }
  return static_cast<double>(sum.value());
}

inline double simulate_batched_coverage(std::size_t m, std::size_t b, CounterRng& rng) {
  std::vector<std::uint8_t> seen(m, 0);
  std::size_t remaining = m;
  std::uint64_t batches = 0;
  while (remaining > 0) {
    ++batches;
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t r = rng.index(m);
      if (!seen[r]) {
        seen[r] = 1;
        --remaining;
      }
    }
  }
  return static_cast<double>(batches);
}

/// Batched coverage. Above M = 25 the analytic field is NaN and only the Monte
/// Carlo estimate is reported.
inline CcpEstimate ccp_batched(std::size_t m, std::size_t b, const MonteCarloOptions& opts = {}) {
  if (m < 1 || b < 1) throw BoundsError("theory: need M >= 1 and b >= 1");
  const double analytic =
      m > kBatchedMaxM ? std::numeric_limits<double>::quiet_NaN() : ccp_batched_analytic(m, b);
  const auto stats = run_monte_carlo(
      opts, [m, b](CounterRng& rng) { return simulate_batched_coverage(m, b, rng); });
  return detail::with_mc(analytic, stats);
}

inline constexpr std::size_t kInclusionExclusionMaxM = 20;

namespace detail {

inline void require_probability_vector(std::span<const double> probs) {
  if (probs.empty()) throw Error("theory: empty probability vector");
  double total = 0.0;
  for (double p : probs) {
    if (!(p > 0.0)) throw BoundsError("theory: probabilities must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw BoundsError("theory: probabilities sum to " + std::to_string(total) + ", not 1");
  }
}

}  // namespace detail

/// Max-min identity: sum over non-empty subsets S of (-1)^{|S|+1} / sum_{i in S} p_i.
inline double ccp_unequal_inclusion_exclusion(std::span<const double> probs) {
  detail::require_probability_vector(probs);
  const std::size_t m = probs.size();
  if (m > kInclusionExclusionMaxM) {
    throw PrecisionError("theory: inclusion-exclusion over 2^" + std::to_string(m) +
                         " subsets refused above M=" + std::to_string(kInclusionExclusionMaxM));
  }
  const std::uint32_t subsets = 1u << m;
  std::vector<long double> mass(subsets, 0.0L);
  detail::CompensatedSum sum;
  for (std::uint32_t s = 1; s < subsets; ++s) {
    const int low = std::countr_zero(s);
    mass[s] = mass[s & (s - 1)] + static_cast<long double>(probs[static_cast<std::size_t>(low)]);
    const long double term = 1.0L / mass[s];
    sum.add(std::popcount(s) % 2 == 1 ? term : -term);
  }
  return static_cast<double>(sum.value());
}

/// integral_0^inf (1 - prod_i (1 - e^{-p_i x})) dx by exp-sinh quadrature, after
/// rescaling x by the smallest probability so the integrand decays on a unit
/// scale.
inline double ccp_unequal_quadrature(std::span<const double> probs) {
  detail::require_probability_vector(probs);
  const double pmin = *std::min_element(probs.begin(), probs.end());
  std::vector<double> p(probs.begin(), probs.end());
  auto survival = [&p, pmin](double u) {
    const double x = u / pmin;
    double log_cdf = 0.0;
    for (double pi : p) log_cdf += std::log1p(-std::exp(-pi * x));
    return -std::expm1(log_cdf);
  };
  boost::math::quadrature::exp_sinh<double> integrator;
  double error = 0.0;
  const double value = integrator.integrate(survival, 1e-13, &error);
  return value / pmin;
}

/// Expected categorical draws until every item has been seen. Analytic value by
/// inclusion-exclusion up to M = 20, by quadrature above.
inline CcpEstimate ccp_unequal(std::span<const double> probs, const MonteCarloOptions& opts = {}) {
  detail::require_probability_vector(probs);
  const double analytic = probs.size() <= kInclusionExclusionMaxM
                              ? ccp_unequal_inclusion_exclusion(probs)
                              : ccp_unequal_quadrature(probs);
  std::vector<double> cumulative(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) cumulative[i] = (acc += probs[i]);
  const auto stats = run_monte_carlo(opts, [&cumulative](CounterRng& rng) {
    const std::size_t m = cumulative.size();
    std::vector<std::uint8_t> seen(m, 0);
    std::size_t remaining = m;
    std::uint64_t draws = 0;
    while (remaining > 0) {
      ++draws;
      const double u = rng.uniform() * cumulative.back();
      auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
      const std::size_t r = std::min<std::size_t>(it - cumulative.begin(), m - 1);
      if (!seen[r]) {
        seen[r] = 1;
        --remaining;
      }
    }
    return static_cast<double>(draws);
  });
  return detail::with_mc(analytic, stats);
}

/// Monte Carlo only: expected number of batches of `batch_size` draws from the
/// anchor's negative distribution until every target sample has appeared.
/// The analytic field is NaN.
inline CcpEstimate ccp_topk_coverage_mc(const NegativeSamplingDistribution& dist, std::size_t anchor,
                                        std::span<const std::size_t> targets,
                                        std::size_t batch_size, const MonteCarloOptions& opts) {
  if (targets.empty()) throw Error("theory: empty target set");
  if (batch_size < 1) throw BoundsError("theory: batch size must be at least 1");
  std::vector<std::size_t> sorted(targets.begin(), targets.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (auto t : sorted) {
    if (t >= dist.index().size() || dist.probability(anchor, t) <= 0.0) {
      throw Error("theory: target sample " + std::to_string(t) +
                  " is unreachable from anchor " + std::to_string(anchor));
    }
  }
  const auto stats = run_monte_carlo(opts, [&](CounterRng& rng) {
    std::vector<std::uint8_t> seen(sorted.size(), 0);
    std::size_t remaining = sorted.size();
    std::uint64_t batches = 0;
    while (remaining > 0) {
      ++batches;
      for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t s = dist.draw(anchor, rng).sample;
        auto it = std::lower_bound(sorted.begin(), sorted.end(), s);
        if (it != sorted.end() && *it == s) {
          auto& flag = seen[static_cast<std::size_t>(it - sorted.begin())];
          if (!flag) {
            flag = 1;
            --remaining;
          }
        }
      }
    }
    return static_cast<double>(batches);
  });
  return detail::with_mc(std::numeric_limits<double>::quiet_NaN(), stats);
}

}  // namespace scns
