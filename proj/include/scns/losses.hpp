#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/loss_evaluation.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"

namespace scns {

namespace detail {

inline double log_sum_exp(std::span<const double> x) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : x) peak = std::max(peak, v);
  double total = 0.0;
  for (double v : x) total += std::exp(v - peak);
  return peak + std::log(total);
}

/// log softmax(x / tau)
inline Vector log_softmax(std::span<const double> x, double tau) {
  Vector scaled(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) scaled[i] = x[i] / tau;
  const double lse = log_sum_exp(scaled);
  for (double& v : scaled) v -= lse;
  return scaled;
}

inline void require_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw BoundsError("losses: tau must be positive");
}

}  // namespace detail

/// Softmax at temperature tau followed by the negative log-likelihood of
/// `target`. Gradient key "logits" = (softmax - onehot) / tau.
inline LossEvaluation cross_entropy(std::span<const double> logits, std::size_t target,
                                    double tau = 1.0) {
  detail::require_temperature(tau);
  if (target >= logits.size()) {
    throw BoundsError("losses: target " + std::to_string(target) + " out of range for " +
                      std::to_string(logits.size()) + " classes");
  }
  const Vector logp = detail::log_softmax(logits, tau);
  LossEvaluation out;
  out.value = -logp[target];
  Vector g(logits.size());
  for (std::size_t c = 0; c < g.size(); ++c) {
    g[c] = (std::exp(logp[c]) - (c == target ? 1.0 : 0.0)) / tau;
  }
  out.grads["logits"] = std::move(g);
  return out;
}

/// KL(softmax(teacher/tau) || softmax(student/tau)). Only the student receives
/// a gradient (key "student").
inline LossEvaluation kld(std::span<const double> teacher_logits,
                          std::span<const double> student_logits, double tau) {
  detail::require_temperature(tau);
  if (teacher_logits.size() != student_logits.size()) {
    throw ShapeError("losses: kld over " + std::to_string(teacher_logits.size()) + " vs " +
                     std::to_string(student_logits.size()) + " classes");
  }
  const Vector logt = detail::log_softmax(teacher_logits, tau);
  const Vector logs = detail::log_softmax(student_logits, tau);
  LossEvaluation out;
  Vector g(logs.size());
  for (std::size_t c = 0; c < g.size(); ++c) {
    const double pt = std::exp(logt[c]);
    if (pt > 0.0) out.value += pt * (logt[c] - logs[c]);
    g[c] = (std::exp(logs[c]) - pt) / tau;
  }
  out.value = std::max(out.value, 0.0);
  out.grads["student"] = std::move(g);
  return out;
}

/// (1 - alpha) CE(student, target) + alpha tau^2 KL(teacher || student).
/// The hard-label term is taken at unit temperature, the soft term at tau.
inline LossEvaluation kd_combined(std::span<const double> student_logits,
                                  std::span<const double> teacher_logits, std::size_t target,
                                  double alpha, double tau) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw BoundsError("losses: alpha must lie in [0, 1]");
  LossEvaluation out;
  const LossEvaluation ce = cross_entropy(student_logits, target, 1.0);
  out.value = (1.0 - alpha) * ce.value;
  Vector g(student_logits.size());
  for (std::size_t c = 0; c < g.size(); ++c) g[c] = (1.0 - alpha) * ce.grad("logits")[c];
  if (alpha > 0.0) {
    const LossEvaluation soft = kld(teacher_logits, student_logits, tau);
    out.value += alpha * tau * tau * soft.value;
    for (std::size_t c = 0; c < g.size(); ++c) g[c] += alpha * tau * tau * soft.grad("student")[c];
  }
  out.grads["student"] = std::move(g);
  return out;
}

/// -log( e^{s+} / (e^{s+} + sum_m e^{s-_m}) ) with s = z_star . z / tau.
/// Gradient keys: "z_star", "z_plus", "negatives" (M x d, row-major).
inline LossEvaluation infonce(std::span<const double> z_star, std::span<const double> z_plus,
                              const Matrix& negatives, double tau = 1.0) {
  detail::require_temperature(tau);
  const std::size_t d = z_star.size();
  const std::size_t m = negatives.rows();
  if (m == 0) throw BoundsError("losses: infonce needs at least one negative");
  if (z_plus.size() != d || negatives.cols() != d) {
    throw ShapeError("losses: infonce dimension mismatch");
  }
  Vector s(m + 1);
  s[0] = dot(z_star, z_plus) / tau;
  for (std::size_t j = 0; j < m; ++j) s[j + 1] = dot(z_star, negatives.row(j)) / tau;
  const double lse = detail::log_sum_exp(s);
  LossEvaluation out;
  out.value = lse - s[0];
  Vector w(m + 1);
  for (std::size_t j = 0; j <= m; ++j) w[j] = std::exp(s[j] - lse);
  Vector g_star(d, 0.0), g_plus(d, 0.0), g_neg(m * d, 0.0);
  axpy((w[0] - 1.0) / tau, z_plus, g_star);
  axpy((w[0] - 1.0) / tau, z_star, g_plus);
  for (std::size_t j = 0; j < m; ++j) {
    axpy(w[j + 1] / tau, negatives.row(j), g_star);
    axpy(w[j + 1] / tau, z_star, std::span<double>(g_neg.data() + j * d, d));
  }
  out.grads["z_star"] = std::move(g_star);
  out.grads["z_plus"] = std::move(g_plus);
  out.grads["negatives"] = std::move(g_neg);
  return out;
}

/// Mixup coefficient. beta = 0 disables mixing (nu = 1).
struct MixupDraw {
  double beta = 0.0;
  double nu = 1.0;
};

inline MixupDraw sample_mixup(double beta, CounterRng& rng) {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw BoundsError("losses: beta must be >= 0");
  if (beta == 0.0) return {0.0, 1.0};
  return {beta, std::clamp(sample_beta(beta, beta, rng), 0.0, 1.0)};
}

/// nu z_i + (1 - nu) z_j
inline Vector mixup(std::span<const double> z_i, std::span<const double> z_j, double nu) {
  if (!(nu >= 0.0 && nu <= 1.0)) throw BoundsError("losses: nu must lie in [0, 1]");
  if (z_i.size() != z_j.size()) throw ShapeError("losses: mixup dimension mismatch");
  Vector out(z_i.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = nu * z_i[c] + (1.0 - nu) * z_j[c];
  return out;
}

/// KL divergence between the softened mixed teacher target and the student's
/// prediction on the mixed representation. Both arguments are logits: the
/// student's classifier output on the mixture and the mixture of the teacher's
/// logits. Gradient key "student".
inline LossEvaluation mixup_kld(std::span<const double> student_mix_logits,
                                std::span<const double> teacher_mix_target, double tau) {
  if (student_mix_logits.size() != teacher_mix_target.size()) {
    throw ShapeError("losses: mixup_kld class counts differ (" +
                     std::to_string(student_mix_logits.size()) + " vs " +
                     std::to_string(teacher_mix_target.size()) + ")");
  }
  return kld(teacher_mix_target, student_mix_logits, tau);
}

enum class Kernel { Linear, Rbf };

inline std::string to_string(Kernel k) { return k == Kernel::Linear ? "linear" : "rbf"; }

inline Kernel parse_kernel(const std::string& s) {
  if (s == "linear") return Kernel::Linear;
  if (s == "rbf") return Kernel::Rbf;
  throw Error("losses: unknown kernel '" + s + "'");
}

namespace detail {

/// Gram matrix of one representation set plus what is needed to pull a
/// gradient on it back to the rows.
struct GramSide {
  const Matrix* rows = nullptr;
  Kernel kernel = Kernel::Linear;
  Matrix raw;      // K
  Matrix aligned;  // K (linear) or H K H (rbf)
  Matrix sqdist;   // rbf only
  double bandwidth = 0.0;  // S^2, rbf only
  double norm = 0.0;       // |aligned|_F
};

inline Matrix double_center(const Matrix& k) {
  const std::size_t n = k.rows();
  Vector row_mean(n, 0.0), col_mean(n, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += k(i, j);
      col_mean[j] += k(i, j);
      all += k(i, j);
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  Matrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c(i, j) = k(i, j) - row_mean[i] * inv - col_mean[j] * inv + all * inv * inv;
    }
  }
  return c;
}

/// The RBF bandwidth S^2 is the total sample variance of the rows (sum of the
/// per-column unbiased variances), which equals half the mean squared distance
/// over ordered pairs of distinct rows.
inline GramSide build_gram(const Matrix& a, Kernel kernel) {
  GramSide g;
  g.rows = &a;
  g.kernel = kernel;
  const std::size_t n = a.rows();
  g.raw = Matrix(n, n);
  if (kernel == Kernel::Linear) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        g.raw(i, j) = g.raw(j, i) = dot(a.row(i), a.row(j));
      }
    }
    g.aligned = g.raw;
  } else {
    g.sqdist = Matrix(n, n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d2 = squared_distance(a.row(i), a.row(j));
        g.sqdist(i, j) = g.sqdist(j, i) = d2;
        total += 2.0 * d2;
      }
    }
    g.bandwidth = total / (2.0 * static_cast<double>(n) * static_cast<double>(n - 1));
    if (!(g.bandwidth > 0.0)) {
      throw DegenerateVectorError("losses: rbf bandwidth is zero (identical rows)");
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        g.raw(i, j) = std::exp(-g.sqdist(i, j) / (2.0 * g.bandwidth));
      }
    }
    g.aligned = double_center(g.raw);
  }
  g.norm = std::sqrt(dot(g.aligned.data(), g.aligned.data()));
  if (!(g.norm > 0.0)) throw DegenerateVectorError("losses: Gram matrix has zero norm");
  return g;
}

/// Pull df/d(aligned Gram) back to df/d(rows), row-major.
inline Vector backprop_gram(const GramSide& g, const Matrix& upstream) {
  const Matrix& a = *g.rows;
  const std::size_t n = a.rows();
  const std::size_t d = a.cols();
  Vector grad(n * d, 0.0);
  if (g.kernel == Kernel::Linear) {
    for (std::size_t p = 0; p < n; ++p) {
      std::span<double> out(grad.data() + p * d, d);
      for (std::size_t q = 0; q < n; ++q) {
        axpy(upstream(p, q) + upstream(q, p), a.row(q), out);
      }
    }
    return grad;
  }
  // H is symmetric, so d/dK = H (d/dC) H.
  const Matrix gk = double_center(upstream);
  const double s2 = g.bandwidth;
  double d_bandwidth = 0.0;
  Matrix e(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      const double t = gk(p, q) * g.raw(p, q);
      e(p, q) = -t / (2.0 * s2);
      d_bandwidth += t * g.sqdist(p, q) / (2.0 * s2 * s2);
    }
  }
  Vector mean(d, 0.0);
  for (std::size_t p = 0; p < n; ++p) axpy(1.0 / static_cast<double>(n), a.row(p), mean);
  for (std::size_t p = 0; p < n; ++p) {
    std::span<double> out(grad.data() + p * d, d);
    for (std::size_t q = 0; q < n; ++q) {
      const double w = 2.0 * (e(p, q) + e(q, p));
      for (std::size_t c = 0; c < d; ++c) out[c] += w * (a(p, c) - a(q, c));
    }
    const double w = d_bandwidth * 2.0 / static_cast<double>(n - 1);
    for (std::size_t c = 0; c < d; ++c) out[c] += w * (a(p, c) - mean[c]);
  }
  return grad;
}

}  // namespace detail

/// Kernel alignment between two representation sets with equal row counts.
/// Gradient keys "a" and "b" (row-major, shaped like the inputs).
///
/// Linear: <vec(A A^T), vec(B B^T)> / (|A A^T|_F |B B^T|_F), in [0, 1].
/// RBF: Gram matrices exp(-|x - y|^2 / 2S^2), double-centred, then aligned the
/// same way.
inline LossEvaluation centered_alignment_eval(const Matrix& a, const Matrix& b, Kernel kernel) {
  if (a.rows() != b.rows()) {
    throw ShapeError("losses: alignment needs equal row counts (" + std::to_string(a.rows()) +
                     " vs " + std::to_string(b.rows()) + ")");
  }
  if (a.rows() < 2) throw BoundsError("losses: alignment needs at least two rows");
  const detail::GramSide ga = detail::build_gram(a, kernel);
  const detail::GramSide gb = detail::build_gram(b, kernel);
  const double inner = dot(ga.aligned.data(), gb.aligned.data());
  const double f = inner / (ga.norm * gb.norm);
  const std::size_t n = a.rows();
  Matrix da(n, n), db(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      da(i, j) = gb.aligned(i, j) / (ga.norm * gb.norm) - f * ga.aligned(i, j) / (ga.norm * ga.norm);
      db(i, j) = ga.aligned(i, j) / (ga.norm * gb.norm) - f * gb.aligned(i, j) / (gb.norm * gb.norm);
    }
  }
  LossEvaluation out;
  out.value = f;
  out.grads["a"] = detail::backprop_gram(ga, da);
  out.grads["b"] = detail::backprop_gram(gb, db);
  return out;
}

inline double centered_alignment(const Matrix& a, const Matrix& b, Kernel kernel) {
  return centered_alignment_eval(a, b, kernel).value;
}

namespace detail {

inline void add_grad(LossEvaluation& out, const std::string& key, const std::vector<double>& g,
                     double scale) {
  auto& dst = out.grads[key];
  if (dst.empty()) dst.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
}

inline void require_hinge_params(double zeta, double margin) {
  if (!(zeta >= 0.0 && zeta <= 1.0)) throw BoundsError("losses: zeta must lie in [0, 1]");
  if (!(margin >= 0.0)) throw BoundsError("losses: margin must be non-negative");
}

}  // namespace detail

/// max(0, zeta l+ - (1 - zeta) l- + margin) with
///   l+ = CKA(zs_plus, zs_star) + CKA(zs_star, zt_star)
///   l- = CKA(zs_minus, zs_star) + CKA(zs_minus, zt_star).
/// Inputs are M x d sets. Gradient keys: zs_star, zs_plus, zs_minus, zt_star;
/// all zero when the hinge is inactive.
inline LossEvaluation triplet_cka_loss(const Matrix& zs_star, const Matrix& zs_plus,
                                       const Matrix& zs_minus, const Matrix& zt_star,
                                       double zeta, double margin, Kernel kernel) {
  detail::require_hinge_params(zeta, margin);
  const LossEvaluation pos_a = centered_alignment_eval(zs_plus, zs_star, kernel);
  const LossEvaluation pos_b = centered_alignment_eval(zs_star, zt_star, kernel);
  const LossEvaluation neg_a = centered_alignment_eval(zs_minus, zs_star, kernel);
  const LossEvaluation neg_b = centered_alignment_eval(zs_minus, zt_star, kernel);
  const double arg =
      zeta * (pos_a.value + pos_b.value) - (1.0 - zeta) * (neg_a.value + neg_b.value) + margin;
  LossEvaluation out;
  out.grads["zs_star"].assign(zs_star.data().size(), 0.0);
  out.grads["zs_plus"].assign(zs_plus.data().size(), 0.0);
  out.grads["zs_minus"].assign(zs_minus.data().size(), 0.0);
  out.grads["zt_star"].assign(zt_star.data().size(), 0.0);
  if (arg <= 0.0) return out;
  out.value = arg;
  detail::add_grad(out, "zs_plus", pos_a.grad("a"), zeta);
  detail::add_grad(out, "zs_star", pos_a.grad("b"), zeta);
  detail::add_grad(out, "zs_star", pos_b.grad("a"), zeta);
  detail::add_grad(out, "zt_star", pos_b.grad("b"), zeta);
  detail::add_grad(out, "zs_minus", neg_a.grad("a"), -(1.0 - zeta));
  detail::add_grad(out, "zs_star", neg_a.grad("b"), -(1.0 - zeta));
  detail::add_grad(out, "zs_minus", neg_b.grad("a"), -(1.0 - zeta));
  detail::add_grad(out, "zt_star", neg_b.grad("b"), -(1.0 - zeta));
  return out;
}

/// Pearson correlation of two equal-length vectors with gradient keys "u", "v".
inline LossEvaluation pearson_correlation(std::span<const double> u, std::span<const double> v) {
  const std::size_t n = u.size();
  if (v.size() != n) throw ShapeError("losses: pearson length mismatch");
  if (n < 2) throw BoundsError("losses: pearson needs at least two coordinates");
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= static_cast<double>(n);
  mv /= static_cast<double>(n);
  Vector uc(n), vc(n);
  for (std::size_t i = 0; i < n; ++i) {
    uc[i] = u[i] - mu;
    vc[i] = v[i] - mv;
  }
  const double su = norm2(uc);
  const double sv = norm2(vc);
  if (su == 0.0 || sv == 0.0) throw DegenerateVectorError("losses: pearson of a zero-variance vector");
  const double rho = std::clamp(dot(uc, vc) / (su * sv), -1.0, 1.0);
  LossEvaluation out;
  out.value = rho;
  Vector gu(n), gv(n);
  for (std::size_t i = 0; i < n; ++i) {
    gu[i] = vc[i] / (su * sv) - rho * uc[i] / (su * su);
    gv[i] = uc[i] / (su * sv) - rho * vc[i] / (sv * sv);
  }
  out.grads["u"] = std::move(gu);
  out.grads["v"] = std::move(gv);
  return out;
}

/// Correlation triplet, averaged over the negatives (rows of zs_minus and
/// zt_minus, paired row by row):
///   l+ = rho(zs_minus, zt_minus) + rho(zs_plus, zt_plus)
///   l- = rho(zs_minus, zs_plus) + rho(zs_minus, zt_plus)
///   l  = mean over negatives of max(0, zeta l+ - (1 - zeta) l- + margin).
/// Gradient keys: zs_minus, zs_plus, zt_minus, zt_plus.
inline LossEvaluation pearson_triplet_loss(const Matrix& zs_minus, std::span<const double> zs_plus,
                                           const Matrix& zt_minus, std::span<const double> zt_plus,
                                           double zeta, double margin) {
  detail::require_hinge_params(zeta, margin);
  const std::size_t m = zs_minus.rows();
  const std::size_t d = zs_plus.size();
  if (m == 0 || zt_minus.rows() != m) throw ShapeError("losses: negatives must pair up row by row");
  if (zs_minus.cols() != d || zt_minus.cols() != d || zt_plus.size() != d) {
    throw ShapeError("losses: pearson triplet dimension mismatch");
  }
  LossEvaluation out;
  out.grads["zs_minus"].assign(m * d, 0.0);
  out.grads["zt_minus"].assign(m * d, 0.0);
  out.grads["zs_plus"].assign(d, 0.0);
  out.grads["zt_plus"].assign(d, 0.0);
  const LossEvaluation pos_plus = pearson_correlation(zs_plus, zt_plus);
  const double scale = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < m; ++j) {
    const LossEvaluation pos_minus = pearson_correlation(zs_minus.row(j), zt_minus.row(j));
    const LossEvaluation neg_s = pearson_correlation(zs_minus.row(j), zs_plus);
    const LossEvaluation neg_t = pearson_correlation(zs_minus.row(j), zt_plus);
    const double arg = zeta * (pos_minus.value + pos_plus.value) -
                       (1.0 - zeta) * (neg_s.value + neg_t.value) + margin;
    if (arg <= 0.0) continue;
    out.value += scale * arg;
    std::span<double> gs(out.grads["zs_minus"].data() + j * d, d);
    std::span<double> gt(out.grads["zt_minus"].data() + j * d, d);
    axpy(scale * zeta, pos_minus.grad("u"), gs);
    axpy(scale * zeta, pos_minus.grad("v"), gt);
    axpy(scale * zeta, pos_plus.grad("u"), out.grads["zs_plus"]);
    axpy(scale * zeta, pos_plus.grad("v"), out.grads["zt_plus"]);
    const double w = -scale * (1.0 - zeta);
    axpy(w, neg_s.grad("u"), gs);
    axpy(w, neg_s.grad("v"), out.grads["zs_plus"]);
    axpy(w, neg_t.grad("u"), gs);
    axpy(w, neg_t.grad("v"), out.grads["zt_plus"]);
  }
  return out;
}

}  // namespace scns
