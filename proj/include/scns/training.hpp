#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "scns/contrast_memory.hpp"
#include "scns/dataset.hpp"
#include "scns/error.hpp"
#include "scns/gradient_check.hpp"
#include "scns/losses.hpp"
#include "scns/mlp.hpp"
#include "scns/sampling.hpp"
#include "scns/word_embeddings.hpp"

namespace scns {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t dim = 32;
  double separation = 3.0;
  std::size_t eval_per_class = 200;
  std::string features;          // CSV feature file instead of a generated mixture
  std::string eval_features;
  std::string label_embeddings;  // word-vector file for class-level sampling
  std::vector<std::string> class_names;
};

struct SamplerSpec {
  SamplerVariant variant = SamplerVariant::Uniform;
  std::size_t k = 3;
  double sharpness = 5.0;
  std::size_t negatives = 4;
};

enum class KdSimilarity { Pearson, Cka };

inline std::string to_string(KdSimilarity s) { return s == KdSimilarity::Pearson ? "pearson" : "cka"; }

inline KdSimilarity parse_kd_similarity(const std::string& s) {
  if (s == "pearson") return KdSimilarity::Pearson;
  if (s == "cka") return KdSimilarity::Cka;
  throw Error("training: unknown similarity '" + s + "' (expected pearson or cka)");
}

struct LossSpec {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma_plus = 0.0;
  double gamma_minus = 0.0;
  double zeta = 0.5;
  double margin = 0.5;
  double tau = 4.0;
  double nce_weight = 1.0;
  double triplet_weight = 0.0;
  KdSimilarity similarity = KdSimilarity::Pearson;
};

struct MemorySpec {
  std::size_t queue_size = 256;
  double gamma = 0.5;
  double tau = 0.07;
};

struct OptimizerSpec {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 0.1;
  double stop_at_train_acc = 0.0;  // 0 runs every epoch
};

struct ModelSpec {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t metric_dim = 32;
  std::vector<std::size_t> teacher_hidden{128, 128};
  std::size_t teacher_metric_dim = 32;
  std::size_t teacher_epochs = 30;
  std::string teacher_checkpoint;
  bool adapter = false;  // size the student's metric head to the teacher's
};

enum class TrainingMode { Supervised, Distill };

inline std::string to_string(TrainingMode m) { return m == TrainingMode::Supervised ? "supervised" : "kd"; }

inline TrainingMode parse_training_mode(const std::string& s) {
  if (s == "supervised") return TrainingMode::Supervised;
  if (s == "kd") return TrainingMode::Distill;
  throw Error("training: unknown mode '" + s + "' (expected supervised or kd)");
}

struct ConvergenceSpec {
  TrainingMode mode = TrainingMode::Supervised;
  std::vector<SamplerVariant> variants{SamplerVariant::Uniform, SamplerVariant::ClassScns,
                                       SamplerVariant::InstanceScns};
  std::size_t seeds = 5;
  double threshold = 0.95;
};

struct TheorySpec {
  std::size_t m = 10;
  std::size_t k = 3;
  std::size_t b = 1;
  std::uint64_t trials = 100000;
  std::vector<double> probs;
  std::size_t anchors = 50;
  double loss = 0.0;
};

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;
  DatasetSpec dataset;
  SamplerSpec sampler;
  LossSpec loss;
  MemorySpec memory;
  OptimizerSpec optimizer;
  ModelSpec model;
  ConvergenceSpec convergence;
  TheorySpec theory;
};

/// Out-of-range setting; `key()` is "[section].name" (or "seed").
class ConfigValueError : public BoundsError {
 public:
  ConfigValueError(const std::string& key, const std::string& what) : BoundsError(what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

namespace detail {

inline void require(bool ok, const std::string& key, const std::string& rule) {
  if (!ok) throw ConfigValueError(key, "config: " + key + " " + rule);
}

}  // namespace detail

/// Range checks; errors name the offending [section].key.
inline void validate(const ExperimentConfig& c) {
  using detail::require;
  if (!c.seed) throw ConfigValueError("seed", "config: seed missing");
  require(c.dataset.classes >= 2, "[dataset].classes", "must be at least 2");
  require(c.dataset.per_class >= 2, "[dataset].per_class", "must be at least 2");
  require(c.dataset.dim >= 2, "[dataset].dim", "must be at least 2");
  require(c.dataset.separation >= 0.0 && std::isfinite(c.dataset.separation), "[dataset].separation",
          "must be finite and >= 0");
  require(c.sampler.k >= 1, "[sampler].k", "must be at least 1");
  require(c.sampler.sharpness > 0.0, "[sampler].sharpness", "must be positive");
  require(c.sampler.negatives >= 1, "[sampler].negatives", "must be at least 1");
  require(c.loss.alpha >= 0.0 && c.loss.alpha <= 1.0, "[loss].alpha", "must lie in [0, 1]");
  require(c.loss.beta >= 0.0 && std::isfinite(c.loss.beta), "[loss].beta", "must be >= 0");
  require(c.loss.gamma_plus >= 0.0, "[loss].gamma_plus", "must be >= 0");
  require(c.loss.gamma_minus >= 0.0, "[loss].gamma_minus", "must be >= 0");
  require(c.loss.zeta >= 0.0 && c.loss.zeta <= 1.0, "[loss].zeta", "must lie in [0, 1]");
  require(c.loss.margin >= 0.0, "[loss].margin", "must be >= 0");
  require(c.loss.tau > 0.0, "[loss].tau", "must be positive");
  require(c.loss.nce_weight >= 0.0, "[loss].nce_weight", "must be >= 0");
  require(c.loss.triplet_weight >= 0.0, "[loss].triplet_weight", "must be >= 0");
  require(c.memory.queue_size >= 1, "[memory].queue_size", "must be at least 1");
  require(c.memory.gamma >= 0.0 && c.memory.gamma <= 1.0, "[memory].gamma", "must lie in [0, 1]");
  require(c.memory.tau > 0.0, "[memory].tau", "must be positive");
  require(c.optimizer.lr > 0.0, "[optimizer].lr", "must be positive");
  require(c.optimizer.momentum >= 0.0 && c.optimizer.momentum < 1.0, "[optimizer].momentum",
          "must lie in [0, 1)");
  require(c.optimizer.weight_decay >= 0.0, "[optimizer].weight_decay", "must be >= 0");
  require(c.optimizer.epochs >= 1, "[optimizer].epochs", "must be at least 1");
  require(c.optimizer.batch_size >= 1, "[optimizer].batch_size", "must be at least 1");
  require(c.optimizer.decay_factor > 0.0 && c.optimizer.decay_factor <= 1.0, "[optimizer].decay_factor",
          "must lie in (0, 1]");
  require(c.optimizer.stop_at_train_acc >= 0.0 && c.optimizer.stop_at_train_acc <= 1.0,
          "[optimizer].stop_at_train_acc", "must lie in [0, 1]");
  require(c.model.metric_dim >= 2, "[model].metric_dim", "must be at least 2");
  require(c.model.teacher_metric_dim >= 2, "[model].teacher_metric_dim", "must be at least 2");
  require(c.model.teacher_epochs >= 1, "[model].teacher_epochs", "must be at least 1");
  for (auto h : c.model.hidden) require(h >= 1, "[model].hidden", "widths must be positive");
  for (auto h : c.model.teacher_hidden) require(h >= 1, "[model].teacher_hidden", "widths must be positive");
  require(!c.convergence.variants.empty(), "[convergence].variants", "must list at least one sampler");
  require(c.convergence.seeds >= 1, "[convergence].seeds", "must be at least 1");
  require(c.convergence.threshold >= 0.0 && c.convergence.threshold < 1.0, "[convergence].threshold",
          "must lie in [0, 1)");
  require(c.theory.m >= 1, "[theory].m", "must be at least 1");
  require(c.theory.k >= 1 && c.theory.k <= c.theory.m, "[theory].k", "must lie in [1, m]");
  require(c.theory.b >= 1, "[theory].b", "must be at least 1");
  require(c.theory.trials >= 1, "[theory].trials", "must be at least 1");
  require(c.theory.anchors >= 1, "[theory].anchors", "must be at least 1");
}

// Random streams of one experiment seed. Keeping each consumer on its own
// stream means switching a loss term on or off never shifts the draws of
// another consumer.
enum Stream : std::uint64_t {
  kDataStream = 1,
  kEvalDataStream = 2,
  kInitStream = 3,
  kShuffleStream = 4,
  kSamplerStream = 5,
  kMixupStream = 6,
  kMemoryStream = 7,
  kTeacherInitStream = 8,
  kTeacherShuffleStream = 9,
};

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct PreparedData {
  Dataset train;
  Dataset eval;  // may be empty
  Matrix label_embeddings;
};

/// Generated mixture (or CSV features) for the config's seed. Label
/// embeddings come from the word vector file when one is configured, else the
/// mixture centroids, else the class means.
inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  const std::uint64_t seed = cfg.seed.value();
  if (cfg.dataset.features.empty()) {
    CounterRng rng(seed, kDataStream);
    d.train = generate_gaussian_mixture(cfg.dataset.classes, cfg.dataset.per_class, cfg.dataset.dim,
                                        cfg.dataset.separation, rng);
    if (cfg.dataset.eval_per_class > 0) {
      CounterRng eval_rng(seed, kEvalDataStream);
      d.eval = sample_mixture(*d.train.centroids, cfg.dataset.eval_per_class, eval_rng);
    }
    d.label_embeddings = *d.train.centroids;
  } else {
    d.train = load_feature_csv(cfg.dataset.features);
    if (!cfg.dataset.eval_features.empty()) {
      d.eval = load_feature_csv(cfg.dataset.eval_features, d.train.classes);
      if (d.eval.dim() != d.train.dim()) throw ShapeError("dataset: eval features have a different width");
    }
    d.label_embeddings = class_means(d.train);
  }
  if (!cfg.dataset.label_embeddings.empty()) {
    if (cfg.dataset.class_names.size() != d.train.classes) {
      throw ConfigValueError("[dataset].class_names",
                             "config: [dataset].class_names must name all " + std::to_string(d.train.classes) +
                                 " classes when [dataset].label_embeddings is set");
    }
    d.label_embeddings = load_word_embeddings(cfg.dataset.label_embeddings, cfg.dataset.class_names);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  std::int64_t wall_ms = 0;

  bool operator==(const EpochMetrics&) const = default;
};

struct MetricsLog {
  std::vector<EpochMetrics> rows;

  /// First epoch whose train accuracy reaches `threshold`.
  std::optional<std::size_t> epochs_to_threshold(double threshold) const {
    for (const auto& r : rows) {
      if (r.train_acc >= threshold) return r.epoch;
    }
    return std::nullopt;
  }

  /// Equality of everything except wall-clock time.
  bool same_trajectory(const MetricsLog& other) const {
    if (rows.size() != other.rows.size()) return false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& a = rows[i];
      const auto& b = other.rows[i];
      if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.train_acc != b.train_acc ||
          !(a.eval_acc == b.eval_acc || (std::isnan(a.eval_acc) && std::isnan(b.eval_acc)))) {
        return false;
      }
    }
    return true;
  }

  void write_csv(std::ostream& os) const {
    os << "epoch,train_loss,train_acc,eval_acc,wall_ms\n";
    std::ostringstream line;
    line.precision(9);
    for (const auto& r : rows) {
      line.str("");
      line << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.eval_acc << ','
           << r.wall_ms << '\n';
      os << line.str();
    }
  }
};

/// Fraction of rows whose argmax logit (lowest class id on ties) is the label.
inline double evaluate(const Mlp& net, const Dataset& data) {
  if (data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  const auto pred = Mlp::predict(net.forward(data.inputs).logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Frozen teacher outputs on the training set.
struct TeacherOutputs {
  Matrix logits;
  Matrix metric;
  Matrix hidden;
};

inline TeacherOutputs teacher_outputs(const Mlp& teacher, const Dataset& data) {
  ForwardCache c = teacher.forward(data.inputs);
  return {std::move(c.logits), std::move(c.metric), std::move(c.hidden)};
}

/// Sampled content of one minibatch: anchors, their positives and negatives,
/// and the mixup coefficient of every (anchor, negative) pair.
struct BatchPlan {
  std::vector<std::size_t> anchors;
  std::vector<std::size_t> positives;
  std::vector<std::vector<std::size_t>> negatives;
  std::vector<std::vector<double>> nu;
};

/// Which parts of the total loss are switched on.
struct ObjectiveTerms {
  bool contrastive = false;  // supervised: InfoNCE against the instance bank
  bool mixup = false;        // beta > 0
  bool kd_mixup = false;     // distill: alpha * tau^2 * KL on mixed logits
  bool memory_nce = false;   // distill: alpha * nce_weight * memory NCE
  bool positive_kd = false;  // distill: gamma_plus similarity term
  bool negative_kd = false;  // distill: gamma_minus similarity term
  bool triplet = false;      // distill: correlation triplet hinge

  bool needs_pairs() const {
    return contrastive || kd_mixup || memory_nce || positive_kd || negative_kd || triplet;
  }
  bool forwards_positives() const { return positive_kd || triplet; }
  bool forwards_negatives() const { return kd_mixup || memory_nce || negative_kd || triplet; }
};

inline ObjectiveTerms active_terms(const ExperimentConfig& cfg, TrainingMode mode) {
  ObjectiveTerms t;
  const auto& l = cfg.loss;
  if (mode == TrainingMode::Supervised) {
    t.contrastive = l.alpha > 0.0;
    t.mixup = t.contrastive && l.beta > 0.0;
  } else {
    t.kd_mixup = l.alpha > 0.0;
    t.mixup = t.kd_mixup && l.beta > 0.0;
    t.memory_nce = l.alpha > 0.0 && l.nce_weight > 0.0;
    t.positive_kd = l.gamma_plus > 0.0;
    t.negative_kd = l.gamma_minus > 0.0;
    t.triplet = l.triplet_weight > 0.0;
  }
  return t;
}

/// Read-only state an objective evaluation may consult.
struct ObjectiveState {
  const Dataset* train = nullptr;
  const ContrastMemory* bank = nullptr;    // supervised: one row per training sample
  const ContrastMemory* memory = nullptr;  // distill: one row per class plus queue
  const TeacherOutputs* teacher = nullptr;
};

struct BatchEvaluation {
  double loss = 0.0;
  Vector grads;
  ForwardCache cache;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(m.row(idx[i]).begin(), m.row(idx[i]).end(), out.row(i).begin());
  }
  return out;
}

/// Similarity between student and teacher feature sets: mean row-wise Pearson
/// correlation, or linear kernel alignment of the two sets. Returns the value
/// and the gradient on the student rows.
inline std::pair<double, Matrix> feature_similarity(const Matrix& student, const Matrix& teacher,
                                                    KdSimilarity kind) {
  Matrix grad(student.rows(), student.cols(), 0.0);
  if (kind == KdSimilarity::Cka) {
    const auto e = centered_alignment_eval(student, teacher, Kernel::Linear);
    grad.data() = e.grad("a");
    return {e.value, grad};
  }
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(student.rows());
  for (std::size_t r = 0; r < student.rows(); ++r) {
    const auto e = pearson_correlation(student.row(r), teacher.row(r));
    total += scale * e.value;
    axpy(scale, e.grad("u"), grad.row(r));
  }
  return {total, grad};
}

}  // namespace detail

/// Total loss of one minibatch and its gradient with respect to `params`.
/// Pure in `params`: memory, teacher and sampled plan are only read.
///
/// Row layout of the student forward pass: anchors, then positives (when a
/// term needs their student features), then negatives anchor by anchor.
inline BatchEvaluation evaluate_batch(const Mlp& net, const Vector& params, const BatchPlan& plan,
                                      const ObjectiveTerms& terms, const LossSpec& loss,
                                      const ObjectiveState& state) {
  const Dataset& data = *state.train;
  const std::size_t b = plan.anchors.size();
  const std::size_t m = terms.needs_pairs() && b > 0 ? plan.negatives[0].size() : 0;
  std::vector<std::size_t> rows(plan.anchors);
  const std::size_t pos_base = rows.size();
  if (terms.forwards_positives()) rows.insert(rows.end(), plan.positives.begin(), plan.positives.end());
  const std::size_t neg_base = rows.size();
  if (terms.forwards_negatives()) {
    for (const auto& negs : plan.negatives) rows.insert(rows.end(), negs.begin(), negs.end());
  }

  BatchEvaluation out;
  out.cache = net.forward(detail::gather_rows(data.inputs, rows), params);
  const ForwardCache& c = out.cache;
  out.grads.assign(params.size(), 0.0);
  Matrix d_logits(rows.size(), net.shape().classes, 0.0);
  Matrix d_metric;
  Matrix d_hidden;
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;

  // Hard-label term.
  const double ce_weight = 1.0 - loss.alpha;
  if (ce_weight > 0.0) {
    const double scale = ce_weight * inv_b;
    for (std::size_t r = 0; r < b; ++r) {
      const auto e = cross_entropy(c.logits.row(r), data.labels[plan.anchors[r]]);
      total += scale * e.value;
      axpy(scale, e.grad("logits"), d_logits.row(r));
    }
  }

  auto metric_grad = [&]() -> Matrix& {
    if (d_metric.empty()) d_metric = Matrix(rows.size(), net.shape().metric, 0.0);
    return d_metric;
  };

  if (terms.contrastive) {
    const ContrastMemory& bank = *state.bank;
    const double tau = bank.tau();
    const double scale = loss.alpha * inv_b;
    Matrix& dz = metric_grad();
    for (std::size_t r = 0; r < b; ++r) {
      const auto& negs = plan.negatives[r];
      const auto positive = bank.value(plan.positives[r]);
      Matrix neg(terms.mixup ? 2 * m : m, net.shape().metric);
      for (std::size_t j = 0; j < m; ++j) {
        const auto v = bank.value(negs[j]);
        std::copy(v.begin(), v.end(), neg.row(j).begin());
        if (terms.mixup) {
          // Pseudo-hard negative between the negative and the positive.
          const Vector mixed = mixup(v, positive, plan.nu[r][j]);
          std::copy(mixed.begin(), mixed.end(), neg.row(m + j).begin());
        }
      }
      const auto e = infonce(c.metric.row(r), positive, neg, tau);
      total += scale * e.value;
      axpy(scale, e.grad("z_star"), dz.row(r));
    }
  }

  if (terms.kd_mixup) {
    const TeacherOutputs& t = *state.teacher;
    const double scale = loss.alpha * loss.tau * loss.tau * inv_b / static_cast<double>(m);
    const std::size_t h = net.hidden_dim();
    Matrix mixed_hidden(b * m, h);
    Matrix teacher_target(b * m, net.shape().classes);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        const double nu = terms.mixup ? plan.nu[r][j] : 1.0;
        const std::size_t neg_row = neg_base + r * m + j;
        const Vector zh = mixup(c.hidden.row(neg_row), c.hidden.row(r), nu);
        std::copy(zh.begin(), zh.end(), mixed_hidden.row(r * m + j).begin());
        const Vector zt = mixup(t.logits.row(plan.negatives[r][j]), t.logits.row(plan.anchors[r]), nu);
        std::copy(zt.begin(), zt.end(), teacher_target.row(r * m + j).begin());
      }
    }
    const Matrix mixed_logits = linear_forward(params, net.classifier(), mixed_hidden);
    Matrix d_mixed(b * m, net.shape().classes, 0.0);
    for (std::size_t i = 0; i < b * m; ++i) {
      const auto e = mixup_kld(mixed_logits.row(i), teacher_target.row(i), loss.tau);
      total += scale * e.value;
      axpy(scale, e.grad("student"), d_mixed.row(i));
    }
    const Matrix dh = linear_backward(params, net.classifier(), mixed_hidden, d_mixed, out.grads);
    if (d_hidden.empty()) d_hidden = Matrix(rows.size(), h, 0.0);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        const double nu = terms.mixup ? plan.nu[r][j] : 1.0;
        axpy(nu, dh.row(r * m + j), d_hidden.row(neg_base + r * m + j));
        axpy(1.0 - nu, dh.row(r * m + j), d_hidden.row(r));
      }
    }
  }

  if (terms.memory_nce) {
    const ContrastMemory& mem = *state.memory;
    const double scale = loss.alpha * loss.nce_weight * inv_b;
    Matrix& dz = metric_grad();
    for (std::size_t r = 0; r < b; ++r) {
      if (c.metric_norm[r] == 0.0) continue;
      const auto e = mem.nce_loss_and_grad(c.metric.row(r), data.labels[plan.anchors[r]]);
      total += scale * e.value;
      axpy(scale, e.grad("z"), dz.row(r));
    }
  }

  if (terms.positive_kd || terms.negative_kd || terms.triplet) {
    const TeacherOutputs& t = *state.teacher;
    Matrix& dz = metric_grad();
    const std::size_t d = net.shape().metric;
    if (terms.positive_kd) {
      const Matrix zs(b, d, Vector(c.metric.data().begin() + pos_base * d,
                                   c.metric.data().begin() + (pos_base + b) * d));
      const Matrix zt = detail::gather_rows(t.metric, plan.positives);
      const auto [sim, g] = detail::feature_similarity(zs, zt, loss.similarity);
      total -= loss.gamma_plus * sim;
      for (std::size_t r = 0; r < b; ++r) axpy(-loss.gamma_plus, g.row(r), dz.row(pos_base + r));
    }
    if (terms.negative_kd) {
      const Matrix zs(b * m, d, Vector(c.metric.data().begin() + neg_base * d,
                                       c.metric.data().begin() + (neg_base + b * m) * d));
      std::vector<std::size_t> flat;
      for (const auto& negs : plan.negatives) flat.insert(flat.end(), negs.begin(), negs.end());
      const Matrix zt = detail::gather_rows(t.metric, flat);
      const auto [sim, g] = detail::feature_similarity(zs, zt, loss.similarity);
      total -= loss.gamma_minus * sim;
      for (std::size_t i = 0; i < b * m; ++i) axpy(-loss.gamma_minus, g.row(i), dz.row(neg_base + i));
    }
    if (terms.triplet) {
      const double scale = loss.triplet_weight * inv_b;
      for (std::size_t r = 0; r < b; ++r) {
        Matrix zs_minus(m, d), zt_minus(m, d);
        for (std::size_t j = 0; j < m; ++j) {
          const auto s = c.metric.row(neg_base + r * m + j);
          std::copy(s.begin(), s.end(), zs_minus.row(j).begin());
          const auto tt = t.metric.row(plan.negatives[r][j]);
          std::copy(tt.begin(), tt.end(), zt_minus.row(j).begin());
        }
        const auto e = pearson_triplet_loss(zs_minus, c.metric.row(pos_base + r), zt_minus,
                                            t.metric.row(plan.positives[r]), loss.zeta, loss.margin);
        total += scale * e.value;
        const auto& gm = e.grad("zs_minus");
        for (std::size_t j = 0; j < m; ++j) {
          axpy(scale, std::span<const double>(gm.data() + j * d, d), dz.row(neg_base + r * m + j));
        }
        axpy(scale, e.grad("zs_plus"), dz.row(pos_base + r));
      }
    }
  }

  net.backward(c, params, d_logits, d_metric, d_hidden, out.grads);
  out.loss = total;
  return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainingOptions {
  bool record_timing = true;
  bool preflight = true;
};

struct TrainResult {
  MetricsLog log;
  Mlp model;
  std::vector<std::string> warnings;
};

/// SGD with momentum and L2 weight decay: v <- mu v + (g + wd theta),
/// theta <- theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum(const OptimizerSpec& spec, std::size_t size) : spec_(spec), velocity_(size, 0.0) {}

  void step(Vector& params, const Vector& grads, std::size_t epoch) {
    double lr = spec_.lr;
    for (auto e : spec_.decay_epochs) {
      if (epoch > e) lr *= spec_.decay_factor;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i] + spec_.weight_decay * params[i];
      velocity_[i] = spec_.momentum * velocity_[i] + g;
      params[i] -= lr * velocity_[i];
    }
  }

 private:
  OptimizerSpec spec_;
  Vector velocity_;
};

inline MlpShape student_shape(const ExperimentConfig& cfg, const Dataset& train) {
  const std::size_t metric = cfg.model.adapter ? cfg.model.teacher_metric_dim : cfg.model.metric_dim;
  return {train.dim(), cfg.model.hidden, train.classes, metric};
}

inline MlpShape teacher_shape(const ExperimentConfig& cfg, const Dataset& train) {
  return {train.dim(), cfg.model.teacher_hidden, train.classes, cfg.model.teacher_metric_dim};
}

/// Negative sampler for the config's variant. Instance-level sampling needs the
/// teacher's trunk representations of the training set.
inline NegativeSamplingDistribution build_sampler(const ExperimentConfig& cfg, const PreparedData& data,
                                                  const Matrix* teacher_hidden) {
  DatasetIndex index(data.train.labels, data.train.classes);
  switch (cfg.sampler.variant) {
    case SamplerVariant::Uniform:
      return NegativeSamplingDistribution::uniform(std::move(index));
    case SamplerVariant::ClassScns:
      return build_class_scns(EmbeddingMatrix(data.label_embeddings), std::move(index), cfg.sampler.k,
                              cfg.sampler.sharpness);
    case SamplerVariant::InstanceScns:
      if (teacher_hidden == nullptr) throw Error("training: instance-level sampling needs a teacher");
      return build_instance_scns(EmbeddingMatrix(*teacher_hidden), std::move(index), cfg.sampler.k,
                                 cfg.sampler.sharpness);
  }
  throw Error("training: unknown sampler variant");
}

namespace detail {

inline void shuffle(std::vector<std::size_t>& order, CounterRng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
}

struct LoopSetup {
  TrainingMode mode = TrainingMode::Supervised;
  MlpShape shape;
  std::uint64_t init_stream = kInitStream;
  std::uint64_t shuffle_stream = kShuffleStream;
  std::size_t epochs = 0;
  const NegativeSamplingDistribution* sampler = nullptr;
  const TeacherOutputs* teacher = nullptr;
};

inline TrainResult run_training(const ExperimentConfig& cfg, const PreparedData& data, const LoopSetup& setup,
                                const TrainingOptions& opts) {
  const std::uint64_t seed = cfg.seed.value();
  const Dataset& train = data.train;
  if (train.size() < 2) throw BoundsError("training: need at least two training samples");
  const ObjectiveTerms terms = active_terms(cfg, setup.mode);
  if (terms.needs_pairs() && setup.sampler == nullptr) throw Error("training: objective needs a sampler");
  if (setup.mode == TrainingMode::Distill && setup.teacher == nullptr) throw Error("training: no teacher");
  if (setup.mode == TrainingMode::Distill && (terms.positive_kd || terms.negative_kd || terms.triplet) &&
      setup.teacher->metric.cols() != setup.shape.metric) {
    throw ShapeError("training: student metric dim " + std::to_string(setup.shape.metric) +
                     " differs from the teacher's " + std::to_string(setup.teacher->metric.cols()) +
                     "; set [model].adapter = true or match [model].metric_dim");
  }

  CounterRng init_rng(seed, setup.init_stream);
  CounterRng shuffle_rng(seed, setup.shuffle_stream);
  CounterRng sampler_rng(seed, kSamplerStream);
  CounterRng mixup_rng(seed, kMixupStream);
  CounterRng memory_rng(seed, kMemoryStream);

  TrainResult result;
  result.model = Mlp(setup.shape, init_rng);
  Mlp& net = result.model;
  SgdMomentum opt(cfg.optimizer, net.params().size());

  std::optional<ContrastMemory> bank, memory;
  if (terms.contrastive) {
    bank.emplace(train.size(), 1, setup.shape.metric, cfg.memory.gamma, cfg.memory.tau, memory_rng);
    // Warm start from the initial network so early negatives are real features.
    const ForwardCache c = net.forward(train.inputs);
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (c.metric_norm[i] > 0.0) bank->set_value(i, c.metric.row(i));
    }
  }
  if (terms.memory_nce) {
    memory.emplace(train.classes, cfg.memory.queue_size, setup.shape.metric, cfg.memory.gamma, cfg.memory.tau,
                   memory_rng);
  }
  const ObjectiveState state{&train, bank ? &*bank : nullptr, memory ? &*memory : nullptr, setup.teacher};

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = cfg.optimizer.batch_size;

  for (std::size_t epoch = 1; epoch <= setup.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0, batch_no = 0; first < order.size(); first += batch, ++batch_no) {
      BatchPlan plan;
      plan.anchors.assign(order.begin() + first, order.begin() + std::min(order.size(), first + batch));
      if (terms.needs_pairs()) {
        for (auto a : plan.anchors) {
          const auto cb = compose_batch(*setup.sampler, a, cfg.sampler.negatives, sampler_rng);
          plan.positives.push_back(cb.positive);
          plan.negatives.push_back(cb.negatives);
          std::vector<double> nu(cb.negatives.size(), 1.0);
          if (terms.mixup) {
            for (double& v : nu) v = sample_mixup(cfg.loss.beta, mixup_rng).nu;
          }
          plan.nu.push_back(std::move(nu));
        }
      }
      BatchEvaluation ev = evaluate_batch(net, net.params(), plan, terms, cfg.loss, state);
      if (!std::isfinite(ev.loss)) {
        throw DivergenceError("training: loss became " + std::to_string(ev.loss) + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch_no) +
                              "; lower [optimizer].lr");
      }
      loss_sum += ev.loss * static_cast<double>(plan.anchors.size());
      opt.step(net.params(), ev.grads, epoch);

      // Memory updates use the features of this step's forward pass.
      const ForwardCache& c = ev.cache;
      if (bank) {
        for (std::size_t r = 0; r < plan.anchors.size(); ++r) {
          if (c.metric_norm[r] == 0.0) continue;
          try {
            bank->momentum_update(plan.anchors[r], c.metric.row(r));
          } catch (const DegenerateVectorError&) {
            bank->set_value(plan.anchors[r], c.metric.row(r));
          }
        }
      }
      if (memory) {
        const auto pred = Mlp::predict(c.logits);
        for (std::size_t r = 0; r < plan.anchors.size(); ++r) {
          const std::size_t y = train.labels[plan.anchors[r]];
          if (pred[r] != y || c.metric_norm[r] == 0.0) continue;
          try {
            memory->momentum_update(y, c.metric.row(r));
          } catch (const DegenerateVectorError&) {
            memory->set_value(y, c.metric.row(r));
          }
        }
        const std::size_t neg_base = plan.anchors.size() * (terms.forwards_positives() ? 2 : 1);
        for (std::size_t i = neg_base; i < c.metric.rows(); ++i) {
          if (c.metric_norm[i] > 0.0) memory->enqueue(c.metric.row(i));
        }
      }
    }
    EpochMetrics row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.train_acc = evaluate(net, train);
    row.eval_acc = evaluate(net, data.eval);
    if (opts.record_timing) {
      row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                        .count();
    }
    result.log.rows.push_back(row);
    if (cfg.optimizer.stop_at_train_acc > 0.0 && row.train_acc >= cfg.optimizer.stop_at_train_acc) break;
  }
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient preflight
// ---------------------------------------------------------------------------

struct PreflightReport {
  GradientReport gradient;
  ObjectiveTerms terms;
};

/// Finite-difference check of the assembled loss for `mode` with the config's
/// active terms on a frozen mini-instance (3 classes x 4 samples, a small
/// student, random teacher outputs and memory). Throws if the relative error
/// reaches `tolerance`.
inline PreflightReport preflight_gradients(const ExperimentConfig& cfg, TrainingMode mode,
                                           double tolerance = 1e-4) {
  ExperimentConfig small = cfg;
  small.seed = cfg.seed.value_or(0);
  const ObjectiveTerms terms = active_terms(small, mode);
  CounterRng rng(small.seed.value(), 0xF11E);
  Dataset data = generate_gaussian_mixture(3, 4, 4, 2.0, rng);
  const std::size_t metric = 3;
  Mlp net({4, {6}, 3, metric}, rng);
  TeacherOutputs teacher;
  teacher.logits = Matrix(data.size(), 3);
  teacher.metric = Matrix(data.size(), metric);
  for (double& v : teacher.logits.data()) v = 2.0 * rng.normal();
  for (double& v : teacher.metric.data()) v = rng.normal();
  std::optional<ContrastMemory> bank, memory;
  if (terms.contrastive) {
    bank.emplace(data.size(), 1, metric, small.memory.gamma, small.memory.tau, rng);
  }
  if (terms.memory_nce) {
    memory.emplace(3, 4, metric, small.memory.gamma, small.memory.tau, rng);
    for (int i = 0; i < 3; ++i) {
      Vector u{rng.normal(), rng.normal(), rng.normal()};
      const double n = norm2(u);
      for (double& v : u) v /= n;
      memory->enqueue(u);
    }
  }
  const auto sampler = NegativeSamplingDistribution::uniform(DatasetIndex(data.labels));
  BatchPlan plan;
  plan.anchors = {0, 5, 10, 3};
  if (terms.needs_pairs()) {
    for (auto a : plan.anchors) {
      const auto cb = compose_batch(sampler, a, 2, rng);
      plan.positives.push_back(cb.positive);
      plan.negatives.push_back(cb.negatives);
      plan.nu.push_back({0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform()});
    }
  }
  const ObjectiveState state{&data, bank ? &*bank : nullptr, memory ? &*memory : nullptr, &teacher};
  LossFunction fn = [&](const GradientInputs& in) {
    const BatchEvaluation ev = evaluate_batch(net, in.at("params"), plan, terms, small.loss, state);
    LossEvaluation e;
    e.value = ev.loss;
    e.grads["params"] = ev.grads;
    return e;
  };
  PreflightReport report{check_gradient(fn, {{"params", net.params()}}, 1e-6, tolerance), terms};
  if (!report.gradient.pass) {
    throw Error("training: gradient preflight failed (relative error " +
                std::to_string(report.gradient.max_relative_error) + ")");
  }
  return report;
}

/// Teacher trained with cross-entropy only on its own streams.
inline Mlp train_teacher(const ExperimentConfig& cfg, const PreparedData& data,
                         const TrainingOptions& opts = {}) {
  ExperimentConfig t = cfg;
  t.loss = LossSpec{};
  t.optimizer.stop_at_train_acc = 0.0;
  detail::LoopSetup setup;
  setup.shape = teacher_shape(cfg, data.train);
  setup.init_stream = kTeacherInitStream;
  setup.shuffle_stream = kTeacherShuffleStream;
  setup.epochs = cfg.model.teacher_epochs;
  return detail::run_training(t, data, setup, opts).model;
}

/// Supervised training: (1 - alpha) CE + alpha InfoNCE with negatives from the
/// configured sampler, scored against a momentum bank of instance features.
/// With beta > 0 each negative also contributes a mixed pseudo-negative.
/// `teacher` is needed only for instance-level sampling.
inline TrainResult train_supervised(const ExperimentConfig& cfg, const PreparedData& data,
                                    const Mlp* teacher = nullptr, const TrainingOptions& opts = {}) {
  validate(cfg);
  if (opts.preflight) preflight_gradients(cfg, TrainingMode::Supervised);
  const ObjectiveTerms terms = active_terms(cfg, TrainingMode::Supervised);
  std::optional<NegativeSamplingDistribution> sampler;
  std::vector<std::string> warnings;
  if (terms.needs_pairs()) {
    std::optional<Matrix> hidden;
    if (cfg.sampler.variant == SamplerVariant::InstanceScns) {
      if (teacher == nullptr) throw Error("training: instance-level sampling needs a teacher");
      hidden = teacher->forward(data.train.inputs).hidden;
    }
    sampler = build_sampler(cfg, data, hidden ? &*hidden : nullptr);
    warnings = sampler->warnings();
  }
  detail::LoopSetup setup;
  setup.mode = TrainingMode::Supervised;
  setup.shape = student_shape(cfg, data.train);
  setup.epochs = cfg.optimizer.epochs;
  setup.sampler = sampler ? &*sampler : nullptr;
  TrainResult r = detail::run_training(cfg, data, setup, opts);
  r.warnings = std::move(warnings);
  return r;
}

/// Teacher-student distillation:
///   (1 - alpha) CE
///   + alpha [tau^2 KL(mixed teacher logits || student logits on mixed trunk
///            features) + nce_weight * memory NCE]
///   - gamma_plus sim(student, teacher on positives)
///   - gamma_minus sim(student, teacher on negatives)
///   + triplet_weight * correlation triplet hinge.
/// Mixtures pair each negative with its anchor, nu ~ Beta(beta, beta).
inline TrainResult train_kd(const ExperimentConfig& cfg, const PreparedData& data, const Mlp& teacher,
                            const TrainingOptions& opts = {}) {
  validate(cfg);
  if (teacher.shape().input != data.train.dim() || teacher.shape().classes != data.train.classes) {
    throw ShapeError("training: teacher does not match the dataset's input width or class count");
  }
  if (opts.preflight) preflight_gradients(cfg, TrainingMode::Distill);
  const TeacherOutputs outputs = teacher_outputs(teacher, data.train);
  const ObjectiveTerms terms = active_terms(cfg, TrainingMode::Distill);
  std::optional<NegativeSamplingDistribution> sampler;
  std::vector<std::string> warnings;
  if (terms.needs_pairs()) {
    sampler = build_sampler(cfg, data, &outputs.hidden);
    warnings = sampler->warnings();
  }
  detail::LoopSetup setup;
  setup.mode = TrainingMode::Distill;
  setup.shape = student_shape(cfg, data.train);
  setup.epochs = cfg.optimizer.epochs;
  setup.sampler = sampler ? &*sampler : nullptr;
  setup.teacher = &outputs;
  TrainResult r = detail::run_training(cfg, data, setup, opts);
  r.warnings = std::move(warnings);
  return r;
}

// ---------------------------------------------------------------------------
// Convergence comparison
// ---------------------------------------------------------------------------

struct ConvergenceRun {
  SamplerVariant variant = SamplerVariant::Uniform;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;  // nullopt: never reached the threshold
};

struct ConvergenceSummary {
  SamplerVariant variant = SamplerVariant::Uniform;
  double median = 0.0;  // infinity when unreached runs dominate
  double mean = 0.0;
};

struct ConvergenceTable {
  std::vector<ConvergenceRun> runs;
  std::vector<ConvergenceSummary> summary;

  const ConvergenceSummary& of(SamplerVariant v) const {
    for (const auto& s : summary) {
      if (s.variant == v) return s;
    }
    throw Error("training: no convergence summary for " + to_string(v));
  }

  void write_csv(std::ostream& os) const {
    os << "variant,seed,epochs_to_threshold\n";
    for (const auto& r : runs) {
      os << to_string(r.variant) << ',' << r.seed << ',';
      if (r.epochs) {
        os << *r.epochs;
      } else {
        os << "inf";
      }
      os << '\n';
    }
  }

  void write_summary_csv(std::ostream& os) const {
    os << "variant,median_epochs,mean_epochs\n";
    std::ostringstream line;
    line.precision(9);
    for (const auto& s : summary) {
      line.str("");
      line << to_string(s.variant) << ',' << s.median << ',' << s.mean << '\n';
      os << line.str();
    }
  }
};

/// Epochs until train accuracy reaches `cfg.convergence.threshold`, for every
/// sampler variant over seeds seed, seed+1, ..., with the supervised or the
/// distillation loop. Each seed shares its dataset and teacher across
/// variants; experiments run on `threads` workers.
inline ConvergenceTable convergence_experiment(const ExperimentConfig& cfg, unsigned threads = 1,
                                               const TrainingOptions& opts = {}) {
  validate(cfg);
  const auto& conv = cfg.convergence;
  struct Job {
    std::size_t seed_index;
    std::size_t variant_index;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < conv.seeds; ++s) {
    for (std::size_t v = 0; v < conv.variants.size(); ++v) jobs.push_back({s, v});
  }
  std::vector<ConvergenceRun> runs(jobs.size());
  std::vector<std::string> errors(jobs.size());

  // Shared per-seed inputs, built once up front.
  const bool needs_teacher =
      conv.mode == TrainingMode::Distill ||
      std::find(conv.variants.begin(), conv.variants.end(), SamplerVariant::InstanceScns) != conv.variants.end();
  std::vector<PreparedData> data(conv.seeds);
  std::vector<std::optional<Mlp>> teachers(conv.seeds);
  for (std::size_t s = 0; s < conv.seeds; ++s) {
    ExperimentConfig c = cfg;
    c.seed = cfg.seed.value() + s;
    data[s] = prepare_data(c);
    if (needs_teacher) teachers[s] = train_teacher(c, data[s], opts);
  }
  if (opts.preflight) preflight_gradients(cfg, conv.mode);
  TrainingOptions inner = opts;
  inner.preflight = false;

  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t j = first; j < jobs.size(); j += stride) {
      const auto [s, v] = jobs[j];
      ExperimentConfig c = cfg;
      c.seed = cfg.seed.value() + s;
      c.sampler.variant = conv.variants[v];
      c.optimizer.stop_at_train_acc = conv.threshold;
      try {
        const auto r = conv.mode == TrainingMode::Distill
                           ? train_kd(c, data[s], *teachers[s], inner)
                           : train_supervised(c, data[s], teachers[s] ? &*teachers[s] : nullptr, inner);
        runs[j] = {c.sampler.variant, *c.seed, r.log.epochs_to_threshold(conv.threshold)};
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, jobs.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }

  ConvergenceTable table;
  table.runs = std::move(runs);
  for (auto v : conv.variants) {
    std::vector<double> epochs;
    for (const auto& r : table.runs) {
      if (r.variant == v) {
        epochs.push_back(r.epochs ? static_cast<double>(*r.epochs) : std::numeric_limits<double>::infinity());
      }
    }
    std::sort(epochs.begin(), epochs.end());
    const std::size_t n = epochs.size();
    const double median = n % 2 == 1 ? epochs[n / 2] : 0.5 * (epochs[n / 2 - 1] + epochs[n / 2]);
    double mean = 0.0;
    for (double e : epochs) mean += e / static_cast<double>(n);
    table.summary.push_back({v, median, mean});
  }
  return table;
}

}  // namespace scns
