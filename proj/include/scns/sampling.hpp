#pragma once

#include <algorithm>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scns/embedding.hpp"
#include "scns/error.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"

namespace scns {

/// Class membership of a labelled dataset.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  /// `class_count` of 0 means max(label) + 1.
  explicit DatasetIndex(std::vector<std::size_t> labels, std::size_t class_count = 0)
      : labels_(std::move(labels)) {
    std::size_t c = class_count;
    for (auto y : labels_) c = std::max(c, y + 1);
    if (class_count != 0 && c > class_count) {
      throw BoundsError("sampling: label exceeds declared class count " +
                        std::to_string(class_count));
    }
    members_.assign(c, {});
    for (std::size_t i = 0; i < labels_.size(); ++i) members_[labels_[i]].push_back(i);
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t class_count() const { return members_.size(); }
  std::size_t label(std::size_t i) const { return labels_.at(i); }
  const std::vector<std::size_t>& labels() const { return labels_; }
  const std::vector<std::size_t>& members(std::size_t c) const { return members_.at(c); }

 private:
  std::vector<std::size_t> labels_;
  std::vector<std::vector<std::size_t>> members_;
};

enum class SamplerVariant { Uniform, ClassScns, InstanceScns };

inline std::string to_string(SamplerVariant v) {
  switch (v) {
    case SamplerVariant::Uniform: return "uniform";
    case SamplerVariant::ClassScns: return "class";
    case SamplerVariant::InstanceScns: return "instance";
  }
  return "?";
}

inline SamplerVariant parse_sampler_variant(const std::string& s) {
  if (s == "uniform") return SamplerVariant::Uniform;
  if (s == "class") return SamplerVariant::ClassScns;
  if (s == "instance") return SamplerVariant::InstanceScns;
  throw Error("sampling: unknown sampler variant '" + s + "'");
}

/// One drawn negative and where it came from: for class-level sampling the
/// neighbour class and its rank, for instance-level the neighbour rank, for
/// uniform sampling only the sample's class.
struct NegativeDraw {
  std::size_t sample = 0;
  std::size_t source_class = 0;
  std::optional<std::size_t> rank;
};

struct ContrastiveBatch {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
  std::vector<NegativeDraw> provenance;
};

/// Anchor-conditioned negative sampling distribution.
///
/// Uniform: every sample outside the anchor's class is equally likely.
/// ClassScns: a neighbour class c is drawn from the anchor class's top-k row,
/// then a member of c uniformly. InstanceScns: a neighbour sample is drawn
/// from the anchor's own top-k row, whose candidates are other-class samples.
class NegativeSamplingDistribution {
 public:
  static NegativeSamplingDistribution uniform(DatasetIndex index) {
    NegativeSamplingDistribution d;
    d.variant_ = SamplerVariant::Uniform;
    d.index_ = std::move(index);
    return d;
  }

  SamplerVariant variant() const { return variant_; }
  const DatasetIndex& index() const { return index_; }
  const std::optional<TopKNeighborTable>& table() const { return table_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  /// Draw one negative for `anchor`.
  NegativeDraw draw(std::size_t anchor, CounterRng& rng) const {
    const std::size_t y = index_.label(anchor);
    switch (variant_) {
      case SamplerVariant::Uniform: {
        if (index_.members(y).size() == index_.size()) {
          throw Error("sampling: anchor " + std::to_string(anchor) +
                      " has no other-class samples");
        }
        while (true) {
          const std::size_t s = rng.index(index_.size());
          if (index_.label(s) != y) return {s, index_.label(s), std::nullopt};
        }
      }
      case SamplerVariant::ClassScns: {
        const std::size_t r = draw_rank(y, rng);
        const std::size_t c = table_->indices(y)[r];
        const auto& members = index_.members(c);
        return {members[rng.index(members.size())], c, r};
      }
      case SamplerVariant::InstanceScns: {
        const std::size_t r = draw_rank(anchor, rng);
        const std::size_t s = table_->indices(anchor)[r];
        return {s, index_.label(s), r};
      }
    }
    throw Error("sampling: unreachable variant");
  }

  /// Marginal probability that a single draw for `anchor` returns `sample`.
  double probability(std::size_t anchor, std::size_t sample) const {
    const std::size_t y = index_.label(anchor);
    const std::size_t ys = index_.label(sample);
    if (ys == y) return 0.0;
    switch (variant_) {
      case SamplerVariant::Uniform:
        return 1.0 / static_cast<double>(index_.size() - index_.members(y).size());
      case SamplerVariant::ClassScns: {
        double p = 0.0;
        const auto idx = table_->indices(y);
        const auto pr = table_->probs(y);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          if (idx[r] == ys && valid_[y]) {
            p += pr[r] / static_cast<double>(index_.members(ys).size());
          }
        }
        return p;
      }
      case SamplerVariant::InstanceScns: {
        double p = 0.0;
        const auto idx = table_->indices(anchor);
        const auto pr = table_->probs(anchor);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          if (idx[r] == sample) p += pr[r];
        }
        return p;
      }
    }
    return 0.0;
  }

 private:
  friend NegativeSamplingDistribution build_class_scns(const EmbeddingMatrix&, DatasetIndex,
                                                       std::size_t, double);
  friend NegativeSamplingDistribution build_instance_scns(const EmbeddingMatrix&,
                                                          DatasetIndex, std::size_t, double);

  std::size_t draw_rank(std::size_t row, CounterRng& rng) const {
    if (!valid_[row]) {
      throw Error("sampling: table row " + std::to_string(row) + " has no valid negatives");
    }
    const auto probs = table_->probs(row);
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t r = 0; r < probs.size(); ++r) {
      if (probs[r] <= 0.0) continue;
      acc += probs[r];
      last = r;
      if (u < acc) return r;
    }
    return last;
  }

  SamplerVariant variant_ = SamplerVariant::Uniform;
  DatasetIndex index_;
  std::optional<TopKNeighborTable> table_;
  std::vector<bool> valid_;
  std::vector<std::string> warnings_;
};

/// Class-level table from label embeddings: the top-k most similar classes of
/// each class, softmax-weighted at `sharpness`. Neighbour classes without any
/// samples get zero probability and the row is renormalised.
inline NegativeSamplingDistribution build_class_scns(const EmbeddingMatrix& label_embeddings,
                                                     DatasetIndex index, std::size_t k,
                                                     double sharpness) {
  const std::size_t c = index.class_count();
  if (label_embeddings.rows() != c) {
    throw ShapeError("sampling: " + std::to_string(label_embeddings.rows()) +
                     " label embeddings for " + std::to_string(c) + " classes");
  }
  if (k < 1 || k >= c) {
    throw BoundsError("sampling: class-level k=" + std::to_string(k) + " must lie in [1, " +
                      std::to_string(c - 1) + "]");
  }
  NegativeSamplingDistribution d;
  d.variant_ = SamplerVariant::ClassScns;
  d.table_ = topk_neighbors(pairwise_similarity(label_embeddings), k, sharpness);
  d.valid_.assign(c, true);
  for (std::size_t w = 0; w < c; ++w) {
    auto idx = d.table_->indices(w);
    auto probs = d.table_->probs(w);
    double kept = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      if (index.members(idx[r]).empty()) {
        d.warnings_.push_back("sampling: class " + std::to_string(idx[r]) +
                              " (neighbour of class " + std::to_string(w) +
                              ") has no members; skipped");
        probs[r] = 0.0;
      }
      kept += probs[r];
    }
    if (kept == 0.0) {
      d.valid_[w] = false;
      continue;
    }
    for (double& p : probs) p /= kept;
  }
  d.index_ = std::move(index);
  return d;
}

/// Instance-level table from teacher representations: for every sample, its
/// top-k most cosine-similar samples among those of other classes.
inline NegativeSamplingDistribution build_instance_scns(const EmbeddingMatrix& teacher_reps,
                                                        DatasetIndex index, std::size_t k,
                                                        double sharpness) {
  const std::size_t n = index.size();
  if (teacher_reps.rows() != n) {
    throw ShapeError("sampling: " + std::to_string(teacher_reps.rows()) +
                     " teacher representations for " + std::to_string(n) + " samples");
  }
  if (k < 1 || k + 1 > n) {
    throw BoundsError("sampling: instance-level k=" + std::to_string(k) +
                      " must lie in [1, " + std::to_string(n - 1) + "]");
  }
  const EmbeddingMatrix unit = l2_normalize_rows(teacher_reps);
  NegativeSamplingDistribution d;
  d.variant_ = SamplerVariant::InstanceScns;
  d.table_ = TopKNeighborTable(n, k);
  d.valid_.assign(n, true);
  Vector scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = index.label(i);
    if (n - index.members(y).size() < k) {
      throw BoundsError("sampling: sample " + std::to_string(i) + " has only " +
                        std::to_string(n - index.members(y).size()) +
                        " other-class candidates for k=" + std::to_string(k));
    }
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = std::clamp(dot(unit.row(i), unit.row(j)), -1.0, 1.0);
    }
    const auto top = select_topk(scores, k, [&](std::size_t j) { return index.label(j) != y; });
    auto idx = d.table_->indices(i);
    auto sc = d.table_->scores(i);
    for (std::size_t r = 0; r < k; ++r) {
      idx[r] = top[r];
      sc[r] = scores[top[r]];
    }
    const Vector p = temperature_softmax(sc, sharpness);
    std::copy(p.begin(), p.end(), d.table_->probs(i).begin());
  }
  d.index_ = std::move(index);
  return d;
}

/// M i.i.d. draws with replacement from the anchor-conditioned distribution.
inline std::vector<NegativeDraw> draw_negatives_traced(const NegativeSamplingDistribution& dist,
                                                       std::size_t anchor, std::size_t m,
                                                       CounterRng& rng) {
  if (m < 1) throw BoundsError("sampling: number of negatives must be at least 1");
  if (anchor >= dist.index().size()) {
    throw BoundsError("sampling: anchor " + std::to_string(anchor) + " out of range");
  }
  std::vector<NegativeDraw> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) out.push_back(dist.draw(anchor, rng));
  return out;
}

inline std::vector<std::size_t> draw_negatives(const NegativeSamplingDistribution& dist,
                                               std::size_t anchor, std::size_t m,
                                               CounterRng& rng) {
  std::vector<std::size_t> out;
  out.reserve(m);
  for (const auto& d : draw_negatives_traced(dist, anchor, m, rng)) out.push_back(d.sample);
  return out;
}

/// Anchor, a same-class positive drawn uniformly (excluding the anchor) and M
/// negatives.
inline ContrastiveBatch compose_batch(const NegativeSamplingDistribution& dist,
                                      std::size_t anchor, std::size_t m, CounterRng& rng) {
  const auto& index = dist.index();
  if (anchor >= index.size()) {
    throw BoundsError("sampling: anchor " + std::to_string(anchor) + " out of range");
  }
  const auto& same = index.members(index.label(anchor));
  if (same.size() < 2) {
    throw Error("sampling: anchor " + std::to_string(anchor) +
                " belongs to a singleton class; no positive exists");
  }
  ContrastiveBatch batch;
  batch.anchor = anchor;
  // Draw among size-1 slots; a hit on the anchor maps to the undrawn last slot.
  std::size_t pick = rng.index(same.size() - 1);
  if (same[pick] == anchor) pick = same.size() - 1;
  batch.positive = same[pick];
  batch.provenance = draw_negatives_traced(dist, anchor, m, rng);
  for (const auto& d : batch.provenance) batch.negatives.push_back(d.sample);
  return batch;
}

/// CSV form of a neighbour table: row_entity,rank,neighbor_entity,score,prob.
inline void write_distribution_csv(std::ostream& os, const NegativeSamplingDistribution& dist) {
  os << "row_entity,rank,neighbor_entity,score,prob\n";
  if (!dist.table()) return;
  const auto& t = *dist.table();
  std::ostringstream line;
  line.precision(9);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t j = 0; j < t.k(); ++j) {
      line.str("");
      line << r << ',' << j << ',' << t.indices(r)[j] << ',' << t.scores(r)[j] << ','
           << t.probs(r)[j] << '\n';
      os << line.str();
    }
  }
}

/// Parses the CSV written by write_distribution_csv back into a table.
inline TopKNeighborTable read_neighbor_table_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line) || line != "row_entity,rank,neighbor_entity,score,prob") {
    throw ParseError("sampling: missing neighbour-table CSV header", 1);
  }
  struct Entry {
    std::size_t row, rank, neighbor;
    double score, prob;
  };
  std::vector<Entry> entries;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    Entry e{};
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(ss >> e.row >> c1 >> e.rank >> c2 >> e.neighbor >> c3 >> e.score >> c4 >> e.prob) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw ParseError("sampling: malformed neighbour-table row on line " +
                       std::to_string(line_no), line_no);
    }
    entries.push_back(e);
  }
  std::size_t rows = 0, k = 0;
  for (const auto& e : entries) {
    rows = std::max(rows, e.row + 1);
    k = std::max(k, e.rank + 1);
  }
  if (entries.size() != rows * k) throw ParseError("sampling: incomplete neighbour table", 0);
  TopKNeighborTable t(rows, k);
  for (const auto& e : entries) {
    t.indices(e.row)[e.rank] = e.neighbor;
    t.scores(e.row)[e.rank] = e.score;
    t.probs(e.row)[e.rank] = e.prob;
  }
  return t;
}

}  // namespace scns
