#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/matrix.hpp"

namespace scns {

/// Per-entity top-k neighbours: neighbour ids, their similarity scores (sorted
/// non-increasing per row) and the softmax sampling probabilities over them.
class TopKNeighborTable {
 public:
  TopKNeighborTable() = default;
  TopKNeighborTable(std::size_t rows, std::size_t k)
      : rows_(rows), k_(k), indices_(rows * k), scores_(rows * k), probs_(rows * k) {}

  std::size_t rows() const { return rows_; }
  std::size_t k() const { return k_; }

  std::span<const std::size_t> indices(std::size_t r) const {
    return {indices_.data() + r * k_, k_};
  }
  std::span<const double> scores(std::size_t r) const {
    return {scores_.data() + r * k_, k_};
  }
  std::span<const double> probs(std::size_t r) const {
    return {probs_.data() + r * k_, k_};
  }
  std::span<std::size_t> indices(std::size_t r) { return {indices_.data() + r * k_, k_}; }
  std::span<double> scores(std::size_t r) { return {scores_.data() + r * k_, k_}; }
  std::span<double> probs(std::size_t r) { return {probs_.data() + r * k_, k_}; }

  friend bool operator==(const TopKNeighborTable&, const TopKNeighborTable&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t k_ = 0;
  std::vector<std::size_t> indices_;
  std::vector<double> scores_;
  std::vector<double> probs_;
};

/// u.v / (|u| |v|), clamped to [-1, 1].
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("embedding: cosine_similarity length mismatch (" +
                     std::to_string(u.size()) + " vs " + std::to_string(v.size()) + ")");
  }
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {
    throw DegenerateVectorError("embedding: cosine_similarity of a zero-norm vector");
  }
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline Vector row_norms(const EmbeddingMatrix& e) {
  Vector norms(e.rows());
  for (std::size_t r = 0; r < e.rows(); ++r) {
    norms[r] = norm2(e.row(r));
    if (norms[r] == 0.0) {
      throw DegenerateVectorError("embedding: row " + std::to_string(r) + " has zero norm",
                                  r);
    }
  }
  return norms;
}

inline EmbeddingMatrix l2_normalize_rows(const EmbeddingMatrix& e) {
  const Vector norms = row_norms(e);
  Matrix out(e.rows(), e.dim());
  for (std::size_t r = 0; r < e.rows(); ++r) {
    auto src = e.row(r);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / norms[r];
  }
  return EmbeddingMatrix(std::move(out));
}

/// All-pairs cosine similarity. The result is exactly symmetric with a unit
/// diagonal.
inline Matrix pairwise_similarity(const EmbeddingMatrix& e) {
  const EmbeddingMatrix unit = l2_normalize_rows(e);
  const std::size_t n = e.rows();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = std::clamp(dot(unit.row(i), unit.row(j)), -1.0, 1.0);
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  return s;
}

/// exp(sharpness * s_i) normalised over the vector, with max subtraction.
/// Larger sharpness concentrates mass on the highest scores.
inline Vector temperature_softmax(std::span<const double> scores, double sharpness) {
  if (scores.empty()) throw Error("embedding: temperature_softmax of an empty vector");
  if (!(sharpness > 0.0) || !std::isfinite(sharpness)) {
    throw BoundsError("embedding: sharpness must be positive and finite");
  }
  double peak = -std::numeric_limits<double>::infinity();
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error("embedding: non-finite score");
    peak = std::max(peak, sharpness * s);
  }
  Vector out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(sharpness * scores[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

/// Indices of the k largest `scores` among candidates accepted by `keep`,
/// ordered by score descending and then by index ascending.
inline std::vector<std::size_t> select_topk(
    std::span<const double> scores, std::size_t k,
    const std::function<bool(std::size_t)>& keep) {
  std::vector<std::size_t> candidates;
  candidates.reserve(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (keep(j)) candidates.push_back(j);
  }
  if (candidates.size() < k) {
    throw BoundsError("embedding: only " + std::to_string(candidates.size()) +
                      " candidates for k=" + std::to_string(k));
  }
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end(), better);
  candidates.resize(k);
  return candidates;
}

/// Top-k off-diagonal neighbours of every row of a square similarity matrix.
inline TopKNeighborTable topk_neighbors(const Matrix& similarity, std::size_t k,
                                        double sharpness) {
  const std::size_t n = similarity.rows();
  if (similarity.cols() != n) throw ShapeError("embedding: similarity matrix must be square");
  if (k < 1 || k + 1 > n) {
    throw BoundsError("embedding: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(n == 0 ? 0 : n - 1) + "]");
  }
  TopKNeighborTable table(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = similarity.row(i);
    const auto top = select_topk(row, k, [i](std::size_t j) { return j != i; });
    auto idx = table.indices(i);
    auto sc = table.scores(i);
    for (std::size_t r = 0; r < k; ++r) {
      idx[r] = top[r];
      sc[r] = row[top[r]];
    }
    const Vector p = temperature_softmax(sc, sharpness);
    std::copy(p.begin(), p.end(), table.probs(i).begin());
  }
  return table;
}

}  // namespace scns
