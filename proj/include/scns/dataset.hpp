#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"

namespace scns {

struct Dataset {
  Matrix inputs;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  /// Class centroids for generated mixtures; doubles as label embeddings.
  std::optional<Matrix> centroids;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }

  bool operator==(const Dataset&) const = default;
};

/// Class centroids at uniformly random directions, scaled to `separation`.
inline Matrix mixture_centroids(std::size_t classes, std::size_t dim, double separation,
                                CounterRng& rng) {
  if (classes < 2 || dim < 2) throw BoundsError("dataset: need at least 2 classes and 2 dimensions");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw BoundsError("dataset: separation must be finite and non-negative");
  }
  Matrix c(classes, dim);
  for (std::size_t k = 0; k < classes; ++k) {
    auto row = c.row(k);
    double n = 0.0;
    do {
      for (double& v : row) v = rng.normal();
      n = norm2(row);
    } while (n == 0.0);
    for (double& v : row) v *= separation / n;
  }
  return c;
}

/// n_per_class points per class: centroid plus N(0, I) noise. Samples are
/// stored class by class.
inline Dataset sample_mixture(const Matrix& centroids, std::size_t n_per_class, CounterRng& rng) {
  Dataset d;
  d.classes = centroids.rows();
  d.inputs = Matrix(d.classes * n_per_class, centroids.cols());
  d.labels.reserve(d.classes * n_per_class);
  for (std::size_t k = 0; k < d.classes; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      auto row = d.inputs.row(d.labels.size());
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = centroids(k, c) + rng.normal();
      d.labels.push_back(k);
    }
  }
  d.centroids = centroids;
  return d;
}

/// Separation 0 puts every centroid at the origin (indistinguishable classes).
inline Dataset generate_gaussian_mixture(std::size_t classes, std::size_t n_per_class,
                                         std::size_t dim, double separation, CounterRng& rng) {
  if (n_per_class < 1) throw BoundsError("dataset: need at least one sample per class");
  const Matrix centroids = mixture_centroids(classes, dim, separation, rng);
  return sample_mixture(centroids, n_per_class, rng);
}

/// Class means of a labelled dataset; used as label embeddings when no
/// centroids or word vectors are available.
inline Matrix class_means(const Dataset& d) {
  Matrix m(d.classes, d.dim(), 0.0);
  std::vector<double> count(d.classes, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    axpy(1.0, d.inputs.row(i), m.row(d.labels[i]));
    count[d.labels[i]] += 1.0;
  }
  for (std::size_t k = 0; k < d.classes; ++k) {
    if (count[k] > 0.0) {
      for (double& v : m.row(k)) v /= count[k];
    }
  }
  return m;
}

/// Feature CSV: a header line (ignored), then "label,x0,x1,..." per row.
/// Labels are non-negative integers.
inline Dataset read_feature_csv(std::istream& is, std::size_t class_count = 0) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) throw ParseError("dataset: empty feature file", 1);
  ++line_no;
  Dataset d;
  std::vector<double> values;
  std::size_t cols = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    std::optional<std::size_t> label;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || !std::isfinite(v)) {
        throw ParseError("dataset: bad value '" + cell + "' on line " + std::to_string(line_no), line_no);
      }
      if (!label) {
        if (v < 0.0 || v != std::floor(v)) {
          throw ParseError("dataset: label must be a non-negative integer on line " +
                               std::to_string(line_no),
                           line_no);
        }
        label = static_cast<std::size_t>(v);
      } else {
        row.push_back(v);
      }
    }
    if (row.empty()) throw ParseError("dataset: no features on line " + std::to_string(line_no), line_no);
    if (cols == 0) cols = row.size();
    if (row.size() != cols) {
      throw ParseError("dataset: line " + std::to_string(line_no) + " has " + std::to_string(row.size()) +
                           " features, expected " + std::to_string(cols),
                       line_no);
    }
    values.insert(values.end(), row.begin(), row.end());
    d.labels.push_back(*label);
    d.classes = std::max(d.classes, *label + 1);
  }
  if (d.labels.empty()) throw ParseError("dataset: feature file has no rows", line_no);
  if (class_count != 0) {
    if (d.classes > class_count) throw ParseError("dataset: label exceeds declared class count", line_no);
    d.classes = class_count;
  }
  d.inputs = Matrix(d.labels.size(), cols, std::move(values));
  return d;
}

inline Dataset load_feature_csv(const std::string& path, std::size_t class_count = 0) {
  std::ifstream in(path);
  if (!in) throw Error("dataset: cannot open " + path);
  return read_feature_csv(in, class_count);
}

inline void write_feature_csv(std::ostream& os, const Dataset& d) {
  os << "label";
  for (std::size_t c = 0; c < d.dim(); ++c) os << ",x" << c;
  os << '\n';
  std::ostringstream line;
  line.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    line.str("");
    line << d.labels[i];
    for (double v : d.inputs.row(i)) line << ',' << v;
    line << '\n';
    os << line.str();
  }
}

}  // namespace scns
