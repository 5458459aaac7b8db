#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "scns/error.hpp"
#include "scns/matrix.hpp"

namespace scns {

/// Token vectors from a text file: a "count dim" header, then one
/// "token v1 ... v_dim" record per line.
struct WordVectors {
  std::size_t dim = 0;
  std::vector<std::string> tokens;
  Matrix vectors;
  std::unordered_map<std::string, std::size_t> lookup;
};

inline WordVectors read_word_vectors(std::istream& is) {
  WordVectors w;
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) throw ParseError("embeddings: empty file", 1);
  std::size_t count = 0;
  {
    std::istringstream ss(line);
    std::string extra;
    if (!(ss >> count >> w.dim) || (ss >> extra) || w.dim == 0) {
      throw ParseError("embeddings: line 1: header must be 'count dim'", 1);
    }
  }
  std::vector<double> values;
  values.reserve(count * w.dim);
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;
    const std::string at = "embeddings: line " + std::to_string(line_no) + ": ";
    std::string cell;
    std::size_t got = 0;
    while (ss >> cell) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size() || !std::isfinite(v)) throw ParseError(at + "bad value '" + cell + "'", line_no);
      if (++got <= w.dim) values.push_back(v);
    }
    if (got != w.dim) {
      throw ParseError(at + "token '" + token + "' has " + std::to_string(got) + " values, header says " +
                           std::to_string(w.dim),
                       line_no);
    }
    if (w.lookup.count(token)) throw ParseError(at + "duplicate token '" + token + "'", line_no);
    w.lookup.emplace(token, w.tokens.size());
    w.tokens.push_back(token);
  }
  if (w.tokens.size() != count) {
    throw ParseError("embeddings: header declares " + std::to_string(count) + " records, found " +
                         std::to_string(w.tokens.size()),
                     line_no);
  }
  w.vectors = Matrix(count, w.dim, std::move(values));
  return w;
}

/// One row per label. A multi-word label ("pickup truck") is the mean of its
/// token vectors. Every missing token is listed in a single error.
inline Matrix label_embeddings(const WordVectors& w, const std::vector<std::string>& labels) {
  Matrix out(labels.size(), w.dim, 0.0);
  std::vector<std::string> missing;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::istringstream ss(labels[r]);
    std::string token;
    std::size_t n = 0;
    while (ss >> token) {
      const auto it = w.lookup.find(token);
      if (it == w.lookup.end()) {
        missing.push_back(token);
        continue;
      }
      axpy(1.0, w.vectors.row(it->second), out.row(r));
      ++n;
    }
    if (n == 0 && labels[r].find_first_not_of(" \t") == std::string::npos) {
      throw Error("embeddings: label " + std::to_string(r) + " is empty");
    }
    if (n > 0) {
      for (double& v : out.row(r)) v /= static_cast<double>(n);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& t : missing) list += (list.empty() ? "" : ", ") + t;
    throw Error("embeddings: tokens missing from the embedding file: " + list);
  }
  return out;
}

inline Matrix load_word_embeddings(const std::string& path, const std::vector<std::string>& labels) {
  std::ifstream in(path);
  if (!in) throw Error("embeddings: cannot open " + path);
  return label_embeddings(read_word_vectors(in), labels);
}

}  // namespace scns
