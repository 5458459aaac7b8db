#pragma once

#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scns/error.hpp"
#include "scns/matrix.hpp"
#include "scns/rng.hpp"

namespace scns {

/// Location of one affine map y = W x + b inside a flat parameter vector.
/// W is out x in, row-major.
struct LinearSlot {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight = 0;  // offset of W
  std::size_t bias = 0;    // offset of b
};

/// Y = X W^T + b for a batch X (rows are samples).
inline Matrix linear_forward(const Vector& params, const LinearSlot& s, const Matrix& x) {
  if (x.cols() != s.in) {
    throw ShapeError("mlp: layer expects " + std::to_string(s.in) + " inputs, got " +
                     std::to_string(x.cols()));
  }
  Matrix y(x.rows(), s.out);
  const double* w = params.data() + s.weight;
  const double* b = params.data() + s.bias;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.data().data() + i * s.in;
    double* yi = y.data().data() + i * s.out;
    for (std::size_t o = 0; o < s.out; ++o) {
      const double* wo = w + o * s.in;
      double acc = b[o];
      for (std::size_t k = 0; k < s.in; ++k) acc += wo[k] * xi[k];
      yi[o] = acc;
    }
  }
  return y;
}

/// Accumulates dW, db into `grads` and returns dX (when `want_dx`).
inline Matrix linear_backward(const Vector& params, const LinearSlot& s, const Matrix& x,
                              const Matrix& dy, Vector& grads, bool want_dx = true) {
  double* gw = grads.data() + s.weight;
  double* gb = grads.data() + s.bias;
  const double* w = params.data() + s.weight;
  Matrix dx = want_dx ? Matrix(x.rows(), s.in, 0.0) : Matrix();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.data().data() + i * s.in;
    const double* di = dy.data().data() + i * s.out;
    for (std::size_t o = 0; o < s.out; ++o) {
      const double g = di[o];
      if (g == 0.0) continue;
      gb[o] += g;
      double* gwo = gw + o * s.in;
      for (std::size_t k = 0; k < s.in; ++k) gwo[k] += g * xi[k];
      if (want_dx) {
        const double* wo = w + o * s.in;
        double* dxi = dx.data().data() + i * s.in;
        for (std::size_t k = 0; k < s.in; ++k) dxi[k] += g * wo[k];
      }
    }
  }
  return dx;
}

struct MlpShape {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::size_t classes = 0;
  std::size_t metric = 0;

  bool operator==(const MlpShape&) const = default;
};

/// Cached activations of one forward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;  // input to each trunk layer
  std::vector<Matrix> pre;     // pre-activation of each trunk layer
  Matrix hidden;               // trunk output h
  Matrix logits;               // classifier head W_c h + b_c
  Matrix metric_raw;           // metric head output before normalisation
  Matrix metric;               // unit-norm metric features z
  Vector metric_norm;
};

/// ReLU trunk followed by two linear heads on the trunk output: a classifier
/// (logits) and a metric head whose output is L2-normalised. All parameters
/// live in one flat vector so optimisers and gradient checks see one array.
class Mlp {
 public:
  Mlp() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation of weights and
  /// biases.
  Mlp(MlpShape shape, CounterRng& rng) : Mlp(std::move(shape)) {
    for (const auto& s : all_slots()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
      for (std::size_t i = 0; i < s.in * s.out; ++i) params_[s.weight + i] = bound * (2.0 * rng.uniform() - 1.0);
      for (std::size_t i = 0; i < s.out; ++i) params_[s.bias + i] = bound * (2.0 * rng.uniform() - 1.0);
    }
  }

  /// Zero parameters.
  explicit Mlp(MlpShape shape) : shape_(std::move(shape)) {
    if (shape_.input < 1 || shape_.classes < 1 || shape_.metric < 1) {
      throw BoundsError("mlp: input, class and metric dimensions must be positive");
    }
    std::size_t offset = 0;
    std::size_t in = shape_.input;
    auto add = [&](std::size_t out) {
      if (out < 1) throw BoundsError("mlp: layer widths must be positive");
      LinearSlot s{in, out, offset, offset + in * out};
      offset += in * out + out;
      return s;
    };
    for (auto w : shape_.hidden) {
      trunk_.push_back(add(w));
      in = w;
    }
    classifier_ = add(shape_.classes);
    metric_ = add(shape_.metric);
    params_.assign(offset, 0.0);
  }

  const MlpShape& shape() const { return shape_; }
  std::size_t hidden_dim() const { return shape_.hidden.empty() ? shape_.input : shape_.hidden.back(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  const std::vector<LinearSlot>& trunk() const { return trunk_; }
  const LinearSlot& classifier() const { return classifier_; }
  const LinearSlot& metric_head() const { return metric_; }

  std::vector<LinearSlot> all_slots() const {
    std::vector<LinearSlot> out(trunk_);
    out.push_back(classifier_);
    out.push_back(metric_);
    return out;
  }

  ForwardCache forward(const Matrix& x, const Vector& params) const {
    ForwardCache c;
    Matrix h = x;
    for (const auto& s : trunk_) {
      c.inputs.push_back(h);
      Matrix pre = linear_forward(params, s, h);
      h = pre;
      for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
      c.pre.push_back(std::move(pre));
    }
    c.hidden = std::move(h);
    c.logits = linear_forward(params, classifier_, c.hidden);
    c.metric_raw = linear_forward(params, metric_, c.hidden);
    c.metric = c.metric_raw;
    c.metric_norm.assign(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = c.metric.row(i);
      const double n = norm2(row);
      c.metric_norm[i] = n;
      // A zero metric output has no direction; leave it at zero.
      if (n > 0.0) {
        for (double& v : row) v /= n;
      }
    }
    return c;
  }
  ForwardCache forward(const Matrix& x) const { return forward(x, params_); }

  /// Backpropagates gradients on the logits, on the unit metric features and
  /// directly on the trunk output into `grads` (flat, same layout as params).
  /// Any of the upstream matrices may be empty (no contribution).
  void backward(const ForwardCache& c, const Vector& params, const Matrix& d_logits,
                const Matrix& d_metric, const Matrix& d_hidden, Vector& grads) const {
    const std::size_t rows = c.hidden.rows();
    Matrix dh(rows, hidden_dim(), 0.0);
    if (!d_hidden.data().empty()) dh = d_hidden;
    if (!d_logits.data().empty()) {
      const Matrix dx = linear_backward(params, classifier_, c.hidden, d_logits, grads, !trunk_.empty());
      if (!trunk_.empty()) add_into(dh, dx);
    }
    if (!d_metric.data().empty()) {
      // z = u / |u|  =>  du = (dz - z (z . dz)) / |u|
      Matrix du(rows, shape_.metric, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double n = c.metric_norm[i];
        if (n == 0.0) continue;
        const auto z = c.metric.row(i);
        const auto dz = d_metric.row(i);
        const double proj = dot(z, dz);
        for (std::size_t k = 0; k < shape_.metric; ++k) du(i, k) = (dz[k] - z[k] * proj) / n;
      }
      const Matrix dx = linear_backward(params, metric_, c.hidden, du, grads, !trunk_.empty());
      if (!trunk_.empty()) add_into(dh, dx);
    }
    for (std::size_t l = trunk_.size(); l-- > 0;) {
      for (std::size_t i = 0; i < dh.data().size(); ++i) {
        if (!(c.pre[l].data()[i] > 0.0)) dh.data()[i] = 0.0;
      }
      dh = linear_backward(params, trunk_[l], c.inputs[l], dh, grads, l > 0);
    }
  }

  /// Argmax of the logits per row; ties go to the lowest class id.
  static std::vector<std::size_t> predict(const Matrix& logits) {
    std::vector<std::size_t> out(logits.rows(), 0);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      const auto r = logits.row(i);
      for (std::size_t c = 1; c < r.size(); ++c) {
        if (r[c] > r[out[i]]) out[i] = c;
      }
    }
    return out;
  }

  // Checkpoint: a version line, the layer dims, then one parameter per line
  // with 17 significant digits so a reload is bit-exact.
  void save(std::ostream& os) const {
    os << "scns-mlp 1\n";
    os << "input " << shape_.input << "\nhidden";
    for (auto h : shape_.hidden) os << ' ' << h;
    os << "\nclasses " << shape_.classes << "\nmetric " << shape_.metric << "\nparams "
       << params_.size() << '\n';
    std::ostringstream line;
    line.precision(17);
    for (double p : params_) {
      line.str("");
      line << p << '\n';
      os << line.str();
    }
  }

  static Mlp load(std::istream& is) {
    std::string line;
    std::size_t line_no = 0;
    auto next = [&](const std::string& key) {
      if (!std::getline(is, line)) throw ParseError("checkpoint: truncated before '" + key + "'", line_no + 1);
      ++line_no;
      std::istringstream ss(line);
      std::string k;
      ss >> k;
      if (k != key) {
        throw ParseError("checkpoint: expected '" + key + "' on line " + std::to_string(line_no), line_no);
      }
      std::vector<std::size_t> values;
      std::size_t v = 0;
      while (ss >> v) values.push_back(v);
      return values;
    };
    const auto version = next("scns-mlp");
    if (version.size() != 1 || version[0] != 1) throw ParseError("checkpoint: unsupported version", 1);
    MlpShape shape;
    auto single = [&](const std::string& key) {
      const auto v = next(key);
      if (v.size() != 1) throw ParseError("checkpoint: '" + key + "' needs one value", line_no);
      return v[0];
    };
    shape.input = single("input");
    shape.hidden = next("hidden");
    shape.classes = single("classes");
    shape.metric = single("metric");
    const std::size_t count = single("params");
    Mlp m(shape);
    if (count != m.params_.size()) {
      throw ParseError("checkpoint: " + std::to_string(count) + " parameters do not fit the layer dims",
                       line_no);
    }
    for (double& p : m.params_) {
      if (!std::getline(is, line)) throw ParseError("checkpoint: truncated parameter list", line_no + 1);
      ++line_no;
      std::size_t used = 0;
      try {
        p = std::stod(line, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || !std::isfinite(p)) {
        throw ParseError("checkpoint: bad parameter on line " + std::to_string(line_no), line_no);
      }
    }
    return m;
  }

 private:
  static void add_into(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.data().size(); ++i) dst.data()[i] += src.data()[i];
  }

  MlpShape shape_;
  std::vector<LinearSlot> trunk_;
  LinearSlot classifier_;
  LinearSlot metric_;
  Vector params_;
};

}  // namespace scns
