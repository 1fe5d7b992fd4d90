#ifndef FEDPPD_MODEL_HPP
#define FEDPPD_MODEL_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedppd/autodiff.hpp"
#include "fedppd/error.hpp"
#include "fedppd/rng.hpp"
#include "fedppd/tensor.hpp"

namespace fedppd {

enum class Role { teacher, student };

inline const char* to_string(Role r) { return r == Role::teacher ? "teacher" : "student"; }

// ReLU MLP classifier: input -> hidden[0] -> ... -> classes logits.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t classes = 0;
  Role role = Role::teacher;

  // (fan_in, fan_out) of every dense layer, input to output.
  std::vector<std::pair<std::size_t, std::size_t>> layers() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t in = input_dim;
    for (std::size_t h : hidden) {
      out.emplace_back(in, h);
      in = h;
    }
    out.emplace_back(in, classes);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto [in, out] : layers()) n += in * out + out;
    return n;
  }

  void validate() const {
    if (classes < 2) throw ArgumentError("model spec: classes must be >= 2");
    if (input_dim < 1) throw ArgumentError("model spec: input_dim must be >= 1");
    for (std::size_t h : hidden) {
      if (h < 1) throw ArgumentError("model spec: hidden widths must be >= 1");
    }
  }

  // Same parameter layout; role is irrelevant for compatibility.
  bool same_layout(const ModelSpec& o) const {
    return input_dim == o.input_dim && hidden == o.hidden && classes == o.classes;
  }
};

// Flat parameter vector. Layout per layer: weights (fan_in x fan_out, row-major)
// followed by the fan_out biases.
struct ParamVector {
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(std::vector<double> v) : values(std::move(v)) {}
  explicit ParamVector(std::size_t n, double fill = 0.0) : values(n, fill) {}

  std::size_t size() const noexcept { return values.size(); }
  bool empty() const noexcept { return values.empty(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool all_finite() const noexcept {
    for (double v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

// Isotropic Gaussian prior N(0, precision^-1 I); normalization constants dropped.
struct PriorHyper {
  double precision = 0.0;

  double log_density(std::span<const double> params) const {
    double sq = 0.0;
    for (double v : params) sq += v * v;
    return -0.5 * precision * sq;
  }
};

inline void check_layout(const ModelSpec& spec, const ParamVector& params) {
  if (params.size() != spec.param_count()) {
    throw DimensionError("parameter vector has " + std::to_string(params.size()) +
                         " entries, model spec expects " + std::to_string(spec.param_count()));
  }
}

// Splits the flat vector into [W0, b0, W1, b1, ...].
inline std::vector<Matrix> unflatten(const ModelSpec& spec, const ParamVector& params) {
  check_layout(spec, params);
  std::vector<Matrix> out;
  auto it = params.values.begin();
  for (auto [in, outw] : spec.layers()) {
    out.emplace_back(in, outw, std::vector<double>(it, it + static_cast<std::ptrdiff_t>(in * outw)));
    it += static_cast<std::ptrdiff_t>(in * outw);
    out.emplace_back(1, outw, std::vector<double>(it, it + static_cast<std::ptrdiff_t>(outw)));
    it += static_cast<std::ptrdiff_t>(outw);
  }
  return out;
}

inline ParamVector flatten(std::span<const Matrix> layers) {
  ParamVector out;
  for (const Matrix& m : layers) out.values.insert(out.values.end(), m.data().begin(), m.data().end());
  return out;
}

// Kaiming-style uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline ParamVector init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  ParamVector out;
  out.values.reserve(spec.param_count());
  for (auto [in, outw] : spec.layers()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < in * outw; ++i) out.values.push_back(rng.uniform(-bound, bound));
    out.values.insert(out.values.end(), outw, 0.0);
  }
  return out;
}

inline void check_inputs(const ModelSpec& spec, const Matrix& inputs) {
  if (inputs.cols() != spec.input_dim) {
    throw DimensionError("inputs have width " + std::to_string(inputs.cols()) +
                         ", model expects " + std::to_string(spec.input_dim));
  }
}

// Logits for a batch of inputs (one row each). Tape-free fast path.
inline Matrix forward(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs) {
  check_layout(spec, params);
  check_inputs(spec, inputs);
  const auto layers = unflatten(spec, params);
  Matrix h = inputs;
  for (std::size_t l = 0; l < layers.size(); l += 2) {
    h = ops::add_bias(ops::matmul(h, layers[l]), layers[l + 1]);
    if (l + 2 < layers.size()) h = ops::relu(h);
  }
  return h;
}

inline Matrix predict_proba(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs) {
  return ops::softmax(forward(spec, params, inputs));
}

inline Matrix one_hot(std::span<const int> labels, std::size_t classes) {
  Matrix out(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ArgumentError("label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    out(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

// The model recorded on a tape: one leaf per weight/bias block plus the logits.
struct TapedModel {
  std::vector<Var> leaves;
  Var logits;

  ParamVector gradient(const Tape& tape) const {
    ParamVector g;
    for (Var v : leaves) {
      const Matrix m = tape.grad(v);
      g.values.insert(g.values.end(), m.data().begin(), m.data().end());
    }
    return g;
  }

  // sum over all parameter entries of v^2, as a tape node.
  Var squared_norm(Tape& tape) const {
    Var acc = tape.sum(tape.mul(leaves[0], leaves[0]));
    for (std::size_t i = 1; i < leaves.size(); ++i) {
      acc = tape.add(acc, tape.sum(tape.mul(leaves[i], leaves[i])));
    }
    return acc;
  }
};

inline TapedModel record_forward(Tape& tape, const ModelSpec& spec, const ParamVector& params,
                                 const Matrix& inputs) {
  check_inputs(spec, inputs);
  TapedModel m;
  for (Matrix& block : unflatten(spec, params)) m.leaves.push_back(tape.leaf(std::move(block)));
  Var h = tape.leaf(inputs);
  for (std::size_t l = 0; l < m.leaves.size(); l += 2) {
    h = tape.add_bias(tape.matmul(h, m.leaves[l]), m.leaves[l + 1]);
    if (l + 2 < m.leaves.size()) h = tape.relu(h);
  }
  m.logits = h;
  return m;
}

struct ValueAndGrad {
  double value = 0.0;
  ParamVector grad;
};

// Unnormalized log posterior estimate from a minibatch:
//   -(lambda/2)||params||^2 + (N/M) * sum_{(x,y) in batch} log p(y|x, params)
inline ValueAndGrad log_joint_and_grad(const ModelSpec& spec, const ParamVector& params,
                                       const Matrix& inputs, std::span<const int> labels,
                                       const PriorHyper& prior, std::size_t dataset_size) {
  if (inputs.rows() == 0) throw ArgumentError("log_joint: empty minibatch");
  if (labels.size() != inputs.rows()) {
    throw DimensionError("log_joint: " + std::to_string(inputs.rows()) + " inputs but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (inputs.rows() > dataset_size) throw ArgumentError("log_joint: minibatch larger than dataset");
  Tape tape;
  TapedModel m = record_forward(tape, spec, params, inputs);
  Var targets = tape.leaf(one_hot(labels, spec.classes));
  Var ce = tape.cross_entropy_soft(targets, tape.log_softmax(m.logits));
  const double ratio = static_cast<double>(dataset_size) / static_cast<double>(inputs.rows());
  Var out = tape.scale(ce, -ratio);
  if (prior.precision != 0.0) {
    out = tape.add(out, tape.scale(m.squared_norm(tape), -0.5 * prior.precision));
  }
  tape.backward(out);
  return {tape.scalar(out), m.gradient(tape)};
}

inline double log_joint(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs,
                        std::span<const int> labels, const PriorHyper& prior,
                        std::size_t dataset_size) {
  if (inputs.rows() == 0) throw ArgumentError("log_joint: empty minibatch");
  if (labels.size() != inputs.rows()) throw DimensionError("log_joint: label count mismatch");
  if (inputs.rows() > dataset_size) throw ArgumentError("log_joint: minibatch larger than dataset");
  const Matrix lp = ops::log_softmax(forward(spec, params, inputs));
  double ll = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) ll += lp(i, static_cast<std::size_t>(labels[i]));
  const double ratio = static_cast<double>(dataset_size) / static_cast<double>(inputs.rows());
  return ratio * ll + prior.log_density(params.values);
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j] > r[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fedppd

#endif  // FEDPPD_MODEL_HPP
