#ifndef FEDPPD_AUTODIFF_HPP
#define FEDPPD_AUTODIFF_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedppd/error.hpp"
#include "fedppd/tensor.hpp"

namespace fedppd {

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class OpKind {
  leaf,
  matmul,
  add_bias,
  add,
  mul,
  relu,
  softmax,
  log_softmax,
  cross_entropy_soft,
  scale,
  sum,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add_bias: return "add_bias";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::cross_entropy_soft: return "cross_entropy_soft";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
  }
  return "?";
}

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
// node list is already topologically sorted and backward() walks it once in
// reverse.
class Tape {
 public:
  Var leaf(Matrix value) { return push(OpKind::leaf, std::move(value), 0, 0, 0.0); }

  Var matmul(Var a, Var b) { return push(OpKind::matmul, ops::matmul(val(a), val(b)), a.id, b.id); }
  Var add_bias(Var a, Var bias) {
    return push(OpKind::add_bias, ops::add_bias(val(a), val(bias)), a.id, bias.id);
  }
  Var add(Var a, Var b) { return push(OpKind::add, ops::add(val(a), val(b)), a.id, b.id); }
  Var mul(Var a, Var b) { return push(OpKind::mul, ops::mul(val(a), val(b)), a.id, b.id); }
  Var relu(Var a) { return push(OpKind::relu, ops::relu(val(a)), a.id); }
  Var softmax(Var a) { return push(OpKind::softmax, ops::softmax(val(a)), a.id); }
  Var log_softmax(Var a) { return push(OpKind::log_softmax, ops::log_softmax(val(a)), a.id); }
  Var cross_entropy_soft(Var targets, Var log_probs) {
    return push(OpKind::cross_entropy_soft, ops::cross_entropy_soft(val(targets), val(log_probs)),
                targets.id, log_probs.id);
  }
  Var scale(Var a, double s) { return push(OpKind::scale, ops::scale(val(a), s), a.id, 0, s); }
  Var sum(Var a) { return push(OpKind::sum, ops::sum(val(a)), a.id); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw DimensionError("scalar: node is " + m.shape());
    return m(0, 0);
  }

  // Adjoint of `v` after backward(); zeros if the node does not influence the output.
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.adjoint.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var output) {
    if (value(output).size() != 1) {
      throw DimensionError("backward: output must be 1x1, got " + value(output).shape());
    }
    for (auto& n : nodes_) n.adjoint = Matrix();
    nodes_[output.id].adjoint = Matrix(1, 1, 1.0);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.adjoint.empty() || n.kind == OpKind::leaf) continue;
      propagate(n);
      if (!n.adjoint.all_finite()) {
        throw NumericError(std::string("non-finite adjoint at op ") + op_name(n.kind));
      }
    }
  }

 private:
  struct Node {
    OpKind kind;
    Matrix value;
    std::size_t a;
    std::size_t b;
    double scalar;
    Matrix adjoint;
  };

  const Matrix& val(Var v) const { return nodes_.at(v.id).value; }

  Var push(OpKind kind, Matrix value, std::size_t a = 0, std::size_t b = 0, double s = 0.0) {
    if (kind != OpKind::leaf && !value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op ") + op_name(kind));
    }
    nodes_.push_back(Node{kind, std::move(value), a, b, s, Matrix()});
    return Var{nodes_.size() - 1};
  }

  Matrix& adj(std::size_t id) {
    Node& n = nodes_[id];
    if (n.adjoint.empty()) n.adjoint = Matrix(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  static void accumulate(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
  }

  void propagate(const Node& n) {
    const Matrix& g = n.adjoint;
    switch (n.kind) {
      case OpKind::leaf:
        break;
      case OpKind::matmul: {
        const Matrix da = ops::matmul_nt(g, nodes_[n.b].value);
        const Matrix db = ops::matmul_tn(nodes_[n.a].value, g);
        accumulate(adj(n.a), da);
        accumulate(adj(n.b), db);
        break;
      }
      case OpKind::add_bias: {
        accumulate(adj(n.a), g);
        Matrix& db = adj(n.b);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < g.cols(); ++j) db(0, j) += g(i, j);
        }
        break;
      }
      case OpKind::add:
        accumulate(adj(n.a), g);
        accumulate(adj(n.b), g);
        break;
      case OpKind::mul: {
        const Matrix da = ops::mul(g, nodes_[n.b].value);
        const Matrix db = ops::mul(g, nodes_[n.a].value);
        accumulate(adj(n.a), da);
        accumulate(adj(n.b), db);
        break;
      }
      case OpKind::relu: {
        const Matrix& x = nodes_[n.a].value;
        Matrix& da = adj(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x.data()[i] > 0.0) da.data()[i] += g.data()[i];
        }
        break;
      }
      case OpKind::softmax: {
        const Matrix& s = n.value;
        Matrix& da = adj(n.a);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * s(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j) da(i, j) += s(i, j) * (g(i, j) - dot);
        }
        break;
      }
      case OpKind::log_softmax: {
        const Matrix& ls = n.value;
        Matrix& da = adj(n.a);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) gsum += g(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j) da(i, j) += g(i, j) - std::exp(ls(i, j)) * gsum;
        }
        break;
      }
      case OpKind::cross_entropy_soft: {
        const double g0 = g(0, 0);
        const Matrix& t = nodes_[n.a].value;
        const Matrix& lp = nodes_[n.b].value;
        Matrix& dt = adj(n.a);
        for (std::size_t i = 0; i < t.size(); ++i) dt.data()[i] -= g0 * lp.data()[i];
        Matrix& dlp = adj(n.b);
        for (std::size_t i = 0; i < t.size(); ++i) dlp.data()[i] -= g0 * t.data()[i];
        break;
      }
      case OpKind::scale: {
        Matrix& da = adj(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) da.data()[i] += n.scalar * g.data()[i];
        break;
      }
      case OpKind::sum: {
        const double g0 = g(0, 0);
        Matrix& da = adj(n.a);
        for (double& v : da.data()) v += g0;
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

// Gradient of a scalar function of a flat vector. `f(tape, x)` receives `at`
// as a 1 x n leaf and must return a 1x1 node built from tape primitives.
template <class F>
std::vector<double> gradient(F&& f, std::span<const double> at) {
  Tape tape;
  Var x = tape.leaf(Matrix::row_vector(at));
  Var out = f(tape, x);
  tape.backward(out);
  return tape.grad(x).data();
}

}  // namespace fedppd

#endif  // FEDPPD_AUTODIFF_HPP
