#pragma once

// Tensor-level reverse-mode differentiation. A Tape records every operation
// in evaluation order, so walking it backwards is a valid topological order.
// Values are Eigen matrices; vectors are single-column matrices.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gate/error.hpp"

namespace gate::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) { return push(std::move(v), false, nullptr); }
  template <typename Derived>
  Var constant(const Eigen::MatrixBase<Derived>& v) {
    return push(Matrix(v), false, nullptr);
  }

  // Leaf that receives a gradient.
  Var variable(Matrix v) { return push(std::move(v), true, nullptr); }

  // Leaf aliasing storage owned elsewhere (parameters). The referent must
  // outlive the tape and stay unchanged while it is in use.
  Var reference(const Matrix& v, bool needs_grad) {
    nodes_.push_back(Node{Matrix(), &v, Matrix(), needs_grad, nullptr});
    return {this, nodes_.size() - 1};
  }

  Var push(Matrix value, bool needs_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), nullptr, Matrix(), needs_grad, std::move(back)});
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, zero-initialized on first touch.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  // Gradient of `loss` w.r.t. every node; afterwards gradient_of() is valid.
  void backward(Var loss) {
    if (loss.tape() != this) throw Error("backward: loss recorded on another tape");
    const Matrix& v = value(loss.id());
    if (v.rows() != 1 || v.cols() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + std::to_string(v.rows()) + "x" +
                       std::to_string(v.cols()));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad(loss.id())(0, 0) = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.back || n.grad.size() == 0) continue;
      n.back(*this, i);
    }
  }

  Matrix gradient_of(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(value(v.id()).rows(), value(v.id()).cols());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  bool any_needs_grad(std::initializer_list<Var> vs) const {
    for (const Var& v : vs)
      if (nodes_[v.id()].needs_grad) return true;
    return false;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref;
    Matrix grad;
    bool needs_grad;
    Backward back;
  };

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
}

inline void require_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

inline void accumulate(Tape& t, std::size_t id, const Matrix& g) {
  if (t.needs_grad(id)) t.grad(id) += g;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " times " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  bool ng = t.any_needs_grad({a, b});
  auto ai = a.id(), bi = b.id();
  return t.push(std::move(out), ng, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ai)) t.grad(ai).noalias() += g * t.value(bi).transpose();
    if (t.needs_grad(bi)) t.grad(bi).noalias() += t.value(ai).transpose() * g;
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a, b, "add");
  Tape& t = *a.tape();
  auto ai = a.id(), bi = b.id();
  return t.push(a.value() + b.value(), t.any_needs_grad({a, b}), [ai, bi](Tape& t, std::size_t self) {
    Matrix g = t.grad(self);
    detail::accumulate(t, ai, g);
    detail::accumulate(t, bi, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a, b, "sub");
  Tape& t = *a.tape();
  auto ai = a.id(), bi = b.id();
  return t.push(a.value() - b.value(), t.any_needs_grad({a, b}), [ai, bi](Tape& t, std::size_t self) {
    Matrix g = t.grad(self);
    detail::accumulate(t, ai, g);
    detail::accumulate(t, bi, -g);
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

inline Var scale(Var a, double c) {
  Tape& t = *a.tape();
  auto ai = a.id();
  return t.push(a.value() * c, t.needs_grad(ai), [ai, c](Tape& t, std::size_t self) {
    detail::accumulate(t, ai, t.grad(self) * c);
  });
}

inline Var operator*(double c, Var a) { return scale(a, c); }

// s (1x1) times a matrix.
inline Var scalar_mul(Var s, Var a) {
  detail::require_same_tape(s, a);
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scalar_mul: first operand must be 1x1");
  Tape& t = *a.tape();
  auto si = s.id(), ai = a.id();
  return t.push(s.scalar() * a.value(), t.any_needs_grad({s, a}), [si, ai](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(si)) t.grad(si)(0, 0) += g.cwiseProduct(t.value(ai)).sum();
    if (t.needs_grad(ai)) t.grad(ai) += t.value(si)(0, 0) * g;
  });
}

inline Var cwise_mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a, b, "cwise_mul");
  Tape& t = *a.tape();
  auto ai = a.id(), bi = b.id();
  return t.push(a.value().cwiseProduct(b.value()), t.any_needs_grad({a, b}), [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ai)) t.grad(ai) += g.cwiseProduct(t.value(bi));
    if (t.needs_grad(bi)) t.grad(bi) += g.cwiseProduct(t.value(ai));
  });
}

inline Var leaky_relu(Var a, double slope) {
  Tape& t = *a.tape();
  auto ai = a.id();
  Matrix out = a.value().unaryExpr([slope](double x) { return x > 0 ? x : slope * x; });
  return t.push(std::move(out), t.needs_grad(ai), [ai, slope](Tape& t, std::size_t self) {
    Matrix d = t.value(ai).unaryExpr([slope](double x) { return x > 0 ? 1.0 : slope; });
    t.grad(ai) += t.grad(self).cwiseProduct(d);
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape();
  auto ai = a.id();
  return t.push(a.value().transpose(), t.needs_grad(ai), [ai](Tape& t, std::size_t self) {
    t.grad(ai) += t.grad(self).transpose();
  });
}

inline Var dot(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a, b, "dot");
  Tape& t = *a.tape();
  auto ai = a.id(), bi = b.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return t.push(std::move(out), t.any_needs_grad({a, b}), [ai, bi](Tape& t, std::size_t self) {
    double g = t.grad(self)(0, 0);
    if (t.needs_grad(ai)) t.grad(ai) += g * t.value(bi);
    if (t.needs_grad(bi)) t.grad(bi) += g * t.value(ai);
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape();
  auto ai = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.needs_grad(ai), [ai](Tape& t, std::size_t self) {
    t.grad(ai).array() += t.grad(self)(0, 0);
  });
}

// Vertical concatenation; all parts share a column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index rows = 0, cols = parts.front().cols();
  bool ng = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id());
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), ng, [ids](Tape& t, std::size_t self) {
    Eigen::Index r = 0;
    for (auto id : ids) {
      auto n = t.value(id).rows();
      if (t.needs_grad(id)) t.grad(id) += t.grad(self).middleRows(r, n);
      r += n;
    }
  });
}

// Horizontal concatenation; all parts share a row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  Eigen::Index cols = 0, rows = parts.front().rows();
  bool ng = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id());
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), ng, [ids](Tape& t, std::size_t self) {
    Eigen::Index c = 0;
    for (auto id : ids) {
      auto n = t.value(id).cols();
      if (t.needs_grad(id)) t.grad(id) += t.grad(self).middleCols(c, n);
      c += n;
    }
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  Tape& t = *a.tape();
  auto ai = a.id();
  return t.push(a.value().middleRows(start, n), t.needs_grad(ai), [ai, start, n](Tape& t, std::size_t self) {
    t.grad(ai).middleRows(start, n) += t.grad(self);
  });
}

inline Var col(Var a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw ShapeError("col: index out of bounds");
  Tape& t = *a.tape();
  auto ai = a.id();
  return t.push(a.value().col(j), t.needs_grad(ai), [ai, j](Tape& t, std::size_t self) {
    t.grad(ai).col(j) += t.grad(self);
  });
}

inline Var element(Var a, Eigen::Index i) {
  if (a.cols() != 1 || i < 0 || i >= a.rows()) throw ShapeError("element: index out of bounds");
  return slice_rows(a, i, 1);
}

// Numerically stable softmax of a column vector.
inline Var softmax(Var a) {
  if (a.cols() != 1) throw ShapeError("softmax: expected a column vector");
  Tape& t = *a.tape();
  auto ai = a.id();
  const Matrix& x = a.value();
  Matrix e = (x.array() - x.maxCoeff()).exp().matrix();
  e /= e.sum();
  return t.push(std::move(e), t.needs_grad(ai), [ai](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    double inner = y.cwiseProduct(g).sum();
    t.grad(ai) += (y.array() * (g.array() - inner)).matrix();
  });
}

inline Var log_softmax(Var a) {
  if (a.cols() != 1) throw ShapeError("log_softmax: expected a column vector");
  Tape& t = *a.tape();
  auto ai = a.id();
  const Matrix& x = a.value();
  double m = x.maxCoeff();
  double lse = m + std::log((x.array() - m).exp().sum());
  Matrix out = (x.array() - lse).matrix();
  return t.push(std::move(out), t.needs_grad(ai), [ai](Tape& t, std::size_t self) {
    Matrix p = t.value(self).array().exp().matrix();
    const Matrix& g = t.grad(self);
    t.grad(ai) += g - p * g.sum();
  });
}

// Column vector of 1x1 inputs.
inline Var stack(const std::vector<Var>& scalars) { return concat_rows(scalars); }

inline Var mean(const std::vector<Var>& items) {
  if (items.empty()) throw ShapeError("mean: no inputs");
  Var acc = items.front();
  for (std::size_t i = 1; i < items.size(); ++i) acc = add(acc, items[i]);
  return scale(acc, 1.0 / static_cast<double>(items.size()));
}

inline Var add_all(const std::vector<Var>& items) {
  if (items.empty()) throw ShapeError("add_all: no inputs");
  Var acc = items.front();
  for (std::size_t i = 1; i < items.size(); ++i) acc = add(acc, items[i]);
  return acc;
}

}  // namespace gate::ad
