#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation executed on its Vars. Nodes are appended in
// execution order, so the node vector is already a topological order and
// backward() is a single reverse sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cad/errors.hpp"
#include "cad/matrix.hpp"

namespace cad {

/// Marks which positions of a padded sequence hold real segments.
class Mask {
 public:
  Mask() = default;
  explicit Mask(std::vector<bool> valid) : valid_(std::move(valid)) {}

  static Mask all(std::size_t n) { return Mask(std::vector<bool>(n, true)); }

  /// First `n_valid` of `length` positions are valid.
  static Mask prefix(std::size_t n_valid, std::size_t length) {
    std::vector<bool> v(length, false);
    for (std::size_t i = 0; i < n_valid && i < length; ++i) v[i] = true;
    return Mask(std::move(v));
  }

  std::size_t length() const { return valid_.size(); }
  bool valid(std::size_t i) const { return valid_[i]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (bool b : valid_) n += b ? 1 : 0;
    return n;
  }

 private:
  std::vector<bool> valid_;
};

inline bool is_valid(const Mask* mask, std::size_t i) { return mask == nullptr || mask->valid(i); }

inline std::size_t valid_count(const Mask* mask, std::size_t n) {
  return mask == nullptr ? n : mask->count();
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool defined() const { return tape_ != nullptr; }

  const Matrix& value() const;
  Matrix grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  friend bool operator==(const Var& a, const Var& b) {
    return a.tape_ == b.tape_ && a.id_ == b.id_;
  }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the node's output gradient into its inputs' gradient slots.
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var variable(Matrix value) { return push(std::move(value), true, {}); }

  /// Appends an op node. The node requires a gradient iff any input does.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  /// Same as record() for ops with a runtime-sized input list.
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Accumulated gradient; zeros of the value's shape when nothing reached the node.
  Matrix grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient buffer of an input, allocated on first touch; nullptr when the
  /// input does not require a gradient. Only meaningful during backward().
  Matrix* grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  /// Reverse sweep from a 1x1 output. A second call without zero_grad() is
  /// rejected so gradients are never silently doubled.
  void backward(Var output) {
    check_owned(output);
    const Matrix& out = nodes_[output.id()].value;
    if (out.rows() != 1 || out.cols() != 1) {
      throw ContractError("backward: output must be 1x1, got " + out.shape());
    }
    if (backward_done_) {
      throw ContractError("backward: tape already differentiated; call zero_grad() first");
    }
    backward_done_ = true;
    Matrix* seed = grad_slot(output.id());
    if (seed == nullptr) return;
    (*seed)(0, 0) += 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Matrix();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Matrix value, bool requires_grad, BackwardFn fn) {
    if (!value.all_finite()) {
      throw NumericError("tape: non-finite value produced at node " +
                         std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("tape: Var belongs to a different tape");
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline Matrix Var::grad() const { return tape_->grad(id_); }

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Matrix out = multiply(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_slot(ia)) kernels::gemm_nt_acc(g, t.value(ib), *ga);
    if (Matrix* gb = t.grad_slot(ib)) kernels::gemm_tn_acc(t.value(ia), g, *gb);
  });
}

inline Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(transpose(a.value()), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix* ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(j, i) += g(i, j);
  });
}

/// scale * a + shift, entrywise.
inline Var affine(Var a, double scale, double shift = 0.0) {
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * out[i] + shift;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, scale](Tape& t, const Matrix& g) {
    Matrix& ga = *t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }

inline Var add(Var a, Var b) {
  Matrix::require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_slot(ia)) *ga += g;
    if (Matrix* gb = t.grad_slot(ib)) *gb += g;
  });
}

inline Var mul(Var a, Var b) {
  Matrix::require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_slot(ia)) {
      const Matrix& other = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * other[i];
    }
    if (Matrix* gb = t.grad_slot(ib)) {
      const Matrix& other = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * other[i];
    }
  });
}

/// Adds a 1 x cols bias row to every row of `a`.
inline Var add_row_broadcast(Var a, Var bias) {
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw DimensionError("add_row_broadcast: bias " + bv.shape() + " does not fit " + av.shape());
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record(std::move(out), {a, bias}, [ia, ib](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_slot(ia)) *ga += g;
    if (Matrix* gb = t.grad_slot(ib)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)(0, j) += g(i, j);
    }
  });
}

inline Var relu(Var a) {
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix& ga = *t.grad_slot(ia);
    const Matrix& x = t.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(out[i]);
  Matrix saved = out;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, y = std::move(saved)](Tape& t, const Matrix& g) {
                           Matrix& ga = *t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * y[i] * (1.0 - y[i]);
                         });
}

inline Var tanh(Var a) {
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  Matrix saved = out;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, y = std::move(saved)](Tape& t, const Matrix& g) {
                           Matrix& ga = *t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * (1.0 - y[i] * y[i]);
                         });
}

enum class ElementwiseOp { Add, Mul, Relu, Sigmoid, Tanh };

/// Dispatching form; binary ops use both operands, unary ops ignore `b`.
inline Var elementwise(ElementwiseOp op, Var a, Var b = {}) {
  switch (op) {
    case ElementwiseOp::Add:
      if (!b.defined()) throw ContractError("elementwise add needs two operands");
      return add(a, b);
    case ElementwiseOp::Mul:
      if (!b.defined()) throw ContractError("elementwise mul needs two operands");
      return mul(a, b);
    case ElementwiseOp::Relu:
      return relu(a);
    case ElementwiseOp::Sigmoid:
      return sigmoid(a);
    case ElementwiseOp::Tanh:
      return tanh(a);
  }
  throw ContractError("unknown elementwise op");
}

/// Row-wise softmax with max subtraction. Masked columns get exactly zero
/// probability and receive zero gradient.
inline Var row_softmax(Var x, const Mask* mask = nullptr) {
  const Matrix& xv = x.value();
  if (mask != nullptr && mask->length() != xv.cols()) {
    throw DimensionError("row_softmax: mask length " + std::to_string(mask->length()) +
                         " does not match " + std::to_string(xv.cols()) + " columns");
  }
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < xv.cols(); ++j)
      if (is_valid(mask, j)) mx = std::max(mx, xv(i, j));
    if (!std::isfinite(mx)) throw ContractError("row_softmax: degenerate mask, no valid position");
    double z = 0.0;
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      if (!is_valid(mask, j)) continue;
      out(i, j) = std::exp(xv(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) /= z;
  }
  Matrix saved = out;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, y = std::move(saved)](Tape& t, const Matrix& g) {
    Matrix& gx = *t.grad_slot(ix);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: row counts differ, " + av.shape() + " vs " + bv.shape());
  }
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_slot(ia))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < ca; ++j) (*ga)(i, j) += g(i, j);
    if (Matrix* gb = t.grad_slot(ib))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < cb; ++j) (*gb)(i, j) += g(i, ca + j);
  });
}

/// Columns [begin, begin + count).
inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.cols()) {
    throw DimensionError("slice_cols: range exceeds " + av.shape());
  }
  Matrix out(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, begin + j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin](Tape& t, const Matrix& g) {
    Matrix& ga = *t.grad_slot(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) += g(i, j);
  });
}

/// Row r as a 1 x cols matrix.
inline Var slice_row(Var a, std::size_t r) {
  const Matrix& av = a.value();
  if (r >= av.rows()) throw DimensionError("slice_row: row out of range for " + av.shape());
  Matrix out(1, av.cols());
  std::copy(av.row(r).begin(), av.row(r).end(), out.row(0).begin());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, r](Tape& t, const Matrix& g) {
    Matrix& ga = *t.grad_slot(ia);
    for (std::size_t j = 0; j < g.cols(); ++j) ga(r, j) += g(0, j);
  });
}

/// Builds an n_rows x cols matrix from 1 x cols row Vars placed at the given
/// row indices. Rows not listed are zero.
inline Var assemble_rows(Tape& tape, std::size_t n_rows, std::size_t cols,
                         const std::vector<std::pair<std::size_t, Var>>& placed) {
  Matrix out(n_rows, cols);
  std::vector<Var> inputs;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (row, node id)
  inputs.reserve(placed.size());
  for (const auto& [r, v] : placed) {
    if (v.rows() != 1 || v.cols() != cols || r >= n_rows) {
      throw DimensionError("assemble_rows: bad row " + v.value().shape() + " at " +
                           std::to_string(r));
    }
    std::copy(v.value().row(0).begin(), v.value().row(0).end(), out.row(r).begin());
    inputs.push_back(v);
    where.emplace_back(r, v.id());
  }
  return tape.record(std::move(out), std::span<const Var>(inputs),
                     [where = std::move(where)](Tape& t, const Matrix& g) {
                       for (const auto& [r, id] : where)
                         if (Matrix* gi = t.grad_slot(id))
                           for (std::size_t j = 0; j < g.cols(); ++j) (*gi)(0, j) += g(r, j);
                     });
}

/// log(clamp(a, lo, hi)); clamped entries pass no gradient.
inline Var log_clamped(Var a, double lo, double hi) {
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::clamp(out[i], lo, hi));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, lo, hi](Tape& t, const Matrix& g) {
    Matrix& ga = *t.grad_slot(ia);
    const Matrix& x = t.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > lo && x[i] < hi) ga[i] += g[i] / x[i];
  });
}

/// Sum of w(i,j) * a(i,j) with constant weights, as a 1x1 result.
inline Var weighted_sum(Var a, Matrix weights) {
  Matrix::require_same_shape(a.value(), weights, "weighted_sum");
  const Matrix& av = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += weights[i] * av[i];
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(1, 1, s), {a},
                         [ia, w = std::move(weights)](Tape& t, const Matrix& g) {
                           Matrix& ga = *t.grad_slot(ia);
                           const double g0 = g(0, 0);
                           for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g0 * w[i];
                         });
}

inline Var sum(Var a) {
  return weighted_sum(a, Matrix(a.rows(), a.cols(), 1.0));
}

// ---------------------------------------------------------------------------
// Parameters and gradient checking
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Matrix value;
};

/// Ordered, named collection of trainable matrices.
class ParameterStore {
 public:
  void add(std::string name, Matrix value) {
    if (contains(name)) throw ContractError("duplicate parameter " + name);
    params_.push_back(Parameter{std::move(name), std::move(value)});
  }

  bool contains(std::string_view name) const { return index_of(name) != npos; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return npos;
  }

  const Matrix& at(std::string_view name) const { return params_[checked_index(name)].value; }
  Matrix& at(std::string_view name) { return params_[checked_index(name)].value; }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::size_t checked_index(std::string_view name) const {
    const std::size_t i = index_of(name);
    if (i == npos) throw ContractError("unknown parameter " + std::string(name));
    return i;
  }

  std::vector<Parameter> params_;
};

/// Parameters placed on a tape, addressable by name.
class BoundParameters {
 public:
  BoundParameters(Tape& tape, const ParameterStore& store, bool trainable = true)
      : store_(&store) {
    vars_.reserve(store.size());
    for (const Parameter& p : store)
      vars_.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  }

  Var operator[](std::string_view name) const {
    const std::size_t i = store_->index_of(name);
    if (i == ParameterStore::npos) throw ContractError("unbound parameter " + std::string(name));
    return vars_[i];
  }

  std::span<const Var> vars() const { return vars_; }

  /// Gradients in store order; call after Tape::backward.
  std::vector<Matrix> gradients() const {
    std::vector<Matrix> out;
    out.reserve(vars_.size());
    for (const Var& v : vars_) out.push_back(v.grad());
    return out;
  }

 private:
  const ParameterStore* store_;
  std::vector<Var> vars_;
};

struct ParameterCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Builds a scalar loss from parameters bound on a fresh tape.
using LossBuilder = std::function<Var(Tape&, const BoundParameters&)>;

/// Relative error with a small absolute floor so entries whose true gradient
/// is ~0 are judged on absolute error instead.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients against central differences for every entry of
/// every parameter. The store is perturbed in place and restored.
inline GradCheckReport grad_check(const LossBuilder& f, ParameterStore& params, double h,
                                  double tol) {
  auto eval = [&]() {
    Tape tape;
    BoundParameters bound(tape, params, false);
    const double v = f(tape, bound).value()(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  std::vector<Matrix> analytic;
  {
    Tape tape;
    BoundParameters bound(tape, params);
    Var loss = f(tape, bound);
    if (!std::isfinite(loss.value()(0, 0))) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
    analytic = bound.gradients();
  }

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParameterCheck check{params[p].name};
    Matrix& w = params[p].value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = eval();
      w[i] = orig - h;
      const double down = eval();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      check.max_abs_error = std::max(check.max_abs_error, std::abs(analytic[p][i] - numeric));
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[p][i], numeric));
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.parameters.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace cad
