#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Small products go through the packed GEMM kernel too, so the summation
// order never depends on buffer addresses.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>

#include "oudefend/errors.hpp"
#include "oudefend/tensor.hpp"

namespace oudefend {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// the owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

/// Reverse-mode tape. Operations are appended in execution order, so the
/// record order is already a topological order of the graph.
class Tape {
 public:
  /// Propagates `grad_out` (dL/d output) into the inputs' gradient buffers.
  using Adjoint = std::function<void(Tape&, const std::vector<double>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `t` without copying. When `t.requires_grad()`, backward
  /// writes the gradient into `t`. `t` must outlive the tape.
  Var leaf(Tensor& t) {
    Node& node = nodes_.emplace_back();
    node.external = &t;
    node.needs_grad = t.requires_grad();
    node.sink = t.requires_grad() ? &t : nullptr;
    return {this, nodes_.size() - 1};
  }

  /// Registers a read-only view of `t`; no gradient is tracked.
  Var constant_ref(const Tensor& t) {
    Node& node = nodes_.emplace_back();
    node.external = &t;
    return {this, nodes_.size() - 1};
  }

  /// Registers an owned copy; no gradient is tracked.
  Var constant(Tensor t) {
    Node& node = nodes_.emplace_back();
    node.owned = std::move(t);
    return {this, nodes_.size() - 1};
  }

  /// Appends the result of a primitive. The adjoint is kept only when some
  /// input participates in differentiation.
  Var record(Tensor value, std::initializer_list<Var> inputs, Adjoint adjoint) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) throw ShapeError("operand recorded on another tape");
      needs = needs || nodes_[in.id].needs_grad;
    }
    Node& node = nodes_.emplace_back();
    node.owned = std::move(value);
    node.owned.set_requires_grad(false);
    node.owned.clear_grad();
    node.needs_grad = needs;
    if (needs) node.adjoint = std::move(adjoint);
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value(); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient accumulator for `v`, zero-initialised on first access.
  std::vector<double>& grad_buffer(Var v) {
    Node& node = nodes_[v.id];
    if (node.grad.empty()) node.grad.assign(node.value().size(), 0.0);
    return node.grad;
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  /// Single-shot reverse sweep from a one-element `loss`.
  void backward(Var loss) {
    if (consumed_) throw TapeConsumedError("backward already ran on this tape");
    if (loss.tape != this) throw ShapeError("loss belongs to another tape");
    if (value(loss).size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " +
                       to_string(value(loss).shape()));
    }
    consumed_ = true;
    if (nodes_[loss.id].needs_grad) grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.needs_grad || node.grad.empty() || !node.adjoint) continue;
      node.adjoint(*this, node.grad);
      if (!node.sink) std::vector<double>().swap(node.grad);
    }
    for (Node& node : nodes_) {
      if (!node.sink) continue;
      if (node.grad.empty()) node.grad.assign(node.value().size(), 0.0);
      node.sink->set_grad(std::move(node.grad));
      node.grad.clear();
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    Adjoint adjoint;
    std::vector<double> grad;

    const Tensor& value() const { return external ? *external : owned; }
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) + " differ");
  }
}

inline Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ShapeError("operands recorded on different tapes");
  }
  return *a.tape;
}

// Accumulates scale * g into the gradient of `v` when it is tracked.
inline void accumulate(Tape& tape, Var v, const std::vector<double>& g,
                       double scale = 1.0) {
  if (!tape.needs_grad(v)) return;
  auto& buf = tape.grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += scale * g[i];
}

inline double accumulate_sum(const std::vector<double>& g) {
  double s = 0.0;
  for (double x : g) s += x;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives. A one-element right operand acts as a scalar.

inline Var add(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool scalar_b = bv.size() == 1 && av.shape() != bv.shape();
  if (!scalar_b) detail::require_same_shape(a, b, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scalar_b ? bv[0] : bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b, scalar_b](Tape& t, const std::vector<double>& g) {
                       detail::accumulate(t, a, g);
                       if (scalar_b) {
                         if (t.needs_grad(b)) t.grad_buffer(b)[0] += detail::accumulate_sum(g);
                       } else {
                         detail::accumulate(t, b, g);
                       }
                     });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool scalar_b = bv.size() == 1 && av.shape() != bv.shape();
  if (!scalar_b) detail::require_same_shape(a, b, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= scalar_b ? bv[0] : bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b, scalar_b](Tape& t, const std::vector<double>& g) {
                       detail::accumulate(t, a, g);
                       if (scalar_b) {
                         if (t.needs_grad(b)) t.grad_buffer(b)[0] -= detail::accumulate_sum(g);
                       } else {
                         detail::accumulate(t, b, g, -1.0);
                       }
                     });
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool scalar_b = bv.size() == 1 && av.shape() != bv.shape();
  if (!scalar_b) detail::require_same_shape(a, b, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scalar_b ? bv[0] : bv[i];
  return tape.record(
      std::move(out), {a, b}, [a, b, scalar_b](Tape& t, const std::vector<double>& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (t.needs_grad(a)) {
          auto& ga = t.grad_buffer(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (scalar_b ? bv[0] : bv[i]);
        }
        if (t.needs_grad(b)) {
          auto& gb = t.grad_buffer(b);
          if (scalar_b) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
            gb[0] += s;
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
          }
        }
      });
}

inline Var scalar_add(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.storage()) v += c;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const std::vector<double>& g) {
    detail::accumulate(t, a, g);
  });
}

inline Var scalar_mul(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= c;
  return a.tape->record(std::move(out), {a}, [a, c](Tape& t, const std::vector<double>& g) {
    detail::accumulate(t, a, g, c);
  });
}

inline Var neg(Var a) { return scalar_mul(a, -1.0); }

/// Clamp to [lo, hi]. Gradient passes only where lo < x < hi strictly.
inline Var clip(Var a, double lo, double hi) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::clamp(v, lo, hi);
  return a.tape->record(std::move(out), {a}, [a, lo, hi](Tape& t, const std::vector<double>& g) {
    if (!t.needs_grad(a)) return;
    const Tensor& av = a.value();
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > lo && av[i] < hi) ga[i] += g[i];
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator+(Var a, double c) { return scalar_add(a, c); }
inline Var operator*(Var a, double c) { return scalar_mul(a, c); }
inline Var operator-(Var a) { return neg(a); }

// ---------------------------------------------------------------------------
// Shape and linear algebra.

/// Copying reshape; element order is unchanged.
inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const std::vector<double>& g) {
    detail::accumulate(t, a, g);
  });
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) throw ShapeError("matmul needs rank-2 operands");
  const auto m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul inner dimensions " + to_string(av.shape()) + " x " +
                     to_string(bv.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  MatMap(out.data().data(), m, n).noalias() =
      ConstMatMap(av.data().data(), m, k) * ConstMatMap(bv.data().data(), k, n);
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
    ConstMatMap gm(g.data(), m, n);
    if (t.needs_grad(a)) {
      MatMap(t.grad_buffer(a).data(), m, k).noalias() +=
          gm * ConstMatMap(b.value().data().data(), k, n).transpose();
    }
    if (t.needs_grad(b)) {
      MatMap(t.grad_buffer(b).data(), k, n).noalias() +=
          ConstMatMap(a.value().data().data(), m, k).transpose() * gm;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions. Reduced axes are removed from the result shape.

enum class ReduceKind { sum, mean, max };

namespace detail {

// Maps each input flat index to its output flat index for the given axes.
inline std::vector<std::size_t> reduction_map(const Shape& shape,
                                              const std::vector<std::size_t>& axes,
                                              Shape& out_shape) {
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw AxisError("axis " + std::to_string(ax) + " for rank " + std::to_string(shape.size()));
    }
    if (reduced[ax]) throw AxisError("axis " + std::to_string(ax) + " repeated");
    reduced[ax] = true;
  }
  out_shape.clear();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(shape[i]);
  }
  // Output stride contributed by each input axis (0 for reduced axes).
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = s;
      s *= shape[i];
    }
  }
  const auto n = numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t out = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = out;
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      ++idx[ax];
      out += out_stride[ax];
      if (idx[ax] < shape[ax]) break;
      out -= out_stride[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

}  // namespace detail

/// Reduction over `axes`; an empty axis list reduces every axis.
/// Max routes its gradient to the first maximal element in scan order.
inline Var reduce(ReduceKind kind, Var x, std::vector<std::size_t> axes = {}) {
  const Tensor& xv = x.value();
  if (axes.empty()) {
    for (std::size_t i = 0; i < xv.rank(); ++i) axes.push_back(i);
  }
  Shape out_shape;
  auto map = detail::reduction_map(xv.shape(), axes, out_shape);
  const auto out_n = numel(out_shape);
  const double count = out_n ? static_cast<double>(xv.size()) / static_cast<double>(out_n) : 0.0;

  if (kind == ReduceKind::max) {
    if (xv.size() == 0) throw AxisError("max over an empty tensor");
    Tensor out = Tensor::full(out_shape, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> argmax(out_n, 0);
    std::vector<bool> seen(out_n, false);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const auto o = map[i];
      if (!seen[o] || xv[i] > out[o]) {
        out[o] = xv[i];
        argmax[o] = i;
        seen[o] = true;
      }
    }
    return x.tape->record(std::move(out), {x},
                          [x, argmax = std::move(argmax)](Tape& t, const std::vector<double>& g) {
                            auto& gx = t.grad_buffer(x);
                            for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                          });
  }

  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[map[i]] += xv[i];
  const double scale = kind == ReduceKind::mean ? 1.0 / count : 1.0;
  if (kind == ReduceKind::mean) {
    for (double& v : out.storage()) v *= scale;
  }
  return x.tape->record(std::move(out), {x},
                        [x, scale, map = std::move(map)](Tape& t, const std::vector<double>& g) {
                          auto& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale * g[map[i]];
                        });
}

inline Var sum(Var x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::sum, x, std::move(axes));
}
inline Var mean(Var x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::mean, x, std::move(axes));
}
inline Var max(Var x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::max, x, std::move(axes));
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  Tensor probe = x;
  Tensor grad = zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// max|a - b| / max(max|a|, max|b|, floor). Used by all gradient checks.
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace oudefend
