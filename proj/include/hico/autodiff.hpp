#pragma once

// Reverse-mode tape over dense double tensors.
//
// A Tape is an append-only list of nodes. Each op appends one node holding
// its output value and a closure that maps the output gradient onto its
// inputs' gradient buffers. Node ids are therefore topologically ordered and
// backward() walks them once, in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "hico/error.hpp"
#include "hico/tensor.hpp"

namespace hico {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a tape node. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  /// Receives the gradient of the node's output and pushes it to inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Node that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr, {}); }

  /// Free leaf whose gradient is readable through grad() after backward().
  Var variable(Tensor value) { return push(std::move(value), true, nullptr, {}); }

  /// Leaf bound to a model parameter; backward() adds into param.grad.
  Var leaf(Parameter& param) { return push(param.value, true, &param, {}); }

  /// Appends an op output. Inputs must already be on this tape.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool any = false;
    for (const Var& v : inputs) {
      require(v.tape == this, ErrorKind::ShapeError, "input belongs to a different tape");
      any = any || nodes_[v.id].needs_grad;
    }
    require(value.all_finite(), ErrorKind::NumericalFailure, "non-finite value produced by op");
    return push(std::move(value), any, nullptr, any ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of an input, allocated on first touch; nullptr when the
  /// input does not need a gradient.
  Tensor* grad_target(Var v) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  /// Gradient accumulated at a node by backward(); zeros if unreached.
  const Tensor& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    require(loss.tape == this, ErrorKind::NotScalar, "loss is not on this tape");
    require(nodes_[loss.id].value.numel() == 1, ErrorKind::NotScalar,
            "loss has shape " + nodes_[loss.id].value.shape().str());
    require(!consumed_, ErrorKind::TapeConsumed, "backward already ran on this tape");
    consumed_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad_target(loss)->fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        auto& dst = n.param->grad;
        if (dst.shape() != n.grad.shape()) dst = Tensor(n.grad.shape());
        for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] += n.grad[k];
      }
      ++visited_;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  /// Nodes whose backward closure ran during backward().
  std::size_t visited() const { return visited_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs_grad, Parameter* param, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, param, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t visited_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

/// Outcome of a finite-difference comparison.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares tape gradients of a scalar function against central differences
/// (f(p+eps) - f(p-eps)) / 2eps, coordinate by coordinate.
///
/// `f` must rebuild its graph on the tape it is given and read parameters
/// through Tape::leaf so perturbations are visible. `max_coords_per_param`
/// (0 = all) subsamples large tensors with an evenly spaced stride.
/// `scale_floor` > 0 raises the relative-error denominator to that fraction
/// of the largest analytic entry, so entries far below the gradient's scale
/// are judged against it rather than against their own roundoff.
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                                  double eps, std::size_t max_coords_per_param = 0, double scale_floor = 0.0) {
  require(eps > 0.0, ErrorKind::InvalidHyperparameter, "grad_check eps must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  double floor = 1e-8;
  if (scale_floor > 0.0)
    for (Parameter* p : params)
      for (double g : p->grad.vec()) floor = std::max(floor, scale_floor * std::abs(g));
  auto eval = [&f]() {
    Tape tape;
    const double v = f(tape).value()[0];
    require(std::isfinite(v), ErrorKind::NumericalFailure, "objective is not finite");
    return v;
  };

  GradCheckResult result;
  for (Parameter* p : params) {
    const std::size_t n = p->value.numel();
    const std::size_t step = (max_coords_per_param == 0 || n <= max_coords_per_param)
                                 ? 1
                                 : (n + max_coords_per_param - 1) / max_coords_per_param;
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = eval();
      p->value[i] = saved - eps;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double err = relative_error(analytic, numeric, floor);
      ++result.coordinates;
      if (result.worst_param.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p->name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace hico
