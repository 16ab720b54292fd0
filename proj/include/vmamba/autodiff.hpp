#pragma once
// Recorded-graph reverse-mode differentiation.
//
// A Graph is an append-only record of op applications. Every node's inputs
// precede it, so recording order is a topological order; backward() walks it
// in reverse and accumulates d(loss)/d(parameter) into Parameter::grad.

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vmamba/tensor.hpp"

namespace vmamba {

struct Parameter {
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

// Owns a model's parameters. Addresses are stable and names unique.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const { return id != none; }
};

// A differentiable operation. forward() must be a pure function of its
// inputs (it may cache intermediates on the op for backward). backward()
// receives zero-initialised gradient buffers for the inputs that need one
// (null otherwise) and writes d(loss)/d(input) into them.
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        const Tensor& grad_output, std::span<Tensor* const> grad_inputs) = 0;
};

// One entry of the computation record. Leaves have an empty op name.
struct RecordEntry {
  std::string_view op;
  std::vector<std::size_t> inputs;
  std::size_t output;
};

// Throws GraphError unless every entry only consumes earlier outputs and
// every output id is unique.
void check_acyclic(std::span<const RecordEntry> record);

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var constant(Tensor value);
  // A leaf whose gradient is tracked (readable through grad()).
  Var variable(Tensor value);
  // The same Parameter always maps to the same node.
  Var parameter(Parameter& p);
  // Runs op->forward on the inputs' values and records the application.
  // Throws NumericError when the output is not finite.
  Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target w.r.t. `v`; zero when unreached.
  Tensor grad(Var v) const;

  // Accumulates d(loss)/d(p) into every Parameter reachable from `loss`.
  void backward(Var loss);

  std::vector<RecordEntry> record() const;
  // Re-evaluates every op node in recorded order from the current leaf
  // values and returns the value of every node, indexed by node id.
  std::vector<Tensor> replay();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::unique_ptr<Op> op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    bool tracked = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Test hook: scale every gradient produced by backward rules of the named op
// by `factor`. An empty name disables the fault.
void set_backward_fault(std::string op_name, double factor);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double h = 1e-5);

// ||a - b|| / max(||a||, ||b||, floor); Euclidean norms.
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-7);

}  // namespace vmamba
