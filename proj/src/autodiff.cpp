#include "vmamba/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "vmamba/error.hpp"

namespace vmamba {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

Parameter& ParameterSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  index_.emplace(name, params_.size());
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValidationError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->at(name);
}

bool ParameterSet::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

struct BackwardFault {
  std::string op;
  double factor = 1.0;
};

BackwardFault& fault() {
  static BackwardFault f;
  return f;
}

}  // namespace

void set_backward_fault(std::string op_name, double factor) {
  fault() = BackwardFault{std::move(op_name), factor};
}

void check_acyclic(std::span<const RecordEntry> record) {
  std::vector<bool> defined;
  for (const auto& entry : record) {
    for (auto in : entry.inputs) {
      if (in >= defined.size() || !defined[in])
        throw GraphError("cycle detected: node " + std::to_string(entry.output) +
                         " consumes node " + std::to_string(in) + " before it is defined");
    }
    if (entry.output >= defined.size()) defined.resize(entry.output + 1, false);
    if (defined[entry.output])
      throw GraphError("node " + std::to_string(entry.output) + " is defined twice");
    defined[entry.output] = true;
  }
}

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.tracked = true;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
  Node node;
  node.value = p.value;
  node.param = &p;
  node.tracked = true;
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var{nodes_.size() - 1};
}

Var Graph::apply(std::unique_ptr<Op> op, std::vector<Var> inputs) {
  std::vector<const Tensor*> values;
  std::vector<std::size_t> ids;
  values.reserve(inputs.size());
  bool tracked = false;
  for (auto v : inputs) {
    if (v.id >= nodes_.size())
      throw GraphError(std::string(op->name()) + ": input refers to an unknown node");
    values.push_back(&nodes_[v.id].value);
    ids.push_back(v.id);
    tracked = tracked || nodes_[v.id].tracked;
  }
  Tensor out = op->forward(values);
  out.require_finite(op->name());
  Node node;
  node.op = std::move(op);
  node.inputs = std::move(ids);
  node.value = std::move(out);
  node.tracked = tracked;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const { return nodes_.at(v.id).value; }

Tensor Graph::grad(Var v) const {
  const auto& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

std::vector<RecordEntry> Graph::record() const {
  std::vector<RecordEntry> out;
  out.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    out.push_back(RecordEntry{n.op ? n.op->name() : std::string_view{}, n.inputs, i});
  }
  return out;
}

void Graph::backward(Var loss) {
  if (loss.id >= nodes_.size()) throw GraphError("backward: unknown loss node");
  if (nodes_[loss.id].value.size() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " +
                     to_string(nodes_[loss.id].value.shape()));
  const auto entries = record();
  check_acyclic(entries);

  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);

  const auto& injected = fault();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.grad.empty()) continue;
    if (node.param != nullptr) {
      node.param->grad += node.grad;
      continue;
    }
    if (!node.op) continue;

    std::vector<const Tensor*> in_values;
    std::vector<Tensor> local(node.inputs.size());
    std::vector<Tensor*> local_ptrs;
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto& src = nodes_[node.inputs[k]];
      in_values.push_back(&src.value);
      const bool needed = src.tracked;
      if (needed) local[k] = Tensor(src.value.shape());
      local_ptrs.push_back(needed ? &local[k] : nullptr);
    }
    node.op->backward(in_values, node.value, node.grad, local_ptrs);

    const bool faulty = !injected.op.empty() && injected.op == node.op->name();
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (local_ptrs[k] == nullptr) continue;
      if (faulty)
        for (auto& g : local[k].data()) g *= injected.factor;
      auto& dst = nodes_[node.inputs[k]].grad;
      if (dst.empty())
        dst = std::move(local[k]);
      else
        dst += local[k];
    }
  }
}

std::vector<Tensor> Graph::replay() {
  std::vector<Tensor> values;
  values.reserve(nodes_.size());
  for (auto& node : nodes_) {
    if (!node.op) {
      values.push_back(node.param != nullptr ? node.param->value : node.value);
      continue;
    }
    std::vector<const Tensor*> in;
    for (auto id : node.inputs) in.push_back(&values[id]);
    values.push_back(node.op->forward(in));
  }
  return values;
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(probe);
    probe[i] = saved - h;
    const double down = f(probe);
    probe[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape())
    throw ShapeError("relative_error shapes differ: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace vmamba
