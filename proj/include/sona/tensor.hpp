#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations that touch at
// least one tensor with requires_grad=true record a node holding references
// to its inputs and a closure that scatters the output gradient back into
// them. Nodes are stamped with a monotonically increasing sequence number at
// creation, so ordering reachable nodes by that number is a topological order
// of the graph; backward() replays that order in reverse.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sona {

using Shape = std::vector<std::size_t>;

class dimension_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class contract_error : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tensor;

namespace detail {

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
  bool is_leaf() const { return parents.empty() && !backward; }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// While alive, new results on this thread are recorded without a graph.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw dimension_error("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw dimension_error("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
    node_->op = "leaf";
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // In-place writes are reserved for leaves (parameters, running statistics).
  std::span<double> mutable_data() {
    if (!node_->is_leaf()) throw contract_error("mutable_data() on a non-leaf tensor (" + node_->op + ")");
    return node_->data;
  }
  double item() const {
    if (numel() != 1) throw contract_error("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  void set_requires_grad(bool on) {
    if (!is_leaf()) throw contract_error("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  const std::string& op() const { return node_->op; }

  bool finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    return std::all_of(node_->data.begin(), node_->data.end(), ok) &&
           std::all_of(node_->grad.begin(), node_->grad.end(), ok);
  }

  // Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), node_->data, requires_grad); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Creates the result of a primitive. The node is attached to the graph only
  // if some input requires gradients; otherwise the closure is dropped.
  static Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                            std::initializer_list<Tensor> inputs, detail::BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data), false);
    out.node_->op = std::move(op);
    if (!detail::grad_enabled()) return out;
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) out.node_->parents.push_back(in.node_);
    }
    if (!out.node_->parents.empty()) {
      out.node_->requires_grad = true;
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient buffer of an input inside a backward closure; empty if the input
// does not participate in differentiation.
inline std::span<double> grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.node()->grad_buffer();
}

// Ordered record of the primitives reachable from a root. Ascending sequence
// numbers give a topological order because a node is always created after
// its parents.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    std::vector<detail::Node*> stack{root.node()};
    std::unordered_set<detail::Node*> seen{root.node()};
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      tape.nodes_.push_back(n);
      for (const auto& p : n->parents) {
        if (seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }
  std::span<detail::Node* const> nodes() const { return nodes_; }

  // Replays closures from the root toward the leaves, each node once, then
  // drops the recorded edges of interior nodes so the tape cannot be reused.
  void replay_backward(const std::function<void(const detail::Node&)>& visit = {}) {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto* n = *it;
      if (visit) visit(*n);
      if (n->backward && !n->grad.empty()) n->backward(n->grad);
    }
    for (auto* n : nodes_) {
      if (!n->is_leaf()) {
        n->backward = nullptr;
        n->parents.clear();
      }
    }
  }

 private:
  std::vector<detail::Node*> nodes_;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw contract_error("backward() requires a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad())
    throw contract_error("backward(): loss is not connected to any tensor requiring gradients");
  auto tape = Tape::record(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  tape.replay_backward();
}

}  // namespace sona
