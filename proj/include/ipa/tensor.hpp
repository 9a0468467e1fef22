#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace ipa {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

template <typename T>
class Graph;

// Handle into a Graph node. Cheap to copy; the graph owns all storage.
// Tensors are immutable once created: new values come from new primitives.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return graph_ != nullptr; }
  Graph<T>* graph() const { return graph_; }
  int32_t id() const { return id_; }

  const Shape& shape() const;
  const std::vector<T>& values() const;
  int64_t numel() const;
  bool requires_grad() const;
  T item() const;  // scalar tensors only

 private:
  friend class Graph<T>;
  Tensor(Graph<T>* g, int32_t id) : graph_(g), id_(id) {}
  Graph<T>* graph_ = nullptr;
  int32_t id_ = -1;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated during backward for reachable nodes
  bool requires_grad = false;
  std::vector<int32_t> parents;
  std::function<void(Graph<T>&, const Node<T>&)> backward;
  const char* op = "leaf";
};

// Recorded evaluation trace. Values are computed eagerly on emit; nodes are
// appended in topological order, so reverse creation order is a valid
// backward schedule. Single-threaded per graph.
template <typename T>
class Graph {
 public:
  Tensor<T> input(Shape shape, std::vector<T> values, bool requires_grad);
  Tensor<T> constant(Shape shape, std::vector<T> values);
  Tensor<T> constant_scalar(T v);

  // Low-level node builder used by every primitive: validates finiteness
  // (NaN/Inf anywhere is an immediate error) and records the node. Exposed
  // so callers can add custom-differentiated operations.
  Tensor<T> emit(Shape shape, std::vector<T> values,
                 std::vector<int32_t> parents,
                 std::function<void(Graph<T>&, const Node<T>&)> backward,
                 const char* op);

  // Reverse sweep from a scalar seed. Grads of all reachable requires_grad
  // nodes are (re)computed from scratch; repeated calls are bit-identical.
  void backward(const Tensor<T>& seed);

  // Gradient of a requires_grad tensor after backward; zeros if the tensor
  // did not influence the seed.
  std::vector<T> grad(const Tensor<T>& t) const;
  const std::vector<T>* grad_ptr(const Tensor<T>& t) const;

  Node<T>& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node<T>& node(int32_t id) const {
    return nodes_[static_cast<size_t>(id)];
  }
  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node<T>> nodes_;  // deque: stable references across emits
};

// ---- primitives -----------------------------------------------------------
// add/mul broadcast the second operand when its shape is a trailing suffix
// of the first's (covers bias rows and scalars); the first operand is never
// broadcast.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);  // swaps the last two axes
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len);
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps);
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           const std::vector<int64_t>& ids);
// Train-only regularization; mask is derived from the seed alone so a call
// is bit-reproducible. Inverted scaling by 1/(1-rate).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, uint64_t seed);
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, const std::vector<uint8_t>& mask,
                      T value);

// ---- composites (built from primitives, no custom adjoints) ---------------
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x, int axis, bool keepdim);

// ---- verification harness --------------------------------------------------
// Central finite differences for a scalar-valued function of dense inputs.
// f is rebuilt on a fresh graph per evaluation and must be deterministic.
// Returns the worst relative error max(|a-n| / max(|a|,|n|,1)) over all
// coordinates.
template <typename T>
struct GradCheckInput {
  Shape shape;
  std::vector<T> values;
};

template <typename T>
double grad_check(
    const std::function<Tensor<T>(Graph<T>&, const std::vector<Tensor<T>>&)>&
        f,
    const std::vector<GradCheckInput<T>>& inputs, double eps);

}  // namespace ipa
