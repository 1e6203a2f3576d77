#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward rule; backward() walks
// the recorded graph in reverse topological order. The graph lives exactly as
// long as the tensors referencing it, so each forward pass builds a fresh one.
//
// Float tensors are used for training, double tensors for verification.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dael {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  /// Constant tensor (never receives gradients).
  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(T value);
  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); }
  std::string_view op() const { return node_->op; }

  /// In-place access for optimizers and finite-difference probes. Only leaf
  /// tensors may be mutated.
  std::span<T> mutable_values();
  std::span<T> mutable_grad();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- operations -----------------------------------------------------------
// Element-wise ops require equal shapes; add/sub also accept a rank-1 right
// operand matching the last dimension of a rank-2 left operand.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x: N x C x H x W, w: O x C x k x k, bias: O (or undefined). Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> maxpool2x2(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
/// Natural log of max(x, 1e-12).
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> softmax_lastdim(const Tensor<T>& a);
template <typename T> Tensor<T> sq_l2_rowwise(const Tensor<T>& a);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& a);

inline constexpr double kLogClamp = 1e-12;

/// Nodes reachable from `root` that take part in differentiation, inputs
/// before the operations that consume them.
template <typename T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root);

/// Reverse-mode sweep from a scalar loss. Gradients on leaf tensors
/// accumulate across calls; intermediate gradients are recomputed.
template <typename T> void backward(const Tensor<T>& loss);

}  // namespace dael
