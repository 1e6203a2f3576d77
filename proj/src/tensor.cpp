#include "dael/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dael/errors.hpp"
#include "dael/kernels.hpp"

namespace dael {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void dim_error(std::string_view op, const Shape& a, const Shape& b = {}) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a);
  if (!b.empty()) os << " and " << shape_str(b);
  throw DimensionError(os.str());
}

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
void check_finite(std::string_view op, const std::vector<T>& v) {
  for (const T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite output");
}

/// Builds the output node; links the graph only when an input needs gradients.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward_fn) {
  check_finite(op, value);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool track =
      g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const NodePtr<T>& n) { return n && n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool wants(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

enum class Broadcast { none, row };

template <typename T>
Broadcast broadcast_kind(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return Broadcast::row;
  dim_error(op, a.shape(), b.shape());
}

template <typename T>
Tensor<T> add_sub(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, T sign) {
  const auto kind = broadcast_kind(op, a, b);
  const auto n = a.numel();
  const auto cols = kind == Broadcast::row ? b.numel() : n;
  std::vector<T> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + sign * bv[i % cols];
  return make_result<T>(op, a.shape(), std::move(out), {a.node(), b.node()},
                        [n, cols, sign](detail::Node<T>& self) {
                          const T* g = self.grad.data();
                          if (wants(self.inputs[0])) {
                            T* da = self.inputs[0]->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
                          }
                          if (wants(self.inputs[1])) {
                            T* db = self.inputs[1]->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i) db[i % cols] += sign * g[i];
                          }
                        });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (dael::numel(shape) != values.size())
    throw DimensionError("constant: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  check_finite("constant", values);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = dael::numel(shape);
  return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  auto t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->value[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (has_grad()) return node_->grad;
  return std::vector<T>(numel(), T(0));
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!is_leaf()) throw ContractError("mutable_values: only leaf tensors may be modified");
  return node_->value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return std::span<T>(node_->grad_buffer(), node_->value.size());
}

// ---- ops ------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_sub<T>("add", a, b, T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_sub<T>("sub", a, b, T(-1));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
  const auto n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                        [n](detail::Node<T>& self) {
                          const T* g = self.grad.data();
                          const auto& A = self.inputs[0];
                          const auto& B = self.inputs[1];
                          if (wants(A)) {
                            T* da = A->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * B->value[i];
                          }
                          if (wants(B)) {
                            T* db = B->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * A->value[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = factor * a[i];
  return make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                        [n, factor](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i) da[i] += factor * self.grad[i];
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    dim_error("matmul", a.shape(), b.shape());
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  kernels::gemm_acc(M, N, K, a.values().data(), b.values().data(), out.data());
  return make_result<T>(
      "matmul", {M, N}, std::move(out), {a.node(), b.node()},
      [M, K, N](detail::Node<T>& self) {
        const T* g = self.grad.data();
        const auto& A = self.inputs[0];
        const auto& B = self.inputs[1];
        if (wants(A))
          kernels::gemm_a_bt_acc(M, K, N, g, B->value.data(), A->grad_buffer());
        if (wants(B))
          kernels::gemm_at_b_acc(K, N, M, A->value.data(), g, B->grad_buffer());
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) ||
      stride == 0)
    dim_error("conv2d", x.shape(), w.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))
    dim_error("conv2d", w.shape(), bias.shape());
  const kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                                w.dim(0), w.dim(2), stride, pad};
  if (x.dim(2) + 2 * pad < g.kernel || x.dim(3) + 2 * pad < g.kernel)
    dim_error("conv2d", x.shape(), w.shape());
  const Shape out_shape{g.batch, g.out_channels, g.out_height(), g.out_width()};
  std::vector<T> out(numel(out_shape));
  kernels::conv2d_forward(g, x.values().data(), w.values().data(),
                          bias.defined() ? bias.values().data() : nullptr, out.data());
  std::vector<NodePtr<T>> inputs{x.node(), w.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return make_result<T>(
      "conv2d", out_shape, std::move(out), std::move(inputs),
      [g](detail::Node<T>& self) {
        const auto& X = self.inputs[0];
        const auto& W = self.inputs[1];
        T* dx = wants(X) ? X->grad_buffer() : nullptr;
        T* dw = wants(W) ? W->grad_buffer() : nullptr;
        T* db = self.inputs.size() > 2 && wants(self.inputs[2])
                    ? self.inputs[2]->grad_buffer()
                    : nullptr;
        kernels::conv2d_backward(g, X->value.data(), W->value.data(), self.grad.data(), dx,
                                 dw, db);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const auto n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return make_result<T>("relu", a.shape(), std::move(out), {a.node()},
                        [n](detail::Node<T>& self) {
                          const auto& A = self.inputs[0];
                          T* da = A->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i)
                            if (A->value[i] > T(0)) da[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& a) {
  if (a.rank() != 4 || a.dim(2) % 2 != 0 || a.dim(3) % 2 != 0)
    dim_error("maxpool2x2", a.shape());
  const Shape out_shape{a.dim(0), a.dim(1), a.dim(2) / 2, a.dim(3) / 2};
  const auto out_n = numel(out_shape);
  std::vector<T> out(out_n);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out_n);
  kernels::maxpool2x2_forward(a.dim(0) * a.dim(1), a.dim(2), a.dim(3), a.values().data(),
                              out.data(), argmax->data());
  return make_result<T>("maxpool2x2", out_shape, std::move(out), {a.node()},
                        [argmax](detail::Node<T>& self) {
                          kernels::maxpool2x2_backward(argmax->size(), argmax->data(),
                                                       self.grad.data(),
                                                       self.inputs[0]->grad_buffer());
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (const T v : a.values()) acc += v;
  const auto n = a.numel();
  return make_result<T>("sum", {}, {acc}, {a.node()}, [n](detail::Node<T>& self) {
    T* da = self.inputs[0]->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) da[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) dim_error("mean", a.shape());
  T acc = T(0);
  for (const T v : a.values()) acc += v;
  const auto n = a.numel();
  const T inv = T(1) / static_cast<T>(n);
  return make_result<T>("mean", {}, {acc * inv}, {a.node()},
                        [n, inv](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer();
                          const T g = self.grad[0] * inv;
                          for (std::size_t i = 0; i < n; ++i) da[i] += g;
                        });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  const auto n = a.numel();
  const T floor = static_cast<T>(kLogClamp);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(std::max(a[i], floor));
  return make_result<T>("log", a.shape(), std::move(out), {a.node()},
                        [n, floor](detail::Node<T>& self) {
                          const auto& A = self.inputs[0];
                          T* da = A->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i)
                            if (A->value[i] >= floor) da[i] += self.grad[i] / A->value[i];
                        });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  const auto n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
  return make_result<T>("exp", a.shape(), std::move(out), {a.node()},
                        [n](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i)
                            da[i] += self.grad[i] * self.value[i];
                        });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() != 2 || a.dim(1) == 0) dim_error("softmax_lastdim", a.shape());
  const auto rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(a.numel());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return make_result<T>("softmax_lastdim", a.shape(), std::move(out), {a.node()},
                        [rows, cols](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.value.data() + r * cols;
                            const T* g = self.grad.data() + r * cols;
                            T dot = T(0);
                            for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                            for (std::size_t c = 0; c < cols; ++c)
                              da[r * cols + c] += y[c] * (g[c] - dot);
                          }
                        });
}

template <typename T>
Tensor<T> sq_l2_rowwise(const Tensor<T>& a) {
  if (a.rank() != 2) dim_error("sq_l2_rowwise", a.shape());
  const auto rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += a[r * cols + c] * a[r * cols + c];
  return make_result<T>("sq_l2_rowwise", {rows}, std::move(out), {a.node()},
                        [rows, cols](detail::Node<T>& self) {
                          const auto& A = self.inputs[0];
                          T* da = A->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              da[r * cols + c] += T(2) * A->value[r * cols + c] * self.grad[r];
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) dim_error("slice_rows", a.shape());
  const auto row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * row),
                     a.values().begin() + static_cast<std::ptrdiff_t>(end * row));
  return make_result<T>("slice_rows", std::move(shape), std::move(out), {a.node()},
                        [begin, row](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer() + begin * row;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node()},
                        [](detail::Node<T>& self) {
                          T* da = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

template <typename T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<detail::Node<T>*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<detail::Node<T>*> seen;
  // Iterative post-order DFS; inputs are visited in recorded order.
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar tensor, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  const auto order = topological_order(loss);
  if (order.empty()) return;
  for (auto* node : order)
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
  order.back()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->is_leaf()) node->backward_fn(*node);
  }
  for (auto* node : order)
    if (node->is_leaf()) check_finite("backward", node->grad);
}

#define DAEL_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                            std::size_t, std::size_t);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> maxpool2x2(const Tensor<T>&);                                     \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> log(const Tensor<T>&);                                            \
  template Tensor<T> exp(const Tensor<T>&);                                            \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                \
  template Tensor<T> sq_l2_rowwise(const Tensor<T>&);                                  \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                 \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                  \
  template std::vector<detail::Node<T>*> topological_order(const Tensor<T>&);          \
  template void backward(const Tensor<T>&);

DAEL_INSTANTIATE(float)
DAEL_INSTANTIATE(double)

#undef DAEL_INSTANTIATE

}  // namespace dael
