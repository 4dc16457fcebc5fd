#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace rfb {

/// Thrown for incompatible extents, bad indices or malformed arguments.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a forward or backward pass produces NaN/Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when the differentiation graph is misused.
struct GraphError : std::logic_error {
  using std::logic_error::logic_error;
};

/// (N, C, H, W) extents.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape &) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

template <typename T> class Tensor;

namespace detail {

template <typename T> struct Node {
  Shape shape;
  // Shared so that per-thread parameter leaves can alias one buffer.
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool backward_done = false;
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grad.
  std::function<void(Node &)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data->size())
      grad.assign(data->size(), T(0));
  }
};

} // namespace detail

/// Dense row-major NCHW array with an optional reverse-mode graph node.
///
/// A Tensor is a cheap handle: copies share the same node. Results of
/// differentiable ops keep their parents alive until the handle is dropped.
template <typename T> class Tensor {
public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->shape = shape;
    node_->data = std::make_shared<std::vector<T>>(shape.numel(), fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (values.size() != shape.numel())
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape.str());
    node_->shape = shape;
    node_->data = std::make_shared<std::vector<T>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1, 1, 1, 1}, v, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape &shape() const { return node().shape; }
  std::size_t numel() const { return node().data->size(); }

  std::vector<T> &data() { return *node().data; }
  const std::vector<T> &data() const { return *node().data; }
  T *ptr() { return node().data->data(); }
  const T *ptr() const { return node().data->data(); }

  T &at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data()[offset(n, c, h, w)];
  }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data()[offset(n, c, h, w)];
  }
  T item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor is not a scalar " + shape().str());
    return data()[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  bool has_grad() const { return !node().grad.empty(); }
  const std::vector<T> &grad() const { return node().grad; }
  std::vector<T> &grad() { return node().grad; }
  void zero_grad() {
    node().grad.clear();
    node().backward_done = false;
  }

  /// New leaf sharing this tensor's storage but with its own gradient.
  Tensor alias_leaf(bool requires_grad) const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = shape();
    out.node_->data = node().data;
    out.node_->requires_grad = requires_grad;
    return out;
  }

  /// Deep copy of the values, detached from any graph.
  Tensor clone() const { return Tensor(shape(), data()); }

  const NodePtr &node_ptr() const { return node_; }
  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h,
                     std::size_t w) const {
    const Shape &s = shape();
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }

private:
  detail::Node<T> &node() const {
    if (!node_)
      throw GraphError("use of undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

/// Creates the result node of an op. `fn` receives the result node after its
/// gradient has been filled and must accumulate into the parents.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char *op,
                      std::vector<Tensor<T>> parents,
                      std::function<void(detail::Node<T> &)> fn) {
  Tensor<T> out(shape, std::move(values));
  auto &node = *out.node_ptr();
  node.op = op;
  bool any = false;
  for (const auto &p : parents)
    any = any || p.requires_grad();
  if (any) {
    node.requires_grad = true;
    for (auto &p : parents)
      node.parents.push_back(p.node_ptr());
    node.backward_fn = std::move(fn);
  }
  return out;
}

template <typename T> void check_finite(const std::vector<T> &v, const char *op) {
  for (T x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite value produced");
}

namespace detail {

// Reverse topological order (outputs first) of nodes requiring grad.
template <typename T>
std::vector<Node<T> *> reverse_topo(const std::shared_ptr<Node<T>> &root) {
  std::vector<Node<T> *> order;
  std::unordered_set<Node<T> *> seen;
  std::vector<std::pair<Node<T> *, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto &[n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T> *p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

template <typename T>
void propagate(const std::vector<Node<T> *> &order) {
  for (Node<T> *n : order) {
    if (!n->backward_fn)
      continue;
    n->ensure_grad();
    n->backward_fn(*n);
  }
}

} // namespace detail

/// Reverse-mode pass from a scalar loss. Gradients accumulate additively into
/// every reachable tensor that requires grad. Running backward a second time
/// from the same loss without zero_grad() throws GraphError.
template <typename T> void backward(Tensor<T> &loss) {
  if (loss.numel() != 1)
    throw GraphError("backward: loss must be a scalar, got " +
                     loss.shape().str());
  if (!loss.requires_grad())
    throw GraphError("backward: loss does not depend on any parameter");
  auto &root = *loss.node_ptr();
  if (root.backward_done)
    throw GraphError("backward: already run on this graph; call zero_grad()");
  auto order = detail::reverse_topo(loss.node_ptr());
  for (auto *n : order)
    n->ensure_grad();
  root.grad[0] += T(1);
  detail::propagate(order);
  root.backward_done = true;
}

/// Gradient of one output element with respect to `input`, seeded with 1 at
/// (n, c, h, w). Uses scratch gradients: intermediate grads are cleared before
/// and after, so it may be called repeatedly on the same graph.
template <typename T>
Tensor<T> input_gradient(Tensor<T> &output, std::array<std::size_t, 4> unit,
                         Tensor<T> &input) {
  const Shape &s = output.shape();
  if (unit[0] >= s.n || unit[1] >= s.c || unit[2] >= s.h || unit[3] >= s.w)
    throw ShapeError("input_gradient: unit out of range for " + s.str());
  Tensor<T> result(input.shape());
  if (!output.requires_grad() || !input.requires_grad())
    return result;
  auto order = detail::reverse_topo(output.node_ptr());
  bool reached = false;
  for (auto *n : order) {
    n->grad.assign(n->data->size(), T(0));
    reached = reached || n == input.node_ptr().get();
  }
  if (!reached)
    return result;
  output.grad()[output.offset(unit[0], unit[1], unit[2], unit[3])] = T(1);
  detail::propagate(order);
  result.data() = input.grad();
  for (auto *n : order)
    n->grad.clear();
  return result;
}

} // namespace rfb
