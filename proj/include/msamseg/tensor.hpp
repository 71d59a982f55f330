#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace msamseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// When enabled, every recorded forward value and every propagated gradient
/// is checked for NaN/Inf and a NumericalError is thrown on the first hit.
void set_nan_guard(bool enabled);
bool nan_guard_enabled();

/// Graph recording is on by default; NoGradGuard turns it off for the
/// current thread (inference, metric evaluation).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace testing {
// Test hook: perturbs the SiLU backward rule so gradient checks must fail.
void set_corrupt_backward(bool enabled);
bool corrupt_backward();
}  // namespace testing

template <typename T>
struct TensorImpl;

template <typename T>
struct GradNode;

template <typename T>
using BackwardFn = std::function<void(GradNode<T>& node, std::span<const T> out_grad)>;

/// One recorded differentiable operation.
template <typename T>
struct GradNode {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::weak_ptr<TensorImpl<T>> output;
  BackwardFn<T> backward;
  bool consumed = false;

  /// Gradient buffer of input `i`, allocated on first use. Empty when the
  /// input does not take part in differentiation.
  std::span<T> input_grad(std::size_t i);
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> producer;
};

/// Dense row-major array with reverse-mode differentiation. Copies share
/// storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  /// In-place access; only meant for leaves (parameter updates, loading).
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  /// Runs reverse-mode differentiation from this scalar.
  void backward() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Builds an op output and, when any input requires grad and recording is
/// enabled, registers `backward` on the graph.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward);

/// Topologically ordered record of the operations a scalar depends on.
template <typename T>
class GradGraph {
 public:
  static GradGraph collect(const Tensor<T>& root);

  const std::vector<std::shared_ptr<GradNode<T>>>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<GradNode<T>>> nodes_;  // execution order
};

template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Elementwise arithmetic

enum class ElementwiseKind { add, sub, mul, scale, leaky_relu, silu, sigmoid };

ElementwiseKind parse_elementwise_kind(std::string_view name);
std::string_view elementwise_kind_name(ElementwiseKind kind);

inline constexpr double kLeakySlope = 0.01;

/// `b` may be undefined (unary kinds), same-shaped as `a`, or a one-element
/// tensor broadcast over `a`. `param` is the factor for scale and the
/// negative slope for leaky_relu.
template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b = {},
                      double param = 0.0);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseKind::add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseKind::sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseKind::mul, a, b);
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  return elementwise(ElementwiseKind::scale, a, {}, factor);
}
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, double slope = kLeakySlope) {
  return elementwise(ElementwiseKind::leaky_relu, a, {}, slope);
}
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return elementwise(ElementwiseKind::silu, a);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return elementwise(ElementwiseKind::sigmoid, a);
}

// ---------------------------------------------------------------------------
// Layout and reductions

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);

/// (N, A, B) -> (N, B, A).
template <typename T>
Tensor<T> swap_last_axes(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Sum of `parts`, all of identical shape.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& parts);

}  // namespace msamseg
