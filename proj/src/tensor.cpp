#include "msamseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace msamseg {

namespace {

std::atomic<bool> g_nan_guard{false};
std::atomic<bool> g_corrupt_backward{false};
std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

template <typename T>
void check_finite(std::span<const T> values, const char* what, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << "non-finite " << what << " in op '" << op << "' at flat index " << i;
      throw NumericalError(msg.str());
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

void set_nan_guard(bool enabled) { g_nan_guard.store(enabled); }
bool nan_guard_enabled() { return g_nan_guard.load(std::memory_order_relaxed); }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace testing {
void set_corrupt_backward(bool enabled) { g_corrupt_backward.store(enabled); }
bool corrupt_backward() { return g_corrupt_backward.load(std::memory_order_relaxed); }
}  // namespace testing

// ---------------------------------------------------------------------------
// GradNode / Tensor

template <typename T>
std::span<T> GradNode<T>::input_grad(std::size_t i) {
  auto& in = *inputs.at(i);
  if (!in.requires_grad) return {};
  if (in.grad.size() != in.data.size()) in.grad.assign(in.data.size(), T(0));
  return in.grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_ = std::make_shared<TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl_ ? impl_->data.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  shape();
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  shape();
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a one-element tensor, got " + shape_to_string(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  shape();
  if (!flag && impl_->producer) throw GraphError("cannot clear requires_grad on a recorded result");
  impl_->requires_grad = flag;
  if (flag && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  if (!flag) impl_->grad.clear();
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->producer;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!has_grad()) return {};
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto out = detach();
  if (requires_grad() && is_leaf()) {
    out.impl_->requires_grad = true;
    out.impl_->grad = impl_->grad;
  }
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  msamseg::backward(*this);
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward_fn) {
  if (nan_guard_enabled()) check_finite<T>(values, "value", op);
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;

  auto node = std::make_shared<GradNode<T>>();
  node->seq = g_next_seq.fetch_add(1);
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->output = out.impl();
  node->backward = std::move(backward_fn);
  out.impl()->requires_grad = true;
  out.impl()->producer = std::move(node);
  return out;
}

template <typename T>
GradGraph<T> GradGraph<T>::collect(const Tensor<T>& root) {
  GradGraph graph;
  std::unordered_set<const GradNode<T>*> seen;
  std::vector<std::shared_ptr<GradNode<T>>> stack;
  if (root.impl() && root.impl()->producer) stack.push_back(root.impl()->producer);
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(node.get()).second) continue;
    for (const auto& in : node->inputs) {
      if (in->producer) stack.push_back(in->producer);
    }
    graph.nodes_.push_back(std::move(node));
  }
  // Sequence numbers are issued at recording time, so every producer of an
  // input precedes its consumer.
  std::sort(graph.nodes_.begin(), graph.nodes_.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
  return graph;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw GraphError("loss does not depend on any tensor that requires grad");

  const auto graph = GradGraph<T>::collect(loss);
  for (const auto& node : graph.nodes()) {
    if (node->consumed) {
      throw GraphError("graph already differentiated; re-run the forward pass before calling backward again");
    }
  }

  auto& root = *loss.impl();
  if (root.grad.size() != 1) root.grad.assign(1, T(0));
  root.grad[0] += T(1);

  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& node = **it;
    auto out = node.output.lock();
    if (out && out->grad.size() == out->data.size()) {
      if (nan_guard_enabled()) check_finite<T>(out->grad, "gradient", node.op);
      node.backward(node, out->grad);
    }
    node.consumed = true;
    node.backward = nullptr;
  }
}

// ---------------------------------------------------------------------------
// Elementwise

ElementwiseKind parse_elementwise_kind(std::string_view name) {
  if (name == "add") return ElementwiseKind::add;
  if (name == "sub") return ElementwiseKind::sub;
  if (name == "mul") return ElementwiseKind::mul;
  if (name == "scale") return ElementwiseKind::scale;
  if (name == "leaky_relu") return ElementwiseKind::leaky_relu;
  if (name == "silu") return ElementwiseKind::silu;
  if (name == "sigmoid") return ElementwiseKind::sigmoid;
  throw ConfigError("unknown elementwise kind '" + std::string(name) + "'");
}

std::string_view elementwise_kind_name(ElementwiseKind kind) {
  switch (kind) {
    case ElementwiseKind::add: return "add";
    case ElementwiseKind::sub: return "sub";
    case ElementwiseKind::mul: return "mul";
    case ElementwiseKind::scale: return "scale";
    case ElementwiseKind::leaky_relu: return "leaky_relu";
    case ElementwiseKind::silu: return "silu";
    case ElementwiseKind::sigmoid: return "sigmoid";
  }
  throw ConfigError("unknown elementwise kind");
}

namespace {

bool is_binary(ElementwiseKind kind) {
  return kind == ElementwiseKind::add || kind == ElementwiseKind::sub || kind == ElementwiseKind::mul;
}

template <typename T>
Tensor<T> binary_op(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  if (!b.defined()) {
    throw ShapeError(std::string(elementwise_kind_name(kind)) + " needs two operands");
  }
  const bool broadcast = b.numel() == 1 && a.shape() != b.shape();
  if (!broadcast && a.shape() != b.shape()) {
    throw ShapeError(std::string(elementwise_kind_name(kind)) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = av.size();
  std::vector<T> out(n);
  const char* name = "add";
  if (broadcast) {
    const T s = bv[0];
    switch (kind) {
      case ElementwiseKind::add: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + s; break;
      case ElementwiseKind::sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - s; break;
      default: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * s; break;
    }
  } else {
    switch (kind) {
      case ElementwiseKind::add: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i]; break;
      case ElementwiseKind::sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i]; break;
      default: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i]; break;
    }
  }
  if (kind == ElementwiseKind::sub) name = "sub";
  if (kind == ElementwiseKind::mul) name = "mul";

  return make_result<T>(a.shape(), std::move(out), name, {a, b},
                        [kind, broadcast](GradNode<T>& node, std::span<const T> g) {
    const auto& av = node.inputs[0]->data;
    const auto& bv = node.inputs[1]->data;
    auto ga = node.input_grad(0);
    auto gb = node.input_grad(1);
    const std::size_t n = g.size();
    const T sign = kind == ElementwiseKind::sub ? T(-1) : T(1);
    if (!ga.empty()) {
      if (kind == ElementwiseKind::mul) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[broadcast ? 0 : i];
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (!gb.empty()) {
      if (broadcast) {
        T acc = 0;
        if (kind == ElementwiseKind::mul) {
          for (std::size_t i = 0; i < n; ++i) acc += g[i] * av[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) acc += g[i];
        }
        gb[0] += sign * acc;
      } else if (kind == ElementwiseKind::mul) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) gb[i] += sign * g[i];
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b, double param) {
  if (is_binary(kind)) return binary_op(kind, a, b);
  if (b.defined()) {
    throw ShapeError(std::string(elementwise_kind_name(kind)) + " takes a single operand");
  }
  const auto av = a.data();
  const std::size_t n = av.size();
  std::vector<T> out(n);
  const T p = static_cast<T>(param);
  switch (kind) {
    case ElementwiseKind::scale: {
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * p;
      return make_result<T>(a.shape(), std::move(out), "scale", {a},
                            [p](GradNode<T>& node, std::span<const T> g) {
        auto ga = node.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p;
      });
    }
    case ElementwiseKind::leaky_relu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > T(0) ? av[i] : av[i] * p;
      return make_result<T>(a.shape(), std::move(out), "leaky_relu", {a},
                            [p](GradNode<T>& node, std::span<const T> g) {
        const auto& x = node.inputs[0]->data;
        auto ga = node.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > T(0) ? g[i] : g[i] * p;
      });
    }
    case ElementwiseKind::sigmoid: {
      for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(av[i]);
      return make_result<T>(a.shape(), std::move(out), "sigmoid", {a},
                            [](GradNode<T>& node, std::span<const T> g) {
        const auto& y = node.output.lock()->data;
        auto ga = node.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
      });
    }
    case ElementwiseKind::silu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * stable_sigmoid(av[i]);
      return make_result<T>(a.shape(), std::move(out), "silu", {a},
                            [](GradNode<T>& node, std::span<const T> g) {
        const auto& x = node.inputs[0]->data;
        auto ga = node.input_grad(0);
        const T corrupt = testing::corrupt_backward() ? T(1.5) : T(1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = stable_sigmoid(x[i]);
          ga[i] += corrupt * g[i] * (s + x[i] * s * (T(1) - s));
        }
      });
    }
    default:
      break;
  }
  throw ConfigError("unsupported elementwise kind");
}

// ---------------------------------------------------------------------------
// Layout and reductions

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(x.shape()) + " into " +
                     shape_to_string(new_shape));
  }
  std::vector<T> values(x.data().begin(), x.data().end());
  return make_result<T>(std::move(new_shape), std::move(values), "reshape", {x},
                        [](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> swap_last_axes(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("swap_last_axes needs rank 3, got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), rows = x.dim(1), cols = x.dim(2);
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = in.data() + b * rows * cols;
    T* dst = out.data() + b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
  return make_result<T>(Shape{n, cols, rows}, std::move(out), "swap_last_axes", {x},
                        [n, rows, cols](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = g.data() + b * rows * cols;
      T* dst = gx.data() + b * rows * cols;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += src[c * rows + r];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{1}, std::vector<T>{acc}, "sum", {x},
                        [](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("add_n needs at least one operand");
  const auto& shape = parts.front().shape();
  for (const auto& p : parts) {
    if (p.shape() != shape) {
      throw ShapeError("add_n: shape mismatch " + shape_to_string(shape) + " vs " +
                       shape_to_string(p.shape()));
    }
  }
  std::vector<T> out(parts.front().data().begin(), parts.front().data().end());
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const auto v = parts[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  const std::size_t count = parts.size();
  return make_result<T>(shape, std::move(out), "add_n", parts,
                        [count](GradNode<T>& node, std::span<const T> g) {
    for (std::size_t k = 0; k < count; ++k) {
      auto gk = node.input_grad(k);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[i];
    }
  });
}

#define MSAMSEG_INSTANTIATE(T)                                                              \
  template struct GradNode<T>;                                                              \
  template class Tensor<T>;                                                                 \
  template class GradGraph<T>;                                                              \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const char*,                     \
                                    const std::vector<Tensor<T>>&, BackwardFn<T>);          \
  template void backward<T>(const Tensor<T>&);                                              \
  template Tensor<T> elementwise<T>(ElementwiseKind, const Tensor<T>&, const Tensor<T>&,    \
                                    double);                                                \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                   \
  template Tensor<T> swap_last_axes<T>(const Tensor<T>&);                                   \
  template Tensor<T> sum<T>(const Tensor<T>&);                                              \
  template Tensor<T> mean<T>(const Tensor<T>&);                                             \
  template Tensor<T> add_n<T>(const std::vector<Tensor<T>>&);

MSAMSEG_INSTANTIATE(float)
MSAMSEG_INSTANTIATE(double)

}  // namespace msamseg
