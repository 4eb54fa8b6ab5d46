#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Nodes created by an operation keep
// references to their inputs and a closure that pushes the node's gradient to
// them, but only when at least one input requires a gradient; otherwise the
// result is a plain constant and nothing is recorded. backward() orders the
// recorded nodes topologically, runs every closure once and then clears the
// recorded graph so intermediate buffers are released.

#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ctflow/tensor.hpp"

namespace ctflow {

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor<T>& g);
  Tensor<T>& grad_buffer();
};

}  // namespace detail

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for in-place parameter updates. Only valid on leaves.
  Tensor<T>& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient accumulated by backward(); zeros when nothing reached this node.
  Tensor<T> grad() const;
  void zero_grad() { node_->grad = Tensor<T>(); }
  bool is_leaf() const { return !node_->backward_fn; }

  /// Identity of the underlying node (two handles share parameters iff equal).
  const void* id() const noexcept { return node_.get(); }

  // Internal plumbing for operation implementations.
  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// While alive, ops on this thread record no graph (inference).
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

/// Builds a result node; the graph edges are only kept when an input needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, const char* op, std::vector<Var<T>> inputs,
                   std::function<void(detail::Node<T>&)> backward_fn);

// -- elementwise --------------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T c);
/// Throws NumericError when any input exceeds exp_input_limit<T>().
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);

/// Largest input accepted by exp() before the result could overflow.
template <typename T>
constexpr T exp_input_limit() {
  return std::is_same_v<T, float> ? T(80) : T(700);
}

enum class Elementwise { kAdd, kSub, kMul, kExp, kTanh, kLeakyRelu, kScale };

/// Dispatching form of the elementwise family; `param` is the slope or scale factor.
template <typename T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const std::type_identity_t<Var<T>>* b = nullptr,
                   std::type_identity_t<T> param = T{0});

// -- reductions ---------------------------------------------------------------
template <typename T> Var<T> sum(const Var<T>& a);

// -- layout -------------------------------------------------------------------
/// Channels [begin, end) of an NCHW tensor.
template <typename T> Var<T> channel_slice(const Var<T>& x, std::size_t begin, std::size_t end);
template <typename T> std::pair<Var<T>, Var<T>> channel_split(const Var<T>& x);
template <typename T> Var<T> channel_concat(const std::vector<Var<T>>& parts);
template <typename T> Var<T> channel_concat(const Var<T>& a, const Var<T>& b) { return channel_concat<T>({a, b}); }

/// Space-to-depth: out[n, c*r*r + dy*r + dx, h, w] = in[n, c, h*r + dy, w*r + dx].
template <typename T> Var<T> pixel_unshuffle(const Var<T>& x, std::size_t r);
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, std::size_t r);

// -- convolution --------------------------------------------------------------
/// Stride-1 cross-correlation with zero padding. weight is [Cout, Cin, k, k].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t padding);

/// Populates gradients of every leaf reachable from `loss` (must hold one element).
template <typename T>
void backward(const Var<T>& loss);

// Plain-tensor kernels shared with code that has no use for a graph.
namespace kernels {
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding);
}  // namespace kernels

}  // namespace ctflow
