#include "ctflow/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ctflow {

namespace detail {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  T* dst = grad.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return;
  std::string msg = std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb);
  if (sa.size() != sb.size()) {
    msg += " (rank " + std::to_string(sa.size()) + " vs " + std::to_string(sb.size()) + ")";
  } else {
    for (std::size_t i = 0; i < sa.size(); ++i) {
      if (sa[i] != sb[i]) {
        msg += " (dimension " + std::to_string(i) + ": " + std::to_string(sa[i]) + " vs " + std::to_string(sb[i]) + ")";
        break;
      }
    }
  }
  throw ShapeError(msg);
}

template <typename T>
void require_rank4(const char* op, const Var<T>& x) {
  if (x.shape().size() != 4) {
    throw ShapeError(std::string(op) + ": expected an NCHW tensor, got shape " + shape_str(x.shape()));
  }
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.ptr();
  T* dst = out.ptr();
  for (std::size_t i = 0; i < a.numel(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<detail::Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>& Var<T>::mutable_value() {
  if (!is_leaf()) throw std::logic_error("mutable_value() on a non-leaf node");
  return node_->value;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
  return node_->grad;
}

template <typename T>
Var<T> make_result(Tensor<T> value, const char* op, std::vector<Var<T>> inputs,
                   std::function<void(detail::Node<T>&)> backward_fn) {
  if (!all_finite(value)) {
    throw NumericError(std::string(op) + " produced a non-finite value (output shape " + shape_str(value.shape()) +
                       ")");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->value = std::move(value);
  node->op = op;
  const bool needs_grad = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

// -- elementwise --------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), "add", {a, b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate(self.grad);
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), "sub", {a, b}, [](detail::Node<T>& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), "mul", {a, b}, [](detail::Node<T>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      Tensor<T>& g = lhs.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * rhs.value[i];
    }
    if (rhs.requires_grad) {
      Tensor<T>& g = rhs.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * lhs.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = map_unary(a.value(), [c](T v) { return c * v; });
  return make_result<T>(std::move(out), "scale", {a}, [c](detail::Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  constexpr T limit = exp_input_limit<T>();
  for (T v : a.value().data()) {
    if (v > limit) {
      throw NumericError("exp: input " + std::to_string(v) + " exceeds the overflow-safe bound " +
                         std::to_string(limit));
    }
  }
  Tensor<T> out = map_unary(a.value(), [](T v) { return std::exp(v); });
  return make_result<T>(std::move(out), "exp", {a}, [](detail::Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = map_unary(a.value(), [](T v) { return std::tanh(v); });
  return make_result<T>(std::move(out), "tanh", {a}, [](detail::Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * (T{1} - y * y);
    }
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  if (!(slope > T{0})) throw std::invalid_argument("leaky_relu: slope must be positive");
  Tensor<T> out = map_unary(a.value(), [slope](T v) { return v > T{0} ? v : slope * v; });
  // With a positive slope the output sign matches the input sign.
  return make_result<T>(std::move(out), "leaky_relu", {a}, [slope](detail::Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.value[i] > T{0} ? self.grad[i] : slope * self.grad[i];
  });
}

template <typename T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const std::type_identity_t<Var<T>>* b, std::type_identity_t<T> param) {
  auto need_b = [&]() -> const Var<T>& {
    if (b == nullptr) throw std::invalid_argument("elementwise: binary operation needs a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::kAdd:
      return add(a, need_b());
    case Elementwise::kSub:
      return sub(a, need_b());
    case Elementwise::kMul:
      return mul(a, need_b());
    case Elementwise::kExp:
      return exp(a);
    case Elementwise::kTanh:
      return tanh(a);
    case Elementwise::kLeakyRelu:
      return leaky_relu(a, param);
    case Elementwise::kScale:
      return scale(a, param);
  }
  throw std::invalid_argument("elementwise: unknown operation");
}

// -- reductions ---------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  return make_result<T>(Tensor<T>({1}, total), "sum", {a}, [](detail::Node<T>& self) {
    Tensor<T>& g = self.inputs[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += up;
  });
}

// -- layout -------------------------------------------------------------------

template <typename T>
Var<T> channel_slice(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank4("channel_slice", x);
  const Shape& s = x.shape();
  if (begin >= end || end > s[1]) {
    throw ShapeError("channel_slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + std::to_string(s[1]) + " channels");
  }
  const std::size_t plane = s[2] * s[3];
  const std::size_t width = end - begin;
  Tensor<T> out({s[0], width, s[2], s[3]});
  for (std::size_t n = 0; n < s[0]; ++n) {
    const T* src = x.value().ptr() + (n * s[1] + begin) * plane;
    std::copy(src, src + width * plane, out.ptr() + n * width * plane);
  }
  return make_result<T>(std::move(out), "channel_slice", {x}, [begin, width, plane](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    Tensor<T>& g = in.grad_buffer();
    const std::size_t channels = in.value.dim(1);
    for (std::size_t n = 0; n < in.value.dim(0); ++n) {
      T* dst = g.ptr() + (n * channels + begin) * plane;
      const T* src = self.grad.ptr() + n * width * plane;
      for (std::size_t i = 0; i < width * plane; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
std::pair<Var<T>, Var<T>> channel_split(const Var<T>& x) {
  require_rank4("channel_split", x);
  const std::size_t c = x.dim(1);
  if (c % 2 != 0) throw ShapeError("channel_split: channel count " + std::to_string(c) + " is odd");
  return {channel_slice(x, 0, c / 2), channel_slice(x, c / 2, c)};
}

template <typename T>
Var<T> channel_concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no inputs");
  for (const auto& p : parts) require_rank4("channel_concat", p);
  const Shape& s0 = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("channel_concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    }
    channels += s[1];
  }
  const std::size_t plane = s0[2] * s0[3];
  Tensor<T> out({s0[0], channels, s0[2], s0[3]});
  for (std::size_t n = 0; n < s0[0]; ++n) {
    T* dst = out.ptr() + n * channels * plane;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(1) * plane;
      const T* src = p.value().ptr() + n * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return make_result<T>(std::move(out), "channel_concat", parts, [channels, plane](detail::Node<T>& self) {
    const std::size_t batch = self.value.dim(0);
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->value.dim(1) * plane;
      if (in->requires_grad) {
        Tensor<T>& g = in->grad_buffer();
        for (std::size_t n = 0; n < batch; ++n) {
          const T* src = self.grad.ptr() + n * channels * plane + offset;
          T* dst = g.ptr() + n * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
}

namespace kernels {

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_unshuffle: expected NCHW, got " + shape_str(x.shape()));
  if (r == 0) throw ShapeError("pixel_unshuffle: factor must be positive");
  const std::size_t n_ = x.dim(0), c_ = x.dim(1), h_ = x.dim(2), w_ = x.dim(3);
  if (h_ % r != 0 || w_ % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial size " + std::to_string(h_) + "x" + std::to_string(w_) +
                     " is not divisible by " + std::to_string(r) + "; pad the input to a multiple of the factor");
  }
  const std::size_t oh = h_ / r, ow = w_ / r;
  Tensor<T> out({n_, c_ * r * r, oh, ow});
  for (std::size_t n = 0; n < n_; ++n)
    for (std::size_t c = 0; c < c_; ++c)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx) {
          const std::size_t oc = c * r * r + dy * r + dx;
          for (std::size_t h = 0; h < oh; ++h)
            for (std::size_t w = 0; w < ow; ++w) out.at(n, oc, h, w) = x.at(n, c, h * r + dy, w * r + dx);
        }
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle: expected NCHW, got " + shape_str(x.shape()));
  if (r == 0) throw ShapeError("pixel_shuffle: factor must be positive");
  const std::size_t n_ = x.dim(0), cin = x.dim(1), h_ = x.dim(2), w_ = x.dim(3);
  if (cin % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channel count " + std::to_string(cin) + " is not divisible by " +
                     std::to_string(r * r));
  }
  const std::size_t c_ = cin / (r * r);
  Tensor<T> out({n_, c_, h_ * r, w_ * r});
  for (std::size_t n = 0; n < n_; ++n)
    for (std::size_t c = 0; c < c_; ++c)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx) {
          const std::size_t ic = c * r * r + dy * r + dx;
          for (std::size_t h = 0; h < h_; ++h)
            for (std::size_t w = 0; w < w_; ++w) out.at(n, c, h * r + dy, w * r + dx) = x.at(n, ic, h, w);
        }
  return out;
}

}  // namespace kernels

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::size_t r) {
  return make_result<T>(kernels::pixel_unshuffle(x.value(), r), "pixel_unshuffle", {x},
                        [r](detail::Node<T>& self) {
                          self.inputs[0]->accumulate(kernels::pixel_shuffle(self.grad, r));
                        });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
  return make_result<T>(kernels::pixel_shuffle(x.value(), r), "pixel_shuffle", {x}, [r](detail::Node<T>& self) {
    self.inputs[0]->accumulate(kernels::pixel_unshuffle(self.grad, r));
  });
}

// -- backward -----------------------------------------------------------------

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must hold a single element, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  using NodePtr = detail::Node<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Tensor<T>(loss.shape(), T{1}));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (NodePtr node : order) {
    if (!node->backward_fn) continue;
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->grad = Tensor<T>();
    node->requires_grad = false;
  }
}

#define CTFLOW_INSTANTIATE(T)                                                                                   \
  template struct detail::Node<T>;                                                                             \
  template class Var<T>;                                                                                       \
  template Var<T> make_result(Tensor<T>, const char*, std::vector<Var<T>>, std::function<void(detail::Node<T>&)>); \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> scale(const Var<T>&, T);                                                                     \
  template Var<T> exp(const Var<T>&);                                                                          \
  template Var<T> tanh(const Var<T>&);                                                                         \
  template Var<T> leaky_relu(const Var<T>&, T);                                                                \
  template Var<T> elementwise(Elementwise, const Var<T>&, const Var<T>*, T);                                   \
  template Var<T> sum(const Var<T>&);                                                                          \
  template Var<T> channel_slice(const Var<T>&, std::size_t, std::size_t);                                      \
  template std::pair<Var<T>, Var<T>> channel_split(const Var<T>&);                                             \
  template Var<T> channel_concat(const std::vector<Var<T>>&);                                                  \
  template Var<T> pixel_unshuffle(const Var<T>&, std::size_t);                                                 \
  template Var<T> pixel_shuffle(const Var<T>&, std::size_t);                                                   \
  template Tensor<T> kernels::pixel_unshuffle(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> kernels::pixel_shuffle(const Tensor<T>&, std::size_t);                                    \
  template void backward(const Var<T>&);

CTFLOW_INSTANTIATE(float)
CTFLOW_INSTANTIATE(double)
CTFLOW_INSTANTIATE(long double)

}  // namespace ctflow
