#include "aelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "gemm.hpp"
#include "op_support.hpp"

namespace aelab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  node_->data.assign(shape_numel(shape), T{0});
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  BasicTensor out(std::move(shape));
  std::fill(out.node_->data.begin(), out.node_->data.end(), value);
  return out;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  node_->grad.assign(node_->data.size(), T{0});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->shape, node_->data);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
template <typename T>
thread_local Tape<T>* active_tape = nullptr;
}

template <typename T>
Tape<T>::Recording::Recording(Tape* tape) : previous_(active_tape<T>) {
  active_tape<T> = tape;
}

template <typename T>
Tape<T>::Recording::~Recording() {
  active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>;
}

template <typename T>
Tape<T>::~Tape() {
  clear();
}

template <typename T>
void Tape<T>::push(NodePtr output, std::vector<NodePtr> inputs,
                   std::function<void()> backward_rule) {
  output->tape = this;
  output->tape_index = entries_.size();
  entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(backward_rule)});
}

template <typename T>
void Tape<T>::clear() {
  for (auto& e : entries_) {
    if (e.output->tape == this) e.output->tape = nullptr;
  }
  entries_.clear();
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& node = loss.node();
  if (node->tape != this) throw ContractError("backward: loss was not produced on this tape");
  const std::size_t last = node->tape_index;
  for (std::size_t i = 0; i <= last; ++i) entries_[i].output->grad.clear();
  node->grad.assign(1, T{1});
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!entries_[i].output->grad.empty()) entries_[i].backward_rule();
  }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.node()->tape == nullptr) {
    throw ContractError("backward: loss is not attached to a tape");
  }
  loss.node()->tape->backward(loss);
}

template <typename T>
BasicTensor<T> randn(Shape shape, Rng& rng) {
  BasicTensor<T> out(std::move(shape));
  for (auto& v : out.mutable_data()) v = static_cast<T>(rng.normal());
  return out;
}

template <typename T>
BasicTensor<T> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  BasicTensor<T> out(std::move(shape));
  for (auto& v : out.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out(Shape{m, n});
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(),
               out.mutable_data().data(), false);
  detail::record(out, {&a, &b},
                 [o = out.node().get(), an = a.node().get(), bn = b.node().get(), m, n, k] {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     // dA = dOut · Bᵀ
                     detail::gemm(false, true, m, k, n, o->grad.data(), bn->data.data(),
                                  an->grad.data(), true);
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     // dB = Aᵀ · dOut
                     detail::gemm(true, false, k, n, m, an->data.data(), o->grad.data(),
                                  bn->grad.data(), true);
                   }
                 });
  return out;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out_features = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{out_features}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  BasicTensor<T> out(Shape{rows, out_features});
  auto od = out.mutable_data();
  detail::gemm(false, true, rows, out_features, in, x.data().data(), weight.data().data(),
               od.data(), false);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_features; ++j) od[r * out_features + j] += bd[j];
    }
  }
  detail::record(out, {&x, &weight, &bias},
                 [o = out.node().get(), xn = x.node().get(), wn = weight.node().get(),
                  bn = bias.defined() ? bias.node().get() : nullptr, rows, in, out_features] {
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     detail::gemm(false, false, rows, in, out_features, o->grad.data(),
                                  wn->data.data(), xn->grad.data(), true);
                   }
                   if (wn->requires_grad) {
                     wn->ensure_grad();
                     detail::gemm(true, false, out_features, in, rows, o->grad.data(),
                                  xn->data.data(), wn->grad.data(), true);
                   }
                   if (detail::wants_grad(bn)) {
                     bn->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < out_features; ++j) {
                         bn->grad[j] += o->grad[r * out_features + j];
                       }
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T, typename Fn>
BasicTensor<T> map_unary(const BasicTensor<T>& x, Fn fn) {
  BasicTensor<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fn(xd[i]);
  return out;
}

enum class Operand { kTensor, kScalar };

template <typename T>
void check_binary(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() == b.shape()) return;
  if (a.rank() == 0 || b.rank() == 0) return;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Index helpers for binary ops where one side may be rank 0.
template <typename T>
struct Broadcast {
  std::size_t n;
  bool a_scalar;
  bool b_scalar;
  Broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b)
      : n(std::max(a.numel(), b.numel())),
        a_scalar(a.rank() == 0 && b.rank() != 0),
        b_scalar(b.rank() == 0 && a.rank() != 0) {}
  std::size_t ia(std::size_t i) const { return a_scalar ? 0 : i; }
  std::size_t ib(std::size_t i) const { return b_scalar ? 0 : i; }
};

template <typename T>
Shape binary_shape(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.rank() == 0 ? b.shape() : a.shape();
}

}  // namespace

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  auto out = map_unary(x, [](T v) { return v > T{0} ? v : T{0}; });
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      if (xn->data[i] > T{0}) xn->grad[i] += o->grad[i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  // Clamped so the range stays strictly inside (0, 1) at finite precision.
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T{1}, T{0});
  auto out = map_unary(x, [lo, hi](T v) {
    T s;
    if (v >= T{0}) {
      s = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T{1} + e);
    }
    return std::clamp(s, lo, hi);
  });
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      const T s = o->data[i];
      xn->grad[i] += o->grad[i] * s * (T{1} - s);
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  auto out = map_unary(x, [](T v) { return std::exp(v); });
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i] * o->data[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_binary("add", a, b);
  Broadcast<T> bc(a, b);
  BasicTensor<T> out(binary_shape(a, b));
  auto od = out.mutable_data();
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < bc.n; ++i) od[i] = ad[bc.ia(i)] + bd[bc.ib(i)];
  detail::record(out, {&a, &b}, [o = out.node().get(), an = a.node().get(), bn = b.node().get(), bc] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) an->grad[bc.ia(i)] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) bn->grad[bc.ib(i)] += o->grad[i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_binary("sub", a, b);
  Broadcast<T> bc(a, b);
  BasicTensor<T> out(binary_shape(a, b));
  auto od = out.mutable_data();
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < bc.n; ++i) od[i] = ad[bc.ia(i)] - bd[bc.ib(i)];
  detail::record(out, {&a, &b}, [o = out.node().get(), an = a.node().get(), bn = b.node().get(), bc] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) an->grad[bc.ia(i)] += o->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) bn->grad[bc.ib(i)] -= o->grad[i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_binary("mul", a, b);
  Broadcast<T> bc(a, b);
  BasicTensor<T> out(binary_shape(a, b));
  auto od = out.mutable_data();
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < bc.n; ++i) od[i] = ad[bc.ia(i)] * bd[bc.ib(i)];
  detail::record(out, {&a, &b}, [o = out.node().get(), an = a.node().get(), bn = b.node().get(), bc] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) an->grad[bc.ia(i)] += o->grad[i] * bn->data[bc.ib(i)];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < bc.n; ++i) bn->grad[bc.ib(i)] += o->grad[i] * an->data[bc.ia(i)];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  auto out = map_unary(x, [factor](T v) { return v * factor; });
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get(), factor] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i] * factor;
  });
  return out;
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  auto out = map_unary(x, [value](T v) { return v + value; });
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const auto xd = x.data();
  // Accumulate in double so float reductions over large images stay stable.
  double acc = 0.0;
  for (T v : xd) acc += static_cast<double>(v);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    const T g = o->grad[0];
    for (auto& v : xn->grad) v += g;
  });
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const auto xd = x.data();
  double acc = 0.0;
  for (T v : xd) acc += static_cast<double>(v);
  const auto n = static_cast<double>(xd.size());
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc / n));
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    const T g = o->grad[0] / static_cast<T>(xn->data.size());
    for (auto& v : xn->grad) v += g;
  });
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record(out, {&x}, [o = out.node().get(), xn = x.node().get()] {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x, std::size_t start_dim) {
  if (start_dim > x.rank()) {
    throw ShapeError("flatten: start_dim " + std::to_string(start_dim) + " beyond shape " +
                     shape_str(x.shape()));
  }
  Shape shape(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(start_dim));
  std::size_t tail = 1;
  for (std::size_t d = start_dim; d < x.rank(); ++d) tail *= x.dim(d);
  shape.push_back(tail);
  return reshape(x, std::move(shape));
}

template <typename T>
BasicTensor<T> concat_columns(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_columns: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), na = a.dim(1), nb = b.dim(1), n = na + nb;
  BasicTensor<T> out(Shape{rows, n});
  auto od = out.mutable_data();
  const auto ad = a.data(), bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.begin() + r * na, na, od.begin() + r * n);
    std::copy_n(bd.begin() + r * nb, nb, od.begin() + r * n + na);
  }
  detail::record(out, {&a, &b},
                 [o = out.node().get(), an = a.node().get(), bn = b.node().get(), rows, na, nb, n] {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < na; ++j) an->grad[r * na + j] += o->grad[r * n + j];
                     }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < nb; ++j) {
                         bn->grad[r * nb + j] += o->grad[r * n + na + j];
                       }
                     }
                   }
                 });
  return out;
}

#define AELAB_INSTANTIATE(T)                                                                   \
  template class BasicTensor<T>;                                                               \
  template class Tape<T>;                                                                      \
  template void backward<T>(const BasicTensor<T>&);                                            \
  template BasicTensor<T> randn<T>(Shape, Rng&);                                               \
  template BasicTensor<T> rand_uniform<T>(Shape, Rng&, double, double);                        \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                    const BasicTensor<T>&);                                    \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                      \
  template BasicTensor<T> sigmoid<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> exp<T>(const BasicTensor<T>&);                                       \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                             \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                       \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                      \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                            \
  template BasicTensor<T> flatten<T>(const BasicTensor<T>&, std::size_t);                      \
  template BasicTensor<T> concat_columns<T>(const BasicTensor<T>&, const BasicTensor<T>&);

AELAB_INSTANTIATE(float)
AELAB_INSTANTIATE(double)

#undef AELAB_INSTANTIATE

}  // namespace aelab
