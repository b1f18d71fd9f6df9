#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aelab/errors.hpp"
#include "aelab/random.hpp"

namespace aelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is written
  bool requires_grad = false;
  Tape<T>* tape = nullptr;  // producing tape, null for leaves
  std::size_t tape_index = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  }
};

}  // namespace detail

/// Dense row-major tensor with an optional gradient buffer.
///
/// Copies share the underlying node, so a parameter held by a layer and the
/// handle returned by `parameters()` see the same data and gradient. Shape is
/// fixed at construction; `reshape` produces a new tensor.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }
  static BasicTensor full(Shape shape, T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  /// Allocates the gradient buffer if needed and fills it with zeros.
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool value) {
    node_->requires_grad = value;
    return *this;
  }

  /// Fresh leaf holding a copy of the data; no gradient, no tape.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(node_->shape, std::move(out));
  }

  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of differentiable operations.
///
/// Operations record themselves on the tape that is active on the calling
/// thread (see `Recording`). With no active tape, ops compute values only.
/// A tape and every tensor it produced stay on one thread.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  class Recording {
   public:
    explicit Recording(Tape& tape) : Recording(&tape) {}
    /// A null tape suspends recording for the scope.
    explicit Recording(Tape* tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void push(NodePtr output, std::vector<NodePtr> inputs, std::function<void()> backward_rule);

  /// Reverse pass from a scalar produced on this tape. Leaf gradients
  /// accumulate across calls; intermediate gradients are reset each call.
  void backward(const BasicTensor<T>& loss);

  void clear();
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    NodePtr output;
    std::vector<NodePtr> inputs;
    std::function<void()> backward_rule;
  };
  std::vector<Entry> entries_;
};

/// Runs the reverse pass on the tape that produced `loss`.
template <typename T>
void backward(const BasicTensor<T>& loss);

template <typename T>
BasicTensor<T> randn(Shape shape, Rng& rng);
template <typename T>
BasicTensor<T> rand_uniform(Shape shape, Rng& rng, double lo, double hi);

// Differentiable operations. Elementwise binary ops require equal shapes or a
// rank-0 operand; there is no other broadcasting.

/// a[m×k] · b[k×n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// x[B×in] · weightᵀ + bias, weight[out×in], bias[out] (bias may be undefined).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);
/// Cross-correlation with zero padding. x is C×H×W or N×C×H×W, weight is
/// C_out×C_in×kH×kW.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int pad);
/// Adjoint of conv2d with the same geometry. weight is C_in×C_out×kH×kW.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, int stride, int pad);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
/// Collapses dimensions [start_dim, rank) into one.
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x, std::size_t start_dim = 0);
/// Joins two rank-2 tensors with equal row count along columns.
template <typename T>
BasicTensor<T> concat_columns(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace aelab
