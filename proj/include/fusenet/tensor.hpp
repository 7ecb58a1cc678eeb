#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fusenet {

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Tensor shape. Rank 4 (batch, channel, height, width) carries all feature
/// maps; rank 1 holds per-channel vectors (biases); rank 0 is a scalar loss.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Eigen::Index> dims) : rank_(int(dims.size())) {
    if (dims.size() > 4) throw std::invalid_argument("Shape: rank above 4 is not supported");
    int i = 0;
    for (auto d : dims) {
      if (d <= 0) throw std::invalid_argument("Shape: non-positive dimension");
      dims_[i++] = d;
    }
  }

  int rank() const { return rank_; }
  Eigen::Index operator[](int i) const { return dims_[i]; }

  Eigen::Index count() const {
    Eigen::Index c = 1;
    for (int i = 0; i < rank_; ++i) c *= dims_[i];
    return c;
  }

  Eigen::Index n() const { require_rank4(); return dims_[0]; }
  Eigen::Index c() const { require_rank4(); return dims_[1]; }
  Eigen::Index h() const { require_rank4(); return dims_[2]; }
  Eigen::Index w() const { require_rank4(); return dims_[3]; }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  void require_rank4() const {
    if (rank_ != 4) throw std::logic_error("Shape: rank-4 accessor on shape " + str());
  }
  std::array<Eigen::Index, 4> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

template <typename S>
class Tensor;

namespace detail {

/// Reverse-mode tape node. The producing operation stores the handles of its
/// inputs (the DAG edges) and a closure that maps the output's gradient
/// buffer onto gradient contributions for each input.
template <typename S>
struct OpNode {
  const char* op = "";
  std::vector<Tensor<S>> inputs;
  std::function<void(const ArrayX<S>& values, const ArrayX<S>& grad)> backprop;
};

template <typename S>
struct TensorImpl {
  Shape shape;
  ArrayX<S> values;
  ArrayX<S> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  std::shared_ptr<OpNode<S>> node;
};

}  // namespace detail

/// Shared handle to a dense tensor. Values are written once by the producing
/// operation; gradients accumulate across backward passes until the caller
/// zeroes them.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : impl_(std::make_shared<detail::TensorImpl<S>>()) {}

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.impl_->shape = shape;
    t.impl_->values = ArrayX<S>::Zero(shape.count());
    return t;
  }

  static Tensor full(const Shape& shape, S value) {
    Tensor t = zeros(shape);
    t.impl_->values.setConstant(value);
    return t;
  }

  static Tensor scalar(S value) { return full(Shape{}, value); }

  static Tensor from(const Shape& shape, std::initializer_list<S> values) {
    return from(shape, std::vector<S>(values));
  }

  static Tensor from(const Shape& shape, const std::vector<S>& values) {
    if (Eigen::Index(values.size()) != shape.count())
      throw std::invalid_argument("Tensor::from: value count does not match shape " + shape.str());
    Tensor t = zeros(shape);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.impl_->values[i] = values[size_t(i)];
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  Eigen::Index size() const { return impl_->values.size(); }

  const ArrayX<S>& array() const { return impl_->values; }
  ArrayX<S>& raw() { return impl_->values; }
  const S* data() const { return impl_->values.data(); }
  S* data() { return impl_->values.data(); }

  S value() const {
    if (size() != 1) throw std::logic_error("Tensor::value: not a scalar, shape " + shape().str());
    return impl_->values[0];
  }

  S& at(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) {
    return impl_->values[flat_index(n, c, h, w)];
  }
  S at(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
    return impl_->values[flat_index(n, c, h, w)];
  }

  Eigen::Index flat_index(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
    const Shape& s = impl_->shape;
    return ((n * s.c() + c) * s.h() + h) * s.w() + w;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() > 0; }

  /// Gradient buffer, allocated to zeros on first use.
  ArrayX<S>& grad_buffer() {
    if (impl_->grad.size() == 0) impl_->grad = ArrayX<S>::Zero(size());
    return impl_->grad;
  }
  const ArrayX<S>& grad() const {
    if (impl_->grad.size() == 0)
      const_cast<detail::TensorImpl<S>*>(impl_.get())->grad = ArrayX<S>::Zero(size());
    return impl_->grad;
  }

  void zero_grad() {
    if (impl_->grad.size() > 0) impl_->grad.setZero();
  }

  void attach_node(const char* op, std::vector<Tensor<S>> inputs,
                   std::function<void(const ArrayX<S>&, const ArrayX<S>&)> backprop) {
    auto node = std::make_shared<detail::OpNode<S>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backprop = std::move(backprop);
    impl_->node = std::move(node);
    impl_->requires_grad = true;
  }

  const std::shared_ptr<detail::OpNode<S>>& node() const { return impl_->node; }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
  detail::TensorImpl<S>* key() const { return impl_.get(); }

  void backward() const;

 private:
  std::shared_ptr<detail::TensorImpl<S>> impl_;
};

/// Runs reverse-mode accumulation from a scalar loss over the recorded tape,
/// in reverse topological order. Gradients add onto whatever is already in
/// each buffer; callers zero between steps.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + loss.shape().str());

  // Iterative post-order DFS over producing nodes.
  std::vector<Tensor<S>> order;
  std::unordered_set<const void*> visited;
  struct Frame {
    Tensor<S> t;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss});
  visited.insert(loss.key());
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& node = f.t.node();
    if (!node || f.next >= node->inputs.size()) {
      order.push_back(f.t);
      stack.pop_back();
      continue;
    }
    Tensor<S> next = node->inputs[f.next++];
    if (visited.insert(next.key()).second && next.node()) stack.push_back({next});
  }

  Tensor<S> root = loss;
  root.grad_buffer()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = it->node();
    if (!node || !node->backprop) continue;
    if (!it->has_grad()) continue;
    node->backprop(it->array(), it->grad());
  }
}

template <typename S>
void Tensor<S>::backward() const {
  fusenet::backward(*this);
}

}  // namespace fusenet
