#include "sitsmamba/tensor.hpp"

#include <sstream>

namespace sitsmamba {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " elements");
  }
  node_ = std::make_shared<detail::TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T{0}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::values_mut() {
  if (node_->generation != 0) throw AutodiffError("values_mut: tensor is not a leaf");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (node_->generation != 0) throw AutodiffError("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = on;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
Tape<T>& Tape<T>::local() {
  static thread_local Tape tape;
  return tape;
}

template <typename T>
void Tape<T>::clear() {
  entries_.clear();
  ++generation_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward: loss must be a scalar");
  }
  const auto& node = loss.node();
  if (!node->requires_grad || node->generation == 0) {
    throw AutodiffError("backward: loss was not produced by a recorded op");
  }
  if (node->generation != generation_ || entries_.empty()) {
    throw AutodiffError("backward: tape already consumed; run a new forward pass first");
  }
  node->ensure_grad();
  node->grad[0] += T{1};
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace sitsmamba
