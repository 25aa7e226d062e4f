#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sitsmamba {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::uint64_t generation = 0;  // tape generation of the producing op, 0 for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
  }
};

// Depth counter shared by every scalar type; recording is off while > 0.
inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Dense row-major n-dimensional array. Copies share storage; values are
/// treated as immutable once created, except through `values_mut()` on
/// leaves (optimizer updates, checkpoint loading) and gradient accumulation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t extent(std::size_t axis) const;

  std::span<const T> values() const { return node_->value; }
  std::span<T> values_mut();
  T item() const;
  T operator[](std::size_t flat_index) const { return node_->value[flat_index]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut();
  void zero_grad();

  /// Same values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorNode<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Ordered record of the differentiable ops executed on this thread since
/// the last backward pass. Entries are replayed in reverse execution order,
/// which is a reverse topological order of the graph.
template <typename T>
class Tape {
 public:
  static Tape& local();

  bool recording() const { return detail::no_grad_depth == 0; }
  std::uint64_t generation() const { return generation_; }
  std::size_t size() const { return entries_.size(); }

  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

  /// Drops every recorded op without running it.
  void clear();

  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> entries_;
  std::uint64_t generation_ = 1;
};

/// Populates d(loss)/d(leaf) for every tracked leaf and clears the tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>::local().backward(loss);
}

}  // namespace sitsmamba
