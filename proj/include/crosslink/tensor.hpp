#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crosslink {

using Shape = std::vector<std::size_t>;

/// Raised when operands have incompatible extents. The message names the axis.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets the autodiff tape hold on to activations and accumulate into the
/// gradients of parameters owned elsewhere. Use clone() for a deep copy.
/// Activations are laid out N x C x H x W, kernels O x I x Kh x Kw.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<T> values() { return impl_->values; }
  std::span<const T> values() const { return impl_->values; }
  T* data() { return impl_->values.data(); }
  const T* data() const { return impl_->values.data(); }

  T& operator[](std::size_t i) { return impl_->values[i]; }
  const T& operator[](std::size_t i) const { return impl_->values[i]; }

  /// NCHW element access; rank must be 4.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  /// The single value of a one-element tensor.
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  /// Gradient storage, zero-initialised on first use.
  std::span<T> grad_buffer();
  void zero_grad();
  void clear_grad() { impl_->grad = {}; }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

/// Throws ShapeError unless `t` is rank 4.
template <typename T>
void require_rank4(const Tensor<T>& t, const char* what);

/// Tensor with values cast to another scalar type (no gradient).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace crosslink
