#include "crosslink/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace crosslink {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Storage>()) {
  impl_->values.assign(crosslink::numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Storage>()) {
  if (crosslink::numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(crosslink::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

template <typename T>
T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const auto& s = impl_->shape;
  return impl_->values[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
const T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const auto& s = impl_->shape;
  return impl_->values[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item: expected one element, shape is " + to_string(shape()));
  }
  return impl_->values[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T{0});
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->values);
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + ": expected NCHW tensor, got shape " +
                     to_string(t.shape()));
  }
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(v));
}

template class Tensor<float>;
template class Tensor<double>;
template void require_rank4(const Tensor<float>&, const char*);
template void require_rank4(const Tensor<double>&, const char*);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace crosslink
