#include "crosslink/tape.hpp"

#include <algorithm>

namespace crosslink {

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
void Tape<T>::record(std::string_view op, Tensor<T> output, BackwardFn fn) {
  entries_.push_back(Entry{std::string(op), std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(Tensor<T>& scalar_output) {
  if (scalar_output.numel() != 1) {
    entries_.clear();
    throw ShapeError("backward: output must have exactly one element, shape is " +
                     to_string(scalar_output.shape()));
  }
  auto seed = scalar_output.grad_buffer();
  seed[0] += T{1};

  std::vector<T> scaled;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // nothing downstream depended on it
    std::span<const T> g = it->output.grad();
    if (!fault_op_.empty() && it->op == fault_op_) {
      scaled.assign(g.begin(), g.end());
      for (auto& v : scaled) v *= fault_scale_;
      g = scaled;
    }
    it->fn(g);
  }
  entries_.clear();
}

template <typename T>
std::vector<std::string> Tape<T>::ops() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

template <typename T>
void Tape<T>::inject_fault(std::string op, T scale) {
  fault_op_ = std::move(op);
  fault_scale_ = scale;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace crosslink
