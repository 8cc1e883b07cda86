#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crosslink/tensor.hpp"

namespace crosslink {

/// Ordered record of executed differentiable operations.
///
/// Ops append an entry when a tape is active (see TapeScope) and at least one
/// input requires a gradient. backward() seeds the scalar output with 1 and
/// replays the entries once each, newest first; every entry pushes its
/// output gradient into the gradients of its inputs.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, Tensor<T> output, BackwardFn fn);

  /// Reverse-mode sweep from a one-element tensor. Clears the tape.
  void backward(Tensor<T>& scalar_output);
  void clear() { entries_.clear(); }

  std::size_t size() const { return entries_.size(); }
  /// Op names in execution order.
  std::vector<std::string> ops() const;

  /// Debug hook: scales the upstream gradient handed to every entry whose op
  /// name matches, so that op's input gradients come out wrong.
  void inject_fault(std::string op, T scale = T{1.5});
  void clear_fault() { fault_op_.clear(); }

  /// Tape that ops on this thread record into, or nullptr.
  static Tape* active() { return active_slot(); }
  static Tape*& active_slot();

 private:
  struct Entry {
    std::string op;
    Tensor<T> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::string fault_op_;
  T fault_scale_ = T{1};
};

/// Makes a tape the active one for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_slot()) {
    Tape<T>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread while in scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active_slot() = nullptr; }
  ~NoGradScope() { Tape<T>::active_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace crosslink
