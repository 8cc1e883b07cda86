#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>

#include "crosslink/tape.hpp"
#include "crosslink/tensor.hpp"

namespace crosslink {

/// Stride-1 convolution with symmetric zero padding per axis.
struct ConvParams {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  /// True when the padding keeps H and W unchanged.
  bool preserves_size() const {
    return kernel_h == 2 * pad_h + 1 && kernel_w == 2 * pad_w + 1;
  }
  std::string to_string() const;
};

enum class BatchNormMode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Fingerprint of the branch decisions taken by non-smooth ops (ReLU signs,
/// pooling and attention argmaxes, probability clamps) on this thread while
/// in scope. Two evaluations with equal fingerprints lie on the same smooth
/// piece of the function, which is what finite-difference checks need.
class BranchProbe {
 public:
  BranchProbe() : previous_(slot()) { slot() = this; }
  ~BranchProbe() { slot() = previous_; }
  BranchProbe(const BranchProbe&) = delete;
  BranchProbe& operator=(const BranchProbe&) = delete;

  std::uint64_t fingerprint() const { return hash_; }
  void mix(std::uint64_t v);
  /// Mixes one bit per element, packed 64 to a word.
  template <typename Pred>
  void mix_bits(std::size_t n, Pred bit) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < n; ++i) {
      word |= std::uint64_t(bit(i) ? 1 : 0) << (i % 64);
      if (i % 64 == 63 || i + 1 == n) mix(word), word = 0;
    }
    mix(n);
  }

  static BranchProbe* active() { return slot(); }

 private:
  static BranchProbe*& slot();
  BranchProbe* previous_;
  std::uint64_t hash_ = 0x6a09e667f3bcc909ull;
};

namespace ops {

/// Cross-correlation (no kernel flip). `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvParams& params);

/// 2x2 window, stride 2. Gradient goes to the first maximum in scan order.
template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& input);

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& input);

/// Bilinear 2x upsampling, half-pixel centres (align_corners = false).
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& input);

/// Per-channel batch normalisation over N, H, W.
///
/// Train mode normalises with batch statistics and folds them into the
/// running estimates (unbiased variance, momentum 0.1). Eval mode is the
/// affine map given by the running estimates. Differentiable in both modes
/// with respect to input, gamma and beta.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormMode mode,
                     double eps = kBatchNormEps, double momentum = kBatchNormMomentum);

/// relu'(0) is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Sum of all elements as a one-element tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// Swaps the two spatial axes of an NCHW tensor (or OIKhKw kernel).
template <typename T>
Tensor<T> transpose_spatial(const Tensor<T>& a);

}  // namespace ops

namespace detail {
/// Active tape when any of the tensors wants a gradient, else nullptr.
template <typename T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}
}  // namespace detail

}  // namespace crosslink
