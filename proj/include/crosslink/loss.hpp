#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "crosslink/net.hpp"
#include "crosslink/tensor.hpp"

namespace crosslink {

/// Convex weights of the classification, Dice and attention terms.
struct LossWeights {
  double cls = 0.4;
  double dice = 0.1;
  double attention = 0.5;

  /// Throws std::invalid_argument unless all weights are >= 0 and sum to 1
  /// within 1e-9.
  void validate() const;
  std::string to_string() const;
  /// Parses "l1,l2,l3" and validates.
  static LossWeights parse(std::string_view text);

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline constexpr double kSimplexTolerance = 1e-9;
inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kAttentionMaxBias = 1e-8;
inline constexpr std::size_t kDefaultAttentionBlock = 3;

namespace loss {

/// Mean binary cross-entropy over every element; probabilities are clamped
/// to [1e-7, 1 - 1e-7] (zero gradient where the clamp is active).
template <typename T>
Tensor<T> bce(const Tensor<T>& probs, const Tensor<T>& target);

/// 1 - 2 sum(p g) / (sum(p) + sum(g) + eps), per image, averaged over the batch.
template <typename T>
Tensor<T> dice(const Tensor<T>& probs, const Tensor<T>& target, double eps = kDiceSmooth);

/// N x C x h x w non-negative features -> N x 1 x h x w map: channel mean
/// divided by (per-sample maximum + 1e-8).
template <typename T>
Tensor<T> attention_map(const Tensor<T>& features);

/// `levels` successive 2x2 average poolings of an N x 1 x H x W mask.
template <typename T>
Tensor<T> pool_mask(const Tensor<T>& mask, std::size_t levels = 2);

struct AttentionStats {
  std::size_t samples = 0;
  /// Samples where a map was constant; they contribute 0 with zero gradient.
  std::size_t degenerate = 0;
};

/// Negative normalised third-order correlation of the centred maps,
/// computed per sample and averaged over the batch. Differentiable in
/// `av` and `ah`; `m` is treated as data.
template <typename T>
Tensor<T> attention_loss(const Tensor<T>& av, const Tensor<T>& ah, const Tensor<T>& m,
                         AttentionStats* stats = nullptr);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double cls = 0;
  double dice = 0;
  double attention = 0;
  std::size_t degenerate = 0;
};

/// Weighted sum of BCE and Dice on sigmoid(logits) and the attention loss.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const Tensor<T>& target,
                            const Tensor<T>& av, const Tensor<T>& ah, const Tensor<T>& m,
                            const LossWeights& weights);

/// total_loss with the attention maps taken from encoder block `block`
/// (1-based) of both branches and the mask pooled to that resolution.
template <typename T>
LossBreakdown<T> network_loss(const NetworkOutput<T>& out, const Tensor<T>& target,
                              const LossWeights& weights,
                              std::size_t block = kDefaultAttentionBlock);

}  // namespace loss
}  // namespace crosslink
