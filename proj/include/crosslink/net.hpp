#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crosslink/ops.hpp"
#include "crosslink/tensor.hpp"

namespace crosslink {

enum class BlockKind { Vertical, Horizontal, Square, Merged, Up };

/// One parallel residual path: kernel extent and the padding that keeps the
/// spatial size.
struct PathKernel {
  std::size_t kernel_h, kernel_w, pad_h, pad_w;
  friend bool operator==(const PathKernel&, const PathKernel&) = default;
};

struct BlockSpec {
  BlockKind kind = BlockKind::Vertical;
  std::size_t in_channels = 1;
  std::size_t out_channels = 32;
  /// Width of each parallel path; equals out_channels except for Merged.
  std::size_t path_channels = 32;
  std::vector<PathKernel> path_kernels;
  bool has_shortcut_1x1 = true;

  std::size_t concat_channels() const { return path_kernels.size() * path_channels; }
};

/// Kernel set of each block kind.
std::vector<PathKernel> path_kernels_for(BlockKind kind);
BlockSpec make_block_spec(BlockKind kind, std::size_t in_channels, std::size_t out_channels);

enum class Variant { Crosslink, SquareCrosslink, VerCrosslink, HorCrosslink, Double2SingleNet };

inline constexpr std::array<Variant, 5> kAllVariants = {
    Variant::Crosslink, Variant::SquareCrosslink, Variant::VerCrosslink, Variant::HorCrosslink,
    Variant::Double2SingleNet};

std::string_view variant_name(Variant v);
std::optional<Variant> parse_variant(std::string_view name);
/// Number of encoder branches (2 for the double-branch variants).
std::size_t branch_count(Variant v);

/// Encoder channel plan and decoder output widths.
inline constexpr std::array<std::size_t, 5> kEncoderChannels = {32, 64, 128, 256, 512};
inline constexpr std::array<std::size_t, 5> kDecoderChannels = {16, 32, 64, 128, 256};  // UCRB1..5
inline constexpr std::size_t kInputDivisor = 32;
/// Path width multiplier of the merged single-branch encoder.
inline constexpr std::size_t kMergedPathWidth = 2;

/// Declarative description of a whole network, used both to build it and to
/// count parameters without allocating.
struct NetworkPlan {
  Variant variant;
  std::vector<std::vector<BlockSpec>> branches;  // [branch][block 0..4]
  std::vector<BlockSpec> decoder;                // UCRB1..5 (index 0 = UCRB1)
  std::vector<std::string> branch_labels;        // "vcrb", "hcrb", ...
};
NetworkPlan make_plan(Variant v);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw, std::size_t ph,
         std::size_t pw);

  Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, params); }
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out);

  ConvParams params;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
               std::vector<NamedTensor<T>>& buffers_out);

  Tensor<T> gamma, beta, running_mean, running_var;
};

/// Three conv + BN stages with a residual connection:
///   relu(bn2(conv2(relu(bn1(conv1(relu(bn0(conv0(x)))))))) + proj(x))
/// where proj is a bias-only 1x1 conv when the widths differ and identity
/// otherwise.
template <typename T>
class RConv {
 public:
  RConv() = default;
  RConv(std::size_t in_c, std::size_t out_c, const PathKernel& k);

  Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
               std::vector<NamedTensor<T>>& buffers_out);

  std::array<Conv2d<T>, 3> convs;
  std::array<BatchNorm2d<T>, 3> norms;
  std::optional<Conv2d<T>> projection;
};

/// Encoder block: relu(shortcut(x) + fuse(concat(path_1(x), ..., path_k(x)))).
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  explicit ResidualBlock(const BlockSpec& spec);

  /// Post-ReLU block feature (before any pooling).
  Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
               std::vector<NamedTensor<T>>& buffers_out);

  BlockSpec spec;
  std::vector<RConv<T>> paths;
  Conv2d<T> fuse;
  Conv2d<T> shortcut;
};

template <typename T>
struct NetworkOutput {
  Tensor<T> logits;  // N x 1 x H x W
  /// encoder_features[branch][k]: post-ReLU, pre-pool output of block k+1.
  std::vector<std::vector<Tensor<T>>> encoder_features;
  /// decoder_features[k]: output of UCRB(k+1).
  std::vector<Tensor<T>> decoder_features;
  Tensor<T> bottleneck;

  /// Features of encoder block `block` (1-based) of the vertical / first branch.
  const Tensor<T>& first_branch(std::size_t block) const {
    return encoder_features.front().at(block - 1);
  }
  /// Features of the horizontal / second branch; single-branch variants
  /// return their only branch.
  const Tensor<T>& second_branch(std::size_t block) const {
    return encoder_features.back().at(block - 1);
  }
  /// (label, shape) for every block in execution order.
  std::vector<std::pair<std::string, Shape>> block_shapes;
};

/// Throws ShapeError with the required divisibility when the input cannot
/// pass through five 2x poolings.
void check_input_size(std::size_t h, std::size_t w);

template <typename T>
class Network {
 public:
  explicit Network(Variant variant);

  NetworkOutput<T> forward(const Tensor<T>& input, BatchNormMode mode);

  Variant variant() const { return plan_.variant; }
  const NetworkPlan& plan() const { return plan_; }

  /// Trainable tensors in a fixed order with stable hierarchical names.
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  /// Non-trainable state (batch-norm running statistics).
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
  /// Parameters followed by buffers: everything a checkpoint stores.
  std::vector<NamedTensor<T>> state() const;
  /// Copies values by name; throws if a name or shape is missing or differs.
  template <typename U>
  void load_state(const std::vector<NamedTensor<U>>& state);

  std::size_t parameter_count() const;
  void zero_grad();

  std::vector<std::vector<ResidualBlock<T>>>& encoder() { return encoder_; }
  std::vector<RConv<T>>& decoder() { return decoder_; }
  Conv2d<T>& head() { return head_; }

 private:
  void index_tensors();

  NetworkPlan plan_;
  std::vector<std::vector<ResidualBlock<T>>> encoder_;
  std::vector<RConv<T>> decoder_;
  Conv2d<T> head_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
};

/// Parameter counts per block, obtained by instantiating each block and
/// enumerating its tensors (one block alive at a time).
struct ParameterReport {
  Variant variant;
  std::vector<std::pair<std::string, std::size_t>> blocks;
  std::size_t total = 0;
};
ParameterReport parameter_report(Variant v);

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class BatchNorm2d<float>;
extern template class BatchNorm2d<double>;
extern template class RConv<float>;
extern template class RConv<double>;
extern template class ResidualBlock<float>;
extern template class ResidualBlock<double>;
extern template class Network<float>;
extern template class Network<double>;

}  // namespace crosslink
