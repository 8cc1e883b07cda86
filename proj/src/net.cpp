#include "crosslink/net.hpp"

#include <algorithm>
#include <cctype>

namespace crosslink {

using std::size_t;

std::vector<PathKernel> path_kernels_for(BlockKind kind) {
  switch (kind) {
    case BlockKind::Vertical:
      return {{3, 1, 1, 0}, {3, 3, 1, 1}, {5, 3, 2, 1}};
    case BlockKind::Horizontal:
      return {{1, 3, 0, 1}, {3, 3, 1, 1}, {3, 5, 1, 2}};
    case BlockKind::Square:
      return {{3, 3, 1, 1}, {5, 5, 2, 2}, {1, 1, 0, 0}};
    case BlockKind::Merged:
      return {{3, 1, 1, 0}, {3, 3, 1, 1}, {5, 3, 2, 1},
              {1, 3, 0, 1}, {3, 3, 1, 1}, {3, 5, 1, 2}};
    case BlockKind::Up:
      return {{3, 3, 1, 1}};
  }
  return {};
}

BlockSpec make_block_spec(BlockKind kind, size_t in_channels, size_t out_channels) {
  BlockSpec s;
  s.kind = kind;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.path_channels = kind == BlockKind::Merged ? kMergedPathWidth * out_channels : out_channels;
  s.path_kernels = path_kernels_for(kind);
  s.has_shortcut_1x1 = kind != BlockKind::Up;
  return s;
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Crosslink:
      return "Crosslink";
    case Variant::SquareCrosslink:
      return "SquareCrosslink";
    case Variant::VerCrosslink:
      return "VerCrosslink";
    case Variant::HorCrosslink:
      return "HorCrosslink";
    case Variant::Double2SingleNet:
      return "Double2SingleNet";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
  for (auto v : kAllVariants) {
    const auto canonical = variant_name(v);
    if (canonical.size() != name.size()) continue;
    if (std::equal(canonical.begin(), canonical.end(), name.begin(),
                   [](char a, char b) { return std::tolower(a) == std::tolower(b); }))
      return v;
  }
  return std::nullopt;
}

size_t branch_count(Variant v) {
  return (v == Variant::Crosslink || v == Variant::SquareCrosslink) ? 2 : 1;
}

NetworkPlan make_plan(Variant v) {
  NetworkPlan plan{v, {}, {}, {}};
  std::vector<std::pair<BlockKind, std::string>> kinds;
  switch (v) {
    case Variant::Crosslink:
      kinds = {{BlockKind::Vertical, "vcrb"}, {BlockKind::Horizontal, "hcrb"}};
      break;
    case Variant::SquareCrosslink:
      kinds = {{BlockKind::Square, "scrb_a"}, {BlockKind::Square, "scrb_b"}};
      break;
    case Variant::VerCrosslink:
      kinds = {{BlockKind::Vertical, "vcrb"}};
      break;
    case Variant::HorCrosslink:
      kinds = {{BlockKind::Horizontal, "hcrb"}};
      break;
    case Variant::Double2SingleNet:
      kinds = {{BlockKind::Merged, "mcrb"}};
      break;
  }
  for (const auto& [kind, label] : kinds) {
    std::vector<BlockSpec> blocks;
    size_t in = 1;
    for (size_t c : kEncoderChannels) {
      blocks.push_back(make_block_spec(kind, in, c));
      in = c;
    }
    plan.branches.push_back(std::move(blocks));
    plan.branch_labels.push_back(label);
  }
  const size_t nb = plan.branches.size();
  plan.decoder.resize(kDecoderChannels.size());
  size_t deeper = kEncoderChannels.back();
  for (size_t k = kDecoderChannels.size(); k-- > 0;) {
    const size_t in = deeper + nb * kEncoderChannels[k];
    plan.decoder[k] = make_block_spec(BlockKind::Up, in, kDecoderChannels[k]);
    deeper = kDecoderChannels[k];
  }
  return plan;
}

void check_input_size(size_t h, size_t w) {
  auto round_up = [](size_t n) {
    return std::max<size_t>(1, (n + kInputDivisor - 1) / kInputDivisor) * kInputDivisor;
  };
  if (h == 0 || h % kInputDivisor != 0 || w == 0 || w % kInputDivisor != 0) {
    throw ShapeError("network input " + std::to_string(h) + "x" + std::to_string(w) +
                     ": height and width must be positive multiples of " +
                     std::to_string(kInputDivisor) + " (five 2x2 poolings); pad to " +
                     std::to_string(round_up(h)) + "x" + std::to_string(round_up(w)));
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(size_t in_c, size_t out_c, size_t kh, size_t kw, size_t ph, size_t pw)
    : params{in_c, out_c, kh, kw, ph, pw},
      weight(Shape{out_c, in_c, kh, kw}),
      bias(Shape{out_c}) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(size_t channels)
    : gamma(Shape{channels}, T{1}),
      beta(Shape{channels}, T{0}),
      running_mean(Shape{channels}, T{0}),
      running_var(Shape{channels}, T{1}) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, BatchNormMode mode) {
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, mode);
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
                             std::vector<NamedTensor<T>>& buffers_out) {
  params_out.push_back({prefix + ".gamma", gamma});
  params_out.push_back({prefix + ".beta", beta});
  buffers_out.push_back({prefix + ".running_mean", running_mean});
  buffers_out.push_back({prefix + ".running_var", running_var});
}

template <typename T>
RConv<T>::RConv(size_t in_c, size_t out_c, const PathKernel& k) {
  for (size_t i = 0; i < 3; ++i) {
    convs[i] = Conv2d<T>(i == 0 ? in_c : out_c, out_c, k.kernel_h, k.kernel_w, k.pad_h, k.pad_w);
    norms[i] = BatchNorm2d<T>(out_c);
  }
  if (in_c != out_c) projection.emplace(in_c, out_c, 1, 1, 0, 0);
}

template <typename T>
Tensor<T> RConv<T>::forward(const Tensor<T>& x, BatchNormMode mode) {
  Tensor<T> h = x;
  for (size_t i = 0; i < 3; ++i) {
    h = norms[i].forward(convs[i].forward(h), mode);
    if (i < 2) h = ops::relu(h);
  }
  const Tensor<T> residual = projection ? projection->forward(x) : x;
  if (residual.shape() != h.shape())
    throw ShapeError("RConv: residual " + to_string(residual.shape()) + " does not match path " +
                     to_string(h.shape()));
  return ops::relu(ops::add(h, residual));
}

template <typename T>
void RConv<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
                       std::vector<NamedTensor<T>>& buffers_out) {
  for (size_t i = 0; i < 3; ++i) {
    convs[i].collect(prefix + ".conv" + std::to_string(i), params_out);
    norms[i].collect(prefix + ".bn" + std::to_string(i), params_out, buffers_out);
  }
  if (projection) projection->collect(prefix + ".proj", params_out);
}

template <typename T>
ResidualBlock<T>::ResidualBlock(const BlockSpec& s) : spec(s) {
  for (const auto& k : spec.path_kernels) paths.emplace_back(spec.in_channels, spec.path_channels, k);
  fuse = Conv2d<T>(spec.concat_channels(), spec.out_channels, 1, 1, 0, 0);
  shortcut = Conv2d<T>(spec.in_channels, spec.out_channels, 1, 1, 0, 0);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, BatchNormMode mode) {
  std::vector<Tensor<T>> outs;
  outs.reserve(paths.size());
  for (auto& p : paths) outs.push_back(p.forward(x, mode));
  const Tensor<T> fused = fuse.forward(ops::concat_channels<T>(outs));
  return ops::relu(ops::add(shortcut.forward(x), fused));
}

template <typename T>
void ResidualBlock<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& params_out,
                               std::vector<NamedTensor<T>>& buffers_out) {
  shortcut.collect(prefix + ".shortcut", params_out);
  for (size_t i = 0; i < paths.size(); ++i)
    paths[i].collect(prefix + ".path" + std::to_string(i), params_out, buffers_out);
  fuse.collect(prefix + ".fuse", params_out);
}

// ---------------------------------------------------------------------------

template <typename T>
Network<T>::Network(Variant variant) : plan_(make_plan(variant)) {
  for (const auto& branch : plan_.branches) {
    std::vector<ResidualBlock<T>> blocks;
    for (const auto& spec : branch) blocks.emplace_back(spec);
    encoder_.push_back(std::move(blocks));
  }
  for (const auto& spec : plan_.decoder)
    decoder_.emplace_back(spec.in_channels, spec.out_channels, spec.path_kernels.front());
  head_ = Conv2d<T>(kDecoderChannels.front(), 1, 1, 1, 0, 0);
  index_tensors();
}

template <typename T>
void Network<T>::index_tensors() {
  params_.clear();
  buffers_.clear();
  for (size_t b = 0; b < encoder_.size(); ++b)
    for (size_t k = 0; k < encoder_[b].size(); ++k)
      encoder_[b][k].collect(plan_.branch_labels[b] + std::to_string(k + 1), params_, buffers_);
  for (size_t k = 0; k < decoder_.size(); ++k)
    decoder_[k].collect("ucrb" + std::to_string(k + 1), params_, buffers_);
  head_.collect("head", params_);
}

template <typename T>
NetworkOutput<T> Network<T>::forward(const Tensor<T>& input, BatchNormMode mode) {
  require_rank4(input, "network input");
  if (input.dim(1) != 1)
    throw ShapeError("network input: channel axis must be 1 (grayscale), got " +
                     std::to_string(input.dim(1)));
  check_input_size(input.dim(2), input.dim(3));

  NetworkOutput<T> out;
  out.encoder_features.resize(encoder_.size());
  std::vector<Tensor<T>> pooled(encoder_.size());
  for (size_t b = 0; b < encoder_.size(); ++b) {
    Tensor<T> x = input;
    for (size_t k = 0; k < encoder_[b].size(); ++k) {
      Tensor<T> f = encoder_[b][k].forward(x, mode);
      out.block_shapes.emplace_back(plan_.branch_labels[b] + std::to_string(k + 1), f.shape());
      x = ops::max_pool2x2(f);
      out.encoder_features[b].push_back(std::move(f));
    }
    pooled[b] = x;
  }
  // Bottleneck of the double-branch encoder: element-wise sum of the pooled
  // deepest features of both branches.
  Tensor<T> deeper = pooled.front();
  for (size_t b = 1; b < pooled.size(); ++b) deeper = ops::add(deeper, pooled[b]);
  out.bottleneck = deeper;
  out.block_shapes.emplace_back("bottleneck", deeper.shape());

  out.decoder_features.resize(decoder_.size());
  for (size_t k = decoder_.size(); k-- > 0;) {
    std::vector<Tensor<T>> parts{ops::upsample_bilinear2x(deeper)};
    for (size_t b = 0; b < encoder_.size(); ++b) parts.push_back(out.encoder_features[b][k]);
    deeper = decoder_[k].forward(ops::concat_channels<T>(parts), mode);
    out.block_shapes.emplace_back("ucrb" + std::to_string(k + 1), deeper.shape());
    out.decoder_features[k] = deeper;
  }
  out.logits = head_.forward(deeper);
  out.block_shapes.emplace_back("head", out.logits.shape());
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Network<T>::state() const {
  std::vector<NamedTensor<T>> all = params_;
  all.insert(all.end(), buffers_.begin(), buffers_.end());
  return all;
}

template <typename T>
template <typename U>
void Network<T>::load_state(const std::vector<NamedTensor<U>>& state) {
  auto mine = this->state();
  for (auto& [name, tensor] : mine) {
    auto it = std::find_if(state.begin(), state.end(),
                           [&](const NamedTensor<U>& e) { return e.name == name; });
    if (it == state.end()) throw ShapeError("load_state: missing tensor '" + name + "'");
    if (it->tensor.shape() != tensor.shape())
      throw ShapeError("load_state: tensor '" + name + "' has shape " +
                       to_string(it->tensor.shape()) + ", network expects " +
                       to_string(tensor.shape()));
    std::transform(it->tensor.values().begin(), it->tensor.values().end(),
                   tensor.values().begin(), [](U v) { return T(v); });
  }
}

template <typename T>
size_t Network<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

ParameterReport parameter_report(Variant v) {
  const NetworkPlan plan = make_plan(v);
  ParameterReport report{v, {}, 0};
  auto count = [](const std::vector<NamedTensor<float>>& ts) {
    size_t n = 0;
    for (const auto& t : ts) n += t.tensor.numel();
    return n;
  };
  for (size_t b = 0; b < plan.branches.size(); ++b) {
    for (size_t k = 0; k < plan.branches[b].size(); ++k) {
      ResidualBlock<float> block(plan.branches[b][k]);
      std::vector<NamedTensor<float>> params, buffers;
      block.collect("", params, buffers);
      const size_t n = count(params);
      report.blocks.emplace_back(plan.branch_labels[b] + std::to_string(k + 1), n);
      report.total += n;
    }
  }
  for (size_t k = 0; k < plan.decoder.size(); ++k) {
    const auto& s = plan.decoder[k];
    RConv<float> block(s.in_channels, s.out_channels, s.path_kernels.front());
    std::vector<NamedTensor<float>> params, buffers;
    block.collect("", params, buffers);
    const size_t n = count(params);
    report.blocks.emplace_back("ucrb" + std::to_string(k + 1), n);
    report.total += n;
  }
  Conv2d<float> head(kDecoderChannels.front(), 1, 1, 1, 0, 0);
  std::vector<NamedTensor<float>> params;
  head.collect("", params);
  report.blocks.emplace_back("head", count(params));
  report.total += count(params);
  return report;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class RConv<float>;
template class RConv<double>;
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class Network<float>;
template class Network<double>;
template void Network<float>::load_state(const std::vector<NamedTensor<float>>&);
template void Network<float>::load_state(const std::vector<NamedTensor<double>>&);
template void Network<double>::load_state(const std::vector<NamedTensor<float>>&);
template void Network<double>::load_state(const std::vector<NamedTensor<double>>&);

}  // namespace crosslink
