#include "crosslink/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "crosslink/kernels.hpp"

namespace crosslink {

std::string ConvParams::to_string() const {
  std::ostringstream os;
  os << "Conv2d(" << in_channels << ',' << out_channels << ",(" << kernel_h << ',' << kernel_w
     << "),(" << pad_h << ',' << pad_w << "))";
  return os.str();
}

BranchProbe*& BranchProbe::slot() {
  thread_local BranchProbe* probe = nullptr;
  return probe;
}

void BranchProbe::mix(std::uint64_t v) {
  // splitmix64 finaliser over the running hash.
  std::uint64_t z = hash_ ^ (v + 0x9e3779b97f4a7c15ull + (hash_ << 6) + (hash_ >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  hash_ = z ^ (z >> 31);
}

namespace ops {

namespace kp = kernels::parallel;
using std::size_t;

namespace {

template <typename T>
kernels::PlaneGeometry planes_of(const Tensor<T>& t) {
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

template <typename T>
void require_even(const Tensor<T>& t, const char* op) {
  require_rank4(t, op);
  if (t.dim(2) % 2 != 0)
    throw ShapeError(std::string(op) + ": height " + std::to_string(t.dim(2)) + " is odd");
  if (t.dim(3) % 2 != 0)
    throw ShapeError(std::string(op) + ": width " + std::to_string(t.dim(3)) + " is odd");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

// Marks `out` as differentiable and records it when a tape is active.
template <typename T, typename Fn>
void record(Tape<T>* tape, const char* op, Tensor<T>& out, Fn&& fn) {
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(op, out, std::forward<Fn>(fn));
}

template <typename T>
T* grad_or_null(Tensor<T>& t) {
  return (t.defined() && t.requires_grad()) ? t.grad_buffer().data() : nullptr;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvParams& p) {
  require_rank4(input, "conv2d input");
  if (input.dim(1) != p.in_channels)
    throw ShapeError("conv2d: input channel axis is " + std::to_string(input.dim(1)) + ", " +
                     p.to_string() + " expects " + std::to_string(p.in_channels));
  const Shape want_w{p.out_channels, p.in_channels, p.kernel_h, p.kernel_w};
  if (weight.shape() != want_w)
    throw ShapeError("conv2d: weight shape " + to_string(weight.shape()) + " does not match " +
                     to_string(want_w) + " for " + p.to_string());
  if (bias.defined() && bias.shape() != Shape{p.out_channels})
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + ", expected [" +
                     std::to_string(p.out_channels) + "]");
  if (p.kernel_h == 0 || p.kernel_w == 0)
    throw ShapeError("conv2d: kernel extents must be positive");
  const auto out_h = std::ptrdiff_t(input.dim(2) + 2 * p.pad_h) - std::ptrdiff_t(p.kernel_h) + 1;
  const auto out_w = std::ptrdiff_t(input.dim(3) + 2 * p.pad_w) - std::ptrdiff_t(p.kernel_w) + 1;
  if (out_h <= 0)
    throw ShapeError("conv2d: output height would be " + std::to_string(out_h) + " for input " +
                     to_string(input.shape()) + " and " + p.to_string());
  if (out_w <= 0)
    throw ShapeError("conv2d: output width would be " + std::to_string(out_w) + " for input " +
                     to_string(input.shape()) + " and " + p.to_string());

  const kernels::ConvGeometry g{input.dim(0), p.in_channels, input.dim(2), input.dim(3),
                                p.out_channels, p.kernel_h, p.kernel_w, p.pad_h, p.pad_w};
  Tensor<T> out({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kp::conv2d_forward(g, input.data(), weight.data(), bias.defined() ? bias.data() : nullptr,
                     out.data());
  record(detail::recording({&input, &weight, &bias}), "conv2d", out,
         [x = input, w = weight, b = bias, g](std::span<const T> gy) mutable {
           kp::conv2d_backward(g, x.data(), w.data(), gy.data(), grad_or_null(x),
                               grad_or_null(w), grad_or_null(b));
         });
  return out;
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& input) {
  require_even(input, "max_pool2x2");
  const auto g = planes_of(input);
  Tensor<T> out({g.batch, g.channels, g.h / 2, g.w / 2});
  std::vector<size_t> argmax(out.numel());
  kp::max_pool2x2_forward(g, input.data(), out.data(), argmax.data());
  if (auto* probe = BranchProbe::active())
    for (size_t k : argmax) probe->mix(k);
  record(detail::recording({&input}), "max_pool2x2", out,
         [x = input, g, idx = std::move(argmax)](std::span<const T> gy) mutable {
           kp::max_pool2x2_backward(g, idx.data(), gy.data(), x.grad_buffer().data());
         });
  return out;
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& input) {
  require_even(input, "avg_pool2x2");
  const auto g = planes_of(input);
  Tensor<T> out({g.batch, g.channels, g.h / 2, g.w / 2});
  kp::avg_pool2x2_forward(g, input.data(), out.data());
  record(detail::recording({&input}), "avg_pool2x2", out,
         [x = input, g](std::span<const T> gy) mutable {
           kp::avg_pool2x2_backward(g, gy.data(), x.grad_buffer().data());
         });
  return out;
}

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& input) {
  require_rank4(input, "upsample_bilinear2x");
  const auto g = planes_of(input);
  if (g.h == 0 || g.w == 0) throw ShapeError("upsample_bilinear2x: empty spatial extent");
  Tensor<T> out({g.batch, g.channels, 2 * g.h, 2 * g.w});
  kp::upsample2x_forward(g, input.data(), out.data());
  record(detail::recording({&input}), "upsample_bilinear2x", out,
         [x = input, g](std::span<const T> gy) mutable {
           kp::upsample2x_backward(g, gy.data(), x.grad_buffer().data());
         });
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormMode mode,
                     double eps, double momentum) {
  require_rank4(input, "batch_norm");
  const auto g = planes_of(input);
  const Shape per_channel{g.channels};
  if (gamma.shape() != per_channel || beta.shape() != per_channel)
    throw ShapeError("batch_norm: gamma/beta must have shape [" + std::to_string(g.channels) +
                     "], got " + to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  if (running_mean.shape() != per_channel || running_var.shape() != per_channel)
    throw ShapeError("batch_norm: running statistics must have shape [" +
                     std::to_string(g.channels) + "]");

  Tensor<T> out(input.shape());
  auto* tape = detail::recording({&input, &gamma, &beta});

  if (mode == BatchNormMode::Train) {
    const size_t count = g.batch * g.h * g.w;
    if (count < 2)
      throw ShapeError("batch_norm: train mode needs more than one value per channel, got " +
                       std::to_string(count) + " for input " + to_string(input.shape()));
    Tensor<T> xhat(input.shape());
    std::vector<double> mean(g.channels), inv_std(g.channels);
    kp::batchnorm_train_forward(g, input.data(), gamma.data(), beta.data(), eps, xhat.data(),
                                out.data(), {mean.data(), inv_std.data()});
    const double unbias = double(count) / double(count - 1);
    for (size_t c = 0; c < g.channels; ++c) {
      const double var = 1.0 / (inv_std[c] * inv_std[c]) - eps;
      running_mean[c] = T((1 - momentum) * running_mean[c] + momentum * mean[c]);
      running_var[c] = T((1 - momentum) * running_var[c] + momentum * var * unbias);
    }
    record(tape, "batch_norm", out,
           [x = input, gm = gamma, bt = beta, xh = std::move(xhat), is = std::move(inv_std),
            g](std::span<const T> gy) mutable {
             kp::batchnorm_train_backward(g, xh.data(), gm.data(), is.data(), gy.data(),
                                          grad_or_null(x), grad_or_null(gm), grad_or_null(bt));
           });
    return out;
  }

  const size_t hw = g.h * g.w;
  std::vector<T> a(g.channels), b(g.channels);
  for (size_t c = 0; c < g.channels; ++c) {
    const double inv = 1.0 / std::sqrt(double(running_var[c]) + eps);
    a[c] = T(double(gamma[c]) * inv);
    b[c] = T(double(beta[c]) - double(gamma[c]) * inv * double(running_mean[c]));
  }
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p) {
    const size_t c = p % g.channels;
    for (size_t k = 0; k < hw; ++k) out[p * hw + k] = a[c] * input[p * hw + k] + b[c];
  }
  std::vector<T> rm(running_mean.values().begin(), running_mean.values().end());
  std::vector<T> inv(g.channels);
  for (size_t c = 0; c < g.channels; ++c)
    inv[c] = T(1.0 / std::sqrt(double(running_var[c]) + eps));
  record(tape, "batch_norm", out,
         [x = input, gm = gamma, bt = beta, rm = std::move(rm), inv = std::move(inv), g,
          hw](std::span<const T> gy) mutable {
           T* dx = grad_or_null(x);
           T* dg = grad_or_null(gm);
           T* db = grad_or_null(bt);
           for (size_t p = 0; p < g.planes(); ++p) {
             const size_t c = p % g.channels;
             for (size_t k = 0; k < hw; ++k) {
               const T d = gy[p * hw + k];
               if (dx) dx[p * hw + k] += d * gm[c] * inv[c];
               if (dg) dg[c] += d * (x[p * hw + k] - rm[c]) * inv[c];
               if (db) db[c] += d;
             }
           }
         });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const size_t n = input.numel();
  const T* x = input.data();
  T* y = out.data();
#pragma omp parallel for simd schedule(static)
  for (size_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  if (auto* probe = BranchProbe::active()) probe->mix_bits(n, [x](size_t i) { return x[i] > T{0}; });
  record(detail::recording({&input}), "relu", out,
         [x = input](std::span<const T> gy) mutable {
           T* dx = x.grad_buffer().data();
           const T* xv = x.data();
           const size_t n = x.numel();
#pragma omp parallel for simd schedule(static)
           for (size_t i = 0; i < n; ++i)
             if (xv[i] > T{0}) dx[i] += gy[i];
         });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (size_t i = 0; i < input.numel(); ++i) {
    const T v = input[i];
    if (v >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T{1} + e);
    }
  }
  record(detail::recording({&input}), "sigmoid", out,
         [x = input, y = out](std::span<const T> gy) mutable {
           T* dx = x.grad_buffer().data();
           for (size_t i = 0; i < y.numel(); ++i) dx[i] += gy[i] * y[i] * (T{1} - y[i]);
         });
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = inputs.front();
  require_rank4(first, "concat_channels");
  size_t channels = 0;
  for (const auto& t : inputs) {
    require_rank4(t, "concat_channels");
    if (t.dim(0) != first.dim(0))
      throw ShapeError("concat_channels: batch axis mismatch " + to_string(t.shape()) + " vs " +
                       to_string(first.shape()));
    if (t.dim(2) != first.dim(2))
      throw ShapeError("concat_channels: height axis mismatch " + to_string(t.shape()) +
                       " vs " + to_string(first.shape()));
    if (t.dim(3) != first.dim(3))
      throw ShapeError("concat_channels: width axis mismatch " + to_string(t.shape()) + " vs " +
                       to_string(first.shape()));
    channels += t.dim(1);
  }
  const size_t n = first.dim(0), hw = first.dim(2) * first.dim(3);
  Tensor<T> out({n, channels, first.dim(2), first.dim(3)});
  size_t offset = 0;
  for (const auto& t : inputs) {
    const size_t block = t.dim(1) * hw;
    for (size_t b = 0; b < n; ++b)
      std::copy_n(t.data() + b * block, block, out.data() + (b * channels + offset) * hw);
    offset += t.dim(1);
  }
  Tape<T>* tape = nullptr;
  for (const auto& t : inputs)
    if (auto* tp = detail::recording({&t})) tape = tp;
  record(tape, "concat_channels", out,
         [parts = std::vector<Tensor<T>>(inputs.begin(), inputs.end()), n, channels,
          hw](std::span<const T> gy) mutable {
           size_t offset = 0;
           for (auto& t : parts) {
             const size_t block = t.dim(1) * hw;
             if (t.requires_grad()) {
               T* dx = t.grad_buffer().data();
               for (size_t b = 0; b < n; ++b) {
                 const T* src = gy.data() + (b * channels + offset) * hw;
                 for (size_t k = 0; k < block; ++k) dx[b * block + k] += src[k];
               }
             }
             offset += t.dim(1);
           }
         });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  record(detail::recording({&a, &b}), "add", out,
         [a = a, b = b](std::span<const T> gy) mutable {
           if (T* da = grad_or_null(a))
             for (size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
           if (T* db = grad_or_null(b))
             for (size_t i = 0; i < gy.size(); ++i) db[i] += gy[i];
         });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  record(detail::recording({&a, &b}), "sub", out,
         [a = a, b = b](std::span<const T> gy) mutable {
           if (T* da = grad_or_null(a))
             for (size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
           if (T* db = grad_or_null(b))
             for (size_t i = 0; i < gy.size(); ++i) db[i] -= gy[i];
         });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  record(detail::recording({&a, &b}), "mul", out,
         [a = a, b = b](std::span<const T> gy) mutable {
           if (T* da = grad_or_null(a))
             for (size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * b[i];
           if (T* db = grad_or_null(b))
             for (size_t i = 0; i < gy.size(); ++i) db[i] += gy[i] * a[i];
         });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
  record(detail::recording({&a}), "scale", out,
         [a = a, factor](std::span<const T> gy) mutable {
           T* da = a.grad_buffer().data();
           for (size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * factor;
         });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (auto v : a.values()) acc += v;
  Tensor<T> out({1}, acc);
  record(detail::recording({&a}), "sum", out, [a = a](std::span<const T> gy) mutable {
    for (auto& d : a.grad_buffer()) d += gy[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T{1} / T(a.numel());
  T acc{0};
  for (auto v : a.values()) acc += v;
  Tensor<T> out({1}, acc * inv);
  record(detail::recording({&a}), "mean", out, [a = a, inv](std::span<const T> gy) mutable {
    for (auto& d : a.grad_buffer()) d += gy[0] * inv;
  });
  return out;
}

template <typename T>
Tensor<T> transpose_spatial(const Tensor<T>& a) {
  require_rank4(a, "transpose_spatial");
  const size_t planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor<T> out({a.dim(0), a.dim(1), w, h});
  for (size_t p = 0; p < planes; ++p)
    for (size_t i = 0; i < h; ++i)
      for (size_t j = 0; j < w; ++j) out[(p * w + j) * h + i] = a[(p * h + i) * w + j];
  record(detail::recording({&a}), "transpose_spatial", out,
         [a = a, planes, h, w](std::span<const T> gy) mutable {
           T* da = a.grad_buffer().data();
           for (size_t p = 0; p < planes; ++p)
             for (size_t i = 0; i < h; ++i)
               for (size_t j = 0; j < w; ++j) da[(p * h + i) * w + j] += gy[(p * w + j) * h + i];
         });
  return out;
}

#define CROSSLINK_INSTANTIATE(T)                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                            const ConvParams&);                                             \
  template Tensor<T> max_pool2x2(const Tensor<T>&);                                         \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                                         \
  template Tensor<T> upsample_bilinear2x(const Tensor<T>&);                                 \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                Tensor<T>&, Tensor<T>&, BatchNormMode, double, double);     \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> transpose_spatial(const Tensor<T>&);

CROSSLINK_INSTANTIATE(float)
CROSSLINK_INSTANTIATE(double)
#undef CROSSLINK_INSTANTIATE

}  // namespace ops
}  // namespace crosslink
