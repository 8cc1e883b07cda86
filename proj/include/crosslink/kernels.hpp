#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Two implementations share one set of signatures:
//   kernels::reference  straightforward serial loops, kept as the test oracle
//   kernels::parallel   im2col + packed GEMM convolution and OpenMP loops
// Every parallel reduction has a fixed order per output element, so results
// do not depend on the thread count.

#include <cstddef>

namespace crosslink::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  std::size_t out_h() const { return in_h + 2 * pad_h - kernel_h + 1; }
  std::size_t out_w() const { return in_w + 2 * pad_w - kernel_w + 1; }
  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
};

/// Plane geometry shared by the pooling / upsampling / normalisation kernels.
struct PlaneGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t planes() const { return batch * channels; }
  std::size_t size() const { return batch * channels * h * w; }
};

struct BatchNormOutputs {
  double* mean = nullptr;     // per channel
  double* inv_std = nullptr;  // per channel, 1/sqrt(var + eps)
};

#define CROSSLINK_KERNEL_DECLS                                                              \
  /* y = x (*) w + b, cross-correlation with zero padding, stride 1. */                     \
  template <typename T>                                                                     \
  void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y);     \
  /* Accumulates into dx/dw/db; any of them may be null. */                                 \
  template <typename T>                                                                     \
  void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx,   \
                       T* dw, T* db);                                                       \
  /* argmax receives the in-plane index of the chosen element (first max in scan order). */ \
  template <typename T>                                                                     \
  void max_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y, std::size_t* argmax);  \
  template <typename T>                                                                     \
  void max_pool2x2_backward(const PlaneGeometry& g, const std::size_t* argmax, const T* dy,  \
                            T* dx);                                                         \
  template <typename T>                                                                     \
  void avg_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y);                       \
  template <typename T>                                                                     \
  void avg_pool2x2_backward(const PlaneGeometry& g, const T* dy, T* dx);                    \
  /* Half-pixel (align_corners = false) bilinear 2x upsampling; g is the input geometry. */ \
  template <typename T>                                                                     \
  void upsample2x_forward(const PlaneGeometry& g, const T* x, T* y);                        \
  template <typename T>                                                                     \
  void upsample2x_backward(const PlaneGeometry& g, const T* dy, T* dx);                     \
  /* Training-mode batch norm. Writes normalised values to xhat and the affine result */    \
  /* to y; stats receives per-channel mean and inverse std. */                              \
  template <typename T>                                                                     \
  void batchnorm_train_forward(const PlaneGeometry& g, const T* x, const T* gamma,          \
                               const T* beta, double eps, T* xhat, T* y,                    \
                               BatchNormOutputs stats);                                     \
  template <typename T>                                                                     \
  void batchnorm_train_backward(const PlaneGeometry& g, const T* xhat, const T* gamma,      \
                                const double* inv_std, const T* dy, T* dx, T* dgamma,       \
                                T* dbeta);

namespace reference {
CROSSLINK_KERNEL_DECLS

/// C (+)= op(A) * op(B), row-major, op = optional transpose.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);
}  // namespace reference

namespace parallel {
CROSSLINK_KERNEL_DECLS

/// Packed, cache-blocked GEMM with a register-tiled micro-kernel.
/// Same contract as reference::gemm.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

/// Threads used by the OpenMP kernels (1 when built without OpenMP).
int num_threads();
void set_num_threads(int n);
}  // namespace parallel

#undef CROSSLINK_KERNEL_DECLS

}  // namespace crosslink::kernels
