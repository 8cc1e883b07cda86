// Serial reference kernels. Direct loops, no blocking; these are the oracle
// the parallel kernels are tested and benchmarked against.

#include <cmath>
#include <cstddef>

#include "crosslink/kernels.hpp"

namespace crosslink::kernels::reference {

using std::ptrdiff_t;
using std::size_t;

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const size_t oh = g.out_h(), ow = g.out_w();
  for (size_t n = 0; n < g.batch; ++n) {
    for (size_t o = 0; o < g.out_channels; ++o) {
      for (size_t i = 0; i < oh; ++i) {
        for (size_t j = 0; j < ow; ++j) {
          T acc = b ? b[o] : T{0};
          for (size_t c = 0; c < g.in_channels; ++c) {
            for (size_t ki = 0; ki < g.kernel_h; ++ki) {
              const ptrdiff_t r = ptrdiff_t(i + ki) - ptrdiff_t(g.pad_h);
              if (r < 0 || r >= ptrdiff_t(g.in_h)) continue;
              for (size_t kj = 0; kj < g.kernel_w; ++kj) {
                const ptrdiff_t s = ptrdiff_t(j + kj) - ptrdiff_t(g.pad_w);
                if (s < 0 || s >= ptrdiff_t(g.in_w)) continue;
                acc += x[((n * g.in_channels + c) * g.in_h + r) * g.in_w + s] *
                       w[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
              }
            }
          }
          y[((n * g.out_channels + o) * oh + i) * ow + j] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db) {
  const size_t oh = g.out_h(), ow = g.out_w();
  for (size_t n = 0; n < g.batch; ++n) {
    for (size_t o = 0; o < g.out_channels; ++o) {
      for (size_t i = 0; i < oh; ++i) {
        for (size_t j = 0; j < ow; ++j) {
          const T d = dy[((n * g.out_channels + o) * oh + i) * ow + j];
          if (db) db[o] += d;
          for (size_t c = 0; c < g.in_channels; ++c) {
            for (size_t ki = 0; ki < g.kernel_h; ++ki) {
              const ptrdiff_t r = ptrdiff_t(i + ki) - ptrdiff_t(g.pad_h);
              if (r < 0 || r >= ptrdiff_t(g.in_h)) continue;
              for (size_t kj = 0; kj < g.kernel_w; ++kj) {
                const ptrdiff_t s = ptrdiff_t(j + kj) - ptrdiff_t(g.pad_w);
                if (s < 0 || s >= ptrdiff_t(g.in_w)) continue;
                const size_t xi = ((n * g.in_channels + c) * g.in_h + r) * g.in_w + s;
                const size_t wi = ((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj;
                if (dx) dx[xi] += d * w[wi];
                if (dw) dw[wi] += d * x[xi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void max_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y, size_t* argmax) {
  const size_t oh = g.h / 2, ow = g.w / 2;
  for (size_t p = 0; p < g.planes(); ++p) {
    const T* xp = x + p * g.h * g.w;
    for (size_t i = 0; i < oh; ++i) {
      for (size_t j = 0; j < ow; ++j) {
        size_t best = (2 * i) * g.w + 2 * j;
        for (size_t di = 0; di < 2; ++di) {
          for (size_t dj = 0; dj < 2; ++dj) {
            const size_t idx = (2 * i + di) * g.w + 2 * j + dj;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        y[p * oh * ow + i * ow + j] = xp[best];
        argmax[p * oh * ow + i * ow + j] = best;
      }
    }
  }
}

template <typename T>
void max_pool2x2_backward(const PlaneGeometry& g, const size_t* argmax, const T* dy, T* dx) {
  const size_t out = (g.h / 2) * (g.w / 2);
  for (size_t p = 0; p < g.planes(); ++p) {
    for (size_t k = 0; k < out; ++k) dx[p * g.h * g.w + argmax[p * out + k]] += dy[p * out + k];
  }
}

template <typename T>
void avg_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y) {
  const size_t oh = g.h / 2, ow = g.w / 2;
  for (size_t p = 0; p < g.planes(); ++p) {
    const T* xp = x + p * g.h * g.w;
    for (size_t i = 0; i < oh; ++i) {
      for (size_t j = 0; j < ow; ++j) {
        const T s = xp[2 * i * g.w + 2 * j] + xp[2 * i * g.w + 2 * j + 1] +
                    xp[(2 * i + 1) * g.w + 2 * j] + xp[(2 * i + 1) * g.w + 2 * j + 1];
        y[p * oh * ow + i * ow + j] = s * T(0.25);
      }
    }
  }
}

template <typename T>
void avg_pool2x2_backward(const PlaneGeometry& g, const T* dy, T* dx) {
  const size_t oh = g.h / 2, ow = g.w / 2;
  for (size_t p = 0; p < g.planes(); ++p) {
    for (size_t i = 0; i < g.h; ++i) {
      for (size_t j = 0; j < g.w; ++j) {
        dx[(p * g.h + i) * g.w + j] += T(0.25) * dy[p * oh * ow + (i / 2) * ow + j / 2];
      }
    }
  }
}

namespace {
// Source coordinate for output index i under the half-pixel convention.
struct Tap {
  size_t lo, hi;
  double frac;
};
Tap source_tap(size_t i, size_t in) {
  double src = (double(i) + 0.5) / 2.0 - 0.5;
  if (src < 0) src = 0;
  size_t lo = size_t(src);
  if (lo > in - 1) lo = in - 1;
  const size_t hi = lo + 1 < in ? lo + 1 : in - 1;
  return {lo, hi, src - double(lo)};
}
}  // namespace

template <typename T>
void upsample2x_forward(const PlaneGeometry& g, const T* x, T* y) {
  const size_t oh = 2 * g.h, ow = 2 * g.w;
  for (size_t p = 0; p < g.planes(); ++p) {
    const T* xp = x + p * g.h * g.w;
    for (size_t i = 0; i < oh; ++i) {
      const Tap ty = source_tap(i, g.h);
      for (size_t j = 0; j < ow; ++j) {
        const Tap tx = source_tap(j, g.w);
        const T fy = T(ty.frac), fx = T(tx.frac);
        y[(p * oh + i) * ow + j] = (T(1) - fy) * ((T(1) - fx) * xp[ty.lo * g.w + tx.lo] +
                                                   fx * xp[ty.lo * g.w + tx.hi]) +
                                   fy * ((T(1) - fx) * xp[ty.hi * g.w + tx.lo] +
                                         fx * xp[ty.hi * g.w + tx.hi]);
      }
    }
  }
}

template <typename T>
void upsample2x_backward(const PlaneGeometry& g, const T* dy, T* dx) {
  const size_t oh = 2 * g.h, ow = 2 * g.w;
  for (size_t p = 0; p < g.planes(); ++p) {
    T* dp = dx + p * g.h * g.w;
    for (size_t i = 0; i < oh; ++i) {
      const Tap ty = source_tap(i, g.h);
      for (size_t j = 0; j < ow; ++j) {
        const Tap tx = source_tap(j, g.w);
        const T fy = T(ty.frac), fx = T(tx.frac);
        const T d = dy[(p * oh + i) * ow + j];
        dp[ty.lo * g.w + tx.lo] += (T(1) - fy) * (T(1) - fx) * d;
        dp[ty.lo * g.w + tx.hi] += (T(1) - fy) * fx * d;
        dp[ty.hi * g.w + tx.lo] += fy * (T(1) - fx) * d;
        dp[ty.hi * g.w + tx.hi] += fy * fx * d;
      }
    }
  }
}

template <typename T>
void batchnorm_train_forward(const PlaneGeometry& g, const T* x, const T* gamma, const T* beta,
                             double eps, T* xhat, T* y, BatchNormOutputs stats) {
  const size_t hw = g.h * g.w;
  const double count = double(g.batch * hw);
  for (size_t c = 0; c < g.channels; ++c) {
    double sum = 0;
    for (size_t n = 0; n < g.batch; ++n)
      for (size_t k = 0; k < hw; ++k) sum += x[(n * g.channels + c) * hw + k];
    const double mean = sum / count;
    double sq = 0;
    for (size_t n = 0; n < g.batch; ++n)
      for (size_t k = 0; k < hw; ++k) {
        const double d = x[(n * g.channels + c) * hw + k] - mean;
        sq += d * d;
      }
    const double inv_std = 1.0 / std::sqrt(sq / count + eps);
    for (size_t n = 0; n < g.batch; ++n)
      for (size_t k = 0; k < hw; ++k) {
        const size_t i = (n * g.channels + c) * hw + k;
        xhat[i] = T((x[i] - mean) * inv_std);
        y[i] = gamma[c] * xhat[i] + beta[c];
      }
    stats.mean[c] = mean;
    stats.inv_std[c] = inv_std;
  }
}

template <typename T>
void batchnorm_train_backward(const PlaneGeometry& g, const T* xhat, const T* gamma,
                              const double* inv_std, const T* dy, T* dx, T* dgamma, T* dbeta) {
  const size_t hw = g.h * g.w;
  const double count = double(g.batch * hw);
  for (size_t c = 0; c < g.channels; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (size_t n = 0; n < g.batch; ++n)
      for (size_t k = 0; k < hw; ++k) {
        const size_t i = (n * g.channels + c) * hw + k;
        sum_dy += dy[i];
        sum_dy_xhat += double(dy[i]) * xhat[i];
      }
    if (dgamma) dgamma[c] += T(sum_dy_xhat);
    if (dbeta) dbeta[c] += T(sum_dy);
    if (!dx) continue;
    const double scale = double(gamma[c]) * inv_std[c];
    const double mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
    for (size_t n = 0; n < g.batch; ++n)
      for (size_t k = 0; k < hw; ++k) {
        const size_t i = (n * g.channels + c) * hw + k;
        dx[i] += T(scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat));
      }
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, const T* a, size_t lda,
          const T* b, size_t ldb, T* c, size_t ldc, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T acc{0};
      for (size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + acc : acc;
    }
  }
}

#define CROSSLINK_INSTANTIATE(T)                                                              \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);     \
  template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, \
                                   T*);                                                       \
  template void max_pool2x2_forward<T>(const PlaneGeometry&, const T*, T*, size_t*);          \
  template void max_pool2x2_backward<T>(const PlaneGeometry&, const size_t*, const T*, T*);   \
  template void avg_pool2x2_forward<T>(const PlaneGeometry&, const T*, T*);                   \
  template void avg_pool2x2_backward<T>(const PlaneGeometry&, const T*, T*);                  \
  template void upsample2x_forward<T>(const PlaneGeometry&, const T*, T*);                    \
  template void upsample2x_backward<T>(const PlaneGeometry&, const T*, T*);                   \
  template void batchnorm_train_forward<T>(const PlaneGeometry&, const T*, const T*,          \
                                           const T*, double, T*, T*, BatchNormOutputs);       \
  template void batchnorm_train_backward<T>(const PlaneGeometry&, const T*, const T*,         \
                                            const double*, const T*, T*, T*, T*);             \
  template void gemm<T>(bool, bool, size_t, size_t, size_t, const T*, size_t, const T*,       \
                        size_t, T*, size_t, bool);

CROSSLINK_INSTANTIATE(float)
CROSSLINK_INSTANTIATE(double)
#undef CROSSLINK_INSTANTIATE

}  // namespace crosslink::kernels::reference
