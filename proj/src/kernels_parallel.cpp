// OpenMP kernels. Convolution runs on a packed GEMM whose micro-kernel keeps
// an MR x NR accumulator tile in registers, either fed from an im2col buffer
// or (large maps) with patch panels gathered straight from the input. Each output
// element of every kernel here is produced by exactly one thread with a fixed
// summation order, which keeps results bitwise stable across thread counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "crosslink/kernels.hpp"

namespace crosslink::kernels::parallel {

using std::ptrdiff_t;
using std::size_t;

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace {

template <typename T>
struct Tile;
// 24 accumulator vectors + operands fit the 32 AVX-512 registers.
template <>
struct Tile<float> {
  static constexpr size_t MR = 12, NR = 32;
};
template <>
struct Tile<double> {
  static constexpr size_t MR = 12, NR = 16;
};

constexpr size_t kKc = 256;
constexpr size_t kMc = 96;
constexpr size_t kNc = 2048;

template <typename T, size_t MR, size_t NR>
inline void micro_kernel(size_t kc, const T* __restrict a, const T* __restrict b,
                         T* __restrict c, size_t ldc, size_t mr, size_t nr) {
  T acc[MR][NR] = {};
  for (size_t p = 0; p < kc; ++p) {
    const T* bp = b + p * NR;
    const T* ap = a + p * MR;
    for (size_t i = 0; i < MR; ++i) {
      const T av = ap[i];
#pragma omp simd
      for (size_t j = 0; j < NR; ++j) acc[i][j] = std::fma(av, bp[j], acc[i][j]);
    }
  }
  if (mr == MR && nr == NR) {
    for (size_t i = 0; i < MR; ++i)
#pragma omp simd
      for (size_t j = 0; j < NR; ++j) c[i * ldc + j] += acc[i][j];
  } else {
    for (size_t i = 0; i < mr; ++i)
      for (size_t j = 0; j < nr; ++j) c[i * ldc + j] += acc[i][j];
  }
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into MR-row slivers.
template <typename T, size_t MR>
void pack_a(bool trans, const T* a, size_t lda, size_t i0, size_t mc, size_t p0, size_t kc,
            T* out) {
  for (size_t ir = 0; ir < mc; ir += MR) {
    const size_t mr = std::min(MR, mc - ir);
    T* dst = out + ir * kc;
    for (size_t p = 0; p < kc; ++p) {
      for (size_t i = 0; i < mr; ++i) {
        const size_t row = i0 + ir + i, col = p0 + p;
        dst[p * MR + i] = trans ? a[col * lda + row] : a[row * lda + col];
      }
      for (size_t i = mr; i < MR; ++i) dst[p * MR + i] = T{0};
    }
  }
}

// Packs rows [p0, p0+kc) x cols [j0, j0+nc) of op(B) into NR-column slivers.
template <typename T, size_t NR>
void pack_b(bool trans, const T* b, size_t ldb, size_t p0, size_t kc, size_t j0, size_t nc,
            T* out) {
  const size_t panels = (nc + NR - 1) / NR;
#pragma omp parallel for schedule(static)
  for (size_t jp = 0; jp < panels; ++jp) {
    const size_t jr = jp * NR;
    const size_t nr = std::min(NR, nc - jr);
    T* dst = out + jr * kc;
    if (!trans) {
      for (size_t p = 0; p < kc; ++p) {
        const T* src = b + (p0 + p) * ldb + j0 + jr;
        for (size_t j = 0; j < nr; ++j) dst[p * NR + j] = src[j];
        for (size_t j = nr; j < NR; ++j) dst[p * NR + j] = T{0};
      }
    } else {
      // Walk each source row contiguously.
      for (size_t j = 0; j < nr; ++j) {
        const T* src = b + (j0 + jr + j) * ldb + p0;
        for (size_t p = 0; p < kc; ++p) dst[p * NR + j] = src[p];
      }
      for (size_t p = 0; p < kc; ++p)
        for (size_t j = nr; j < NR; ++j) dst[p * NR + j] = T{0};
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, const T* a, size_t lda,
          const T* b, size_t ldb, T* c, size_t ldc, bool accumulate) {
  constexpr size_t MR = Tile<T>::MR, NR = Tile<T>::NR;
  if (!accumulate) {
    for (size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T{0});
  }
  if (m == 0 || n == 0 || k == 0) return;

  std::vector<T> bpack(kKc * ((std::min(kNc, n) + NR - 1) / NR) * NR);
  const size_t mblocks = (m + kMc - 1) / kMc;
  for (size_t jc = 0; jc < n; jc += kNc) {
    const size_t nc = std::min(kNc, n - jc);
    for (size_t pc = 0; pc < k; pc += kKc) {
      const size_t kc = std::min(kKc, k - pc);
      pack_b<T, NR>(trans_b, b, ldb, pc, kc, jc, nc, bpack.data());
#pragma omp parallel for schedule(static)
      for (size_t mb = 0; mb < mblocks; ++mb) {
        thread_local std::vector<T> apack;
        const size_t ic = mb * kMc;
        const size_t mc = std::min(kMc, m - ic);
        apack.resize(kMc * kKc);
        pack_a<T, MR>(trans_a, a, lda, ic, mc, pc, kc, apack.data());
        for (size_t jr = 0; jr < nc; jr += NR) {
          for (size_t ir = 0; ir < mc; ir += MR) {
            micro_kernel<T, MR, NR>(kc, apack.data() + ir * kc, bpack.data() + jr * kc,
                                    c + (ic + ir) * ldc + jc + jr, ldc, std::min(MR, mc - ir),
                                    std::min(NR, nc - jr));
          }
        }
      }
    }
  }
}

namespace {

// A stride-1 convolution seen as a GEMM whose reduction runs over patch
// entries (c, ki, kj) and whose columns are output pixels. Patch panels are
// gathered from the input on demand instead of through an im2col buffer.
struct ConvShape {
  size_t batch, cin, h, w, cout, kh, kw;
  ptrdiff_t ph, pw;
  size_t oh, ow;
  size_t patch() const { return cin * kh * kw; }
  size_t pixels() const { return batch * oh * ow; }
};

ConvShape forward_shape(const ConvGeometry& g) {
  return {g.batch,    g.in_channels, g.in_h,    g.in_w,
          g.out_channels, g.kernel_h, g.kernel_w, ptrdiff_t(g.pad_h),
          ptrdiff_t(g.pad_w), g.out_h(), g.out_w()};
}

// dx is the convolution of dy with the flipped, channel-transposed kernel.
ConvShape input_grad_shape(const ConvGeometry& g) {
  return {g.batch,
          g.out_channels,
          g.out_h(),
          g.out_w(),
          g.in_channels,
          g.kernel_h,
          g.kernel_w,
          ptrdiff_t(g.kernel_h) - 1 - ptrdiff_t(g.pad_h),
          ptrdiff_t(g.kernel_w) - 1 - ptrdiff_t(g.pad_w),
          g.in_h,
          g.in_w};
}

// Consecutive output pixels inside one row of one image.
struct Run {
  size_t j, len, n, oh, ow;
};

size_t pixel_runs(const ConvShape& s, size_t q0, size_t count, Run* runs) {
  const size_t ohw = s.oh * s.ow;
  size_t nruns = 0;
  for (size_t j = 0; j < count;) {
    const size_t q = q0 + j, n = q / ohw, r = q % ohw, oh = r / s.ow, ow = r % s.ow;
    const size_t len = std::min(count - j, s.ow - ow);
    runs[nruns++] = {j, len, n, oh, ow};
    j += len;
  }
  return nruns;
}

// dst[t] = plane(iy, ix0 + t), zero outside the plane.
template <typename T>
inline void gather_run(const T* plane, const ConvShape& s, ptrdiff_t iy, ptrdiff_t ix0, size_t len,
                       T* dst) {
  if (iy < 0 || iy >= ptrdiff_t(s.h)) {
    std::fill(dst, dst + len, T{0});
    return;
  }
  const ptrdiff_t n = ptrdiff_t(len);
  const ptrdiff_t lo = std::clamp<ptrdiff_t>(-ix0, 0, n);
  const ptrdiff_t hi = std::clamp<ptrdiff_t>(ptrdiff_t(s.w) - ix0, lo, n);
  std::fill(dst, dst + lo, T{0});
  if (hi > lo) std::memcpy(dst + lo, plane + iy * ptrdiff_t(s.w) + ix0 + lo, size_t(hi - lo) * sizeof(T));
  std::fill(dst + hi, dst + n, T{0});
}

// Patch row kk of the pixels in `runs`, written to dst + run.j.
template <typename T>
inline void gather_patch_row(const ConvShape& s, const T* x, size_t c, size_t ki, size_t kj,
                             const Run* runs, size_t nruns, T* dst) {
  for (size_t r = 0; r < nruns; ++r) {
    const Run& u = runs[r];
    gather_run(x + (u.n * s.cin + c) * s.h * s.w, s, ptrdiff_t(u.oh + ki) - s.ph,
               ptrdiff_t(u.ow + kj) - s.pw, u.len, dst + u.j);
  }
}

template <typename T, size_t NR>
void pack_patch_panel(const ConvShape& s, const T* x, size_t p0, size_t kc, const Run* runs,
                      size_t nruns, size_t nr, T* dst) {
  size_t c = p0 / (s.kh * s.kw), ki = (p0 / s.kw) % s.kh, kj = p0 % s.kw;
  for (size_t p = 0; p < kc; ++p) {
    T* d = dst + p * NR;
    gather_patch_row(s, x, c, ki, kj, runs, nruns, d);
    std::fill(d + nr, d + NR, T{0});
    if (++kj == s.kw) {
      kj = 0;
      if (++ki == s.kh) ki = 0, ++c;
    }
  }
}

// y (batch x cout x oh x ow) += w (cout x patch) applied to the patches of x.
// Parallel over pixel panels; the k blocks run in order.
template <typename T>
void conv_implicit(const ConvShape& s, const T* x, const T* w, T* y) {
  constexpr size_t MR = Tile<T>::MR, NR = Tile<T>::NR;
  const size_t M = s.cout, K = s.patch(), ohw = s.oh * s.ow, P = s.pixels();
  if (M == 0 || K == 0 || P == 0) return;
  const size_t panels = (P + NR - 1) / NR;
  std::vector<T> apack(((M + MR - 1) / MR) * MR * std::min(kKc, K));
  for (size_t pc = 0; pc < K; pc += kKc) {
    const size_t kc = std::min(kKc, K - pc);
    pack_a<T, MR>(false, w, K, 0, M, pc, kc, apack.data());
#pragma omp parallel for schedule(static)
    for (size_t jp = 0; jp < panels; ++jp) {
      thread_local std::vector<T> bpack;
      bpack.resize(kKc * NR);
      alignas(64) T tile[MR * NR];
      Run runs[NR];
      const size_t j0 = jp * NR, nr = std::min(NR, P - j0);
      const size_t nruns = pixel_runs(s, j0, nr, runs);
      pack_patch_panel<T, NR>(s, x, pc, kc, runs, nruns, nr, bpack.data());
      const bool one_image = runs[0].n == runs[nruns - 1].n;
      const size_t pix0 = runs[0].oh * s.ow + runs[0].ow;
      for (size_t ir = 0; ir < M; ir += MR) {
        const size_t mr = std::min(MR, M - ir);
        const T* a = apack.data() + ir * kc;
        if (one_image) {
          micro_kernel<T, MR, NR>(kc, a, bpack.data(), y + (runs[0].n * M + ir) * ohw + pix0, ohw,
                                  mr, nr);
          continue;
        }
        std::fill(tile, tile + MR * NR, T{0});
        micro_kernel<T, MR, NR>(kc, a, bpack.data(), tile, NR, MR, NR);
        for (size_t r = 0; r < nruns; ++r) {
          const Run& u = runs[r];
          for (size_t i = 0; i < mr; ++i) {
            T* d = y + (u.n * M + ir + i) * ohw + u.oh * s.ow + u.ow;
            const T* t = tile + i * NR + u.j;
            for (size_t k = 0; k < u.len; ++k) d[k] += t[k];
          }
        }
      }
    }
  }
}

// Images per im2col chunk: enough columns to keep the GEMM wide.
size_t images_per_chunk(const ConvGeometry& g) {
  const size_t cols = g.out_h() * g.out_w();
  const size_t want = (4096 + cols - 1) / cols;
  return std::clamp<size_t>(want, 1, g.batch);
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.pad_h == 0 && g.pad_w == 0;
}

// col[(c*kh + ki)*kw + kj][img*ohw + i*ow + j]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, size_t n0, size_t nimg, T* col) {
  const size_t oh = g.out_h(), ow = g.out_w(), ohw = oh * ow;
  const size_t ncols = nimg * ohw;
  const size_t rows = g.patch();
#pragma omp parallel for schedule(static)
  for (size_t r = 0; r < rows; ++r) {
    const size_t c = r / (g.kernel_h * g.kernel_w);
    const size_t ki = (r / g.kernel_w) % g.kernel_h;
    const size_t kj = r % g.kernel_w;
    T* dst = col + r * ncols;
    for (size_t img = 0; img < nimg; ++img) {
      const T* xp = x + ((n0 + img) * g.in_channels + c) * g.in_h * g.in_w;
      for (size_t i = 0; i < oh; ++i) {
        const ptrdiff_t src_r = ptrdiff_t(i + ki) - ptrdiff_t(g.pad_h);
        T* d = dst + img * ohw + i * ow;
        if (src_r < 0 || src_r >= ptrdiff_t(g.in_h)) {
          std::fill(d, d + ow, T{0});
          continue;
        }
        const T* srow = xp + src_r * g.in_w;
        for (size_t j = 0; j < ow; ++j) {
          const ptrdiff_t s = ptrdiff_t(j + kj) - ptrdiff_t(g.pad_w);
          d[j] = (s < 0 || s >= ptrdiff_t(g.in_w)) ? T{0} : srow[s];
        }
      }
    }
  }
}

// Adds col back into dx. Parallel over input channels: each channel's rows
// are summed in a fixed (ki, kj) order.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, size_t n0, size_t nimg, T* dx) {
  const size_t oh = g.out_h(), ow = g.out_w(), ohw = oh * ow;
  const size_t ncols = nimg * ohw;
#pragma omp parallel for schedule(static)
  for (size_t c = 0; c < g.in_channels; ++c) {
    for (size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* src = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        for (size_t img = 0; img < nimg; ++img) {
          T* xp = dx + ((n0 + img) * g.in_channels + c) * g.in_h * g.in_w;
          for (size_t i = 0; i < oh; ++i) {
            const ptrdiff_t r = ptrdiff_t(i + ki) - ptrdiff_t(g.pad_h);
            if (r < 0 || r >= ptrdiff_t(g.in_h)) continue;
            const T* s = src + img * ohw + i * ow;
            T* drow = xp + r * g.in_w;
            for (size_t j = 0; j < ow; ++j) {
              const ptrdiff_t cc = ptrdiff_t(j + kj) - ptrdiff_t(g.pad_w);
              if (cc >= 0 && cc < ptrdiff_t(g.in_w)) drow[cc] += s[j];
            }
          }
        }
      }
    }
  }
}

// Output maps at least this large use the implicit path; smaller ones are
// dominated by weight traffic and do better as one wide lowered GEMM.
constexpr size_t kImplicitMinPixels = 256;

bool use_implicit(const ConvGeometry& g) { return g.out_h() * g.out_w() >= kImplicitMinPixels; }

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const size_t ohw = g.out_h() * g.out_w();
  if (use_implicit(g)) {
#pragma omp parallel for schedule(static)
    for (size_t p = 0; p < g.batch * g.out_channels; ++p)
      std::fill(y + p * ohw, y + (p + 1) * ohw, b ? b[p % g.out_channels] : T{0});
    conv_implicit(forward_shape(g), x, w, y);
    return;
  }
  const size_t chunk = images_per_chunk(g);
  const size_t K = g.patch();
  std::vector<T> col, out;
  for (size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const size_t nimg = std::min(chunk, g.batch - n0);
    const size_t ncols = nimg * ohw;
    const T* bmat;
    if (is_pointwise(g) && nimg == 1) {
      bmat = x + n0 * g.in_channels * ohw;
    } else {
      col.resize(K * ncols);
      im2col(g, x, n0, nimg, col.data());
      bmat = col.data();
    }
    T* dst;
    if (nimg == 1) {
      dst = y + n0 * g.out_channels * ohw;
    } else {
      out.resize(g.out_channels * ncols);
      dst = out.data();
    }
    gemm(false, false, g.out_channels, ncols, K, w, K, bmat, ncols, dst, ncols, false);
#pragma omp parallel for schedule(static)
    for (size_t o = 0; o < g.out_channels; ++o) {
      const T bias = b ? b[o] : T{0};
      for (size_t img = 0; img < nimg; ++img) {
        const T* s = dst + o * ncols + img * ohw;
        T* d = y + ((n0 + img) * g.out_channels + o) * ohw;
        for (size_t k = 0; k < ohw; ++k) d[k] = s[k] + bias;
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db) {
  const size_t ohw = g.out_h() * g.out_w();
  const size_t chunk = images_per_chunk(g);
  const size_t K = g.patch();

  if (db) {
#pragma omp parallel for schedule(static)
    for (size_t o = 0; o < g.out_channels; ++o) {
      T acc{0};
      for (size_t n = 0; n < g.batch; ++n) {
        const T* d = dy + (n * g.out_channels + o) * ohw;
        for (size_t k = 0; k < ohw; ++k) acc += d[k];
      }
      db[o] += acc;
    }
  }

  const bool implicit_dx = dx && use_implicit(g);
  if (implicit_dx) {
    const size_t kh = g.kernel_h, kw = g.kernel_w, cin = g.in_channels, cout = g.out_channels;
    std::vector<T> flipped(cin * cout * kh * kw);
#pragma omp parallel for schedule(static)
    for (size_t c = 0; c < cin; ++c)
      for (size_t o = 0; o < cout; ++o)
        for (size_t a = 0; a < kh; ++a)
          for (size_t b = 0; b < kw; ++b)
            flipped[((c * cout + o) * kh + a) * kw + b] =
                w[((o * cin + c) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)];
    conv_implicit(input_grad_shape(g), dy, flipped.data(), dx);
    dx = nullptr;
  }
  if (!dx && !dw) return;

  // Lowered path: dw = dy . col^T and dcol = w^T . dy folded back by col2im.
  std::vector<T> col, dyr, dcol;
  for (size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const size_t nimg = std::min(chunk, g.batch - n0);
    const size_t ncols = nimg * ohw;
    const bool direct = is_pointwise(g) && nimg == 1;

    const T* dmat;
    if (nimg == 1) {
      dmat = dy + n0 * g.out_channels * ohw;
    } else {
      dyr.resize(g.out_channels * ncols);
#pragma omp parallel for schedule(static)
      for (size_t o = 0; o < g.out_channels; ++o)
        for (size_t img = 0; img < nimg; ++img)
          std::memcpy(dyr.data() + o * ncols + img * ohw,
                      dy + ((n0 + img) * g.out_channels + o) * ohw, ohw * sizeof(T));
      dmat = dyr.data();
    }

    if (dw) {
      const T* cmat;
      if (direct) {
        cmat = x + n0 * g.in_channels * ohw;
      } else {
        col.resize(K * ncols);
        im2col(g, x, n0, nimg, col.data());
        cmat = col.data();
      }
      gemm(false, true, g.out_channels, K, ncols, dmat, ncols, cmat, ncols, dw, K, true);
    }
    if (dx) {
      if (direct) {
        gemm(true, false, K, ncols, g.out_channels, w, K, dmat, ncols,
             dx + n0 * g.in_channels * ohw, ncols, true);
      } else {
        dcol.resize(K * ncols);
        gemm(true, false, K, ncols, g.out_channels, w, K, dmat, ncols, dcol.data(), ncols,
             false);
        col2im_add(g, dcol.data(), n0, nimg, dx);
      }
    }
  }
}

template <typename T>
void max_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y, size_t* argmax) {
  const size_t in = g.h * g.w, out = (g.h / 2) * (g.w / 2);
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::max_pool2x2_forward(plane, x + p * in, y + p * out, argmax + p * out);
}

template <typename T>
void max_pool2x2_backward(const PlaneGeometry& g, const size_t* argmax, const T* dy, T* dx) {
  const size_t in = g.h * g.w, out = (g.h / 2) * (g.w / 2);
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::max_pool2x2_backward(plane, argmax + p * out, dy + p * out, dx + p * in);
}

template <typename T>
void avg_pool2x2_forward(const PlaneGeometry& g, const T* x, T* y) {
  const size_t in = g.h * g.w, out = (g.h / 2) * (g.w / 2);
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::avg_pool2x2_forward(plane, x + p * in, y + p * out);
}

template <typename T>
void avg_pool2x2_backward(const PlaneGeometry& g, const T* dy, T* dx) {
  const size_t in = g.h * g.w, out = (g.h / 2) * (g.w / 2);
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::avg_pool2x2_backward(plane, dy + p * out, dx + p * in);
}

template <typename T>
void upsample2x_forward(const PlaneGeometry& g, const T* x, T* y) {
  const size_t in = g.h * g.w, out = 4 * in;
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::upsample2x_forward(plane, x + p * in, y + p * out);
}

template <typename T>
void upsample2x_backward(const PlaneGeometry& g, const T* dy, T* dx) {
  const size_t in = g.h * g.w, out = 4 * in;
  const PlaneGeometry plane{1, 1, g.h, g.w};
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < g.planes(); ++p)
    reference::upsample2x_backward(plane, dy + p * out, dx + p * in);
}

template <typename T>
void batchnorm_train_forward(const PlaneGeometry& g, const T* x, const T* gamma, const T* beta,
                             double eps, T* xhat, T* y, BatchNormOutputs stats) {
  const size_t hw = g.h * g.w;
  const double count = double(g.batch * hw);
#pragma omp parallel for schedule(static)
  for (size_t c = 0; c < g.channels; ++c) {
    double sum = 0;
    for (size_t n = 0; n < g.batch; ++n) {
      const T* xp = x + (n * g.channels + c) * hw;
      for (size_t k = 0; k < hw; ++k) sum += xp[k];
    }
    const double mean = sum / count;
    double sq = 0;
    for (size_t n = 0; n < g.batch; ++n) {
      const T* xp = x + (n * g.channels + c) * hw;
      for (size_t k = 0; k < hw; ++k) {
        const double d = xp[k] - mean;
        sq += d * d;
      }
    }
    const double inv_std = 1.0 / std::sqrt(sq / count + eps);
    const T gc = gamma[c], bc = beta[c];
    for (size_t n = 0; n < g.batch; ++n) {
      const size_t off = (n * g.channels + c) * hw;
      for (size_t k = 0; k < hw; ++k) {
        xhat[off + k] = T((x[off + k] - mean) * inv_std);
        y[off + k] = gc * xhat[off + k] + bc;
      }
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
#pragma omp parallel for schedule(static)
  for (size_t c = 0; c < g.channels; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (size_t n = 0; n < g.batch; ++n) {
      const size_t off = (n * g.channels + c) * hw;
      for (size_t k = 0; k < hw; ++k) {
        sum_dy += dy[off + k];
        sum_dy_xhat += double(dy[off + k]) * xhat[off + k];
      }
    }
    if (dgamma) dgamma[c] += T(sum_dy_xhat);
    if (dbeta) dbeta[c] += T(sum_dy);
    if (dx) {
      const double scale = double(gamma[c]) * inv_std[c];
      const double mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
      for (size_t n = 0; n < g.batch; ++n) {
        const size_t off = (n * g.channels + c) * hw;
        for (size_t k = 0; k < hw; ++k)
          dx[off + k] += T(scale * (dy[off + k] - mean_dy - xhat[off + k] * mean_dy_xhat));
      }
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

}  // namespace crosslink::kernels::parallel
