#include <vector>

#include "crosslink/kernels.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace crosslink;
namespace ref = crosslink::kernels::reference;
namespace par = crosslink::kernels::parallel;
using kernels::ConvGeometry;
using kernels::PlaneGeometry;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed) {
  auto t = testing::random_tensor<T>({n}, seed);
  return {t.values().begin(), t.values().end()};
}

template <typename T>
double rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(double(a[i]) - double(b[i])));
    den = std::max(den, std::abs(double(b[i])));
  }
  return num / std::max(den, 1e-30);
}

template <typename T>
void compare_conv(const ConvGeometry& g, double tol) {
  const std::size_t xs = g.batch * g.in_channels * g.in_h * g.in_w;
  const std::size_t ws = g.out_channels * g.patch();
  const std::size_t ys = g.batch * g.out_channels * g.out_h() * g.out_w();
  auto x = random_vec<T>(xs, 1), w = random_vec<T>(ws, 2), b = random_vec<T>(g.out_channels, 3);
  auto dy = random_vec<T>(ys, 4);

  std::vector<T> y0(ys), y1(ys);
  ref::conv2d_forward(g, x.data(), w.data(), b.data(), y0.data());
  par::conv2d_forward(g, x.data(), w.data(), b.data(), y1.data());
  CHECK(rel_diff(y1, y0) < tol);

  // Backward accumulates, so start from a common non-zero state.
  auto dx0 = random_vec<T>(xs, 5), dw0 = random_vec<T>(ws, 6), db0 = random_vec<T>(g.out_channels, 7);
  auto dx1 = dx0, dw1 = dw0, db1 = db0;
  ref::conv2d_backward(g, x.data(), w.data(), dy.data(), dx0.data(), dw0.data(), db0.data());
  par::conv2d_backward(g, x.data(), w.data(), dy.data(), dx1.data(), dw1.data(), db1.data());
  CHECK(rel_diff(dx1, dx0) < tol);
  CHECK(rel_diff(dw1, dw0) < tol);
  CHECK(rel_diff(db1, db0) < tol);

  // Null outputs are skipped.
  auto dw2 = std::vector<T>(ws, T(0));
  par::conv2d_backward<T>(g, x.data(), w.data(), dy.data(), nullptr, dw2.data(), nullptr);
  std::vector<T> dw3(ws, T(0));
  ref::conv2d_backward<T>(g, x.data(), w.data(), dy.data(), nullptr, dw3.data(), nullptr);
  CHECK(rel_diff(dw2, dw3) < tol);
}

const std::vector<ConvGeometry> kGeometries = {
    // batch, cin, h, w, cout, kh, kw, ph, pw
    {2, 3, 8, 8, 4, 3, 1, 1, 0},     {1, 5, 7, 9, 3, 5, 3, 2, 1},   {2, 8, 16, 16, 16, 3, 3, 1, 1},
    {1, 7, 32, 24, 13, 3, 5, 1, 2},  {3, 4, 20, 20, 6, 1, 3, 0, 1}, {2, 32, 16, 16, 64, 1, 1, 0, 0},
    {1, 3, 64, 64, 8, 5, 3, 2, 1},   {2, 6, 10, 12, 5, 3, 3, 0, 0}, {1, 1, 64, 64, 32, 3, 1, 1, 0},
    {4, 16, 17, 15, 12, 3, 3, 1, 1},
};

}  // namespace

TEST_CASE("parallel convolution agrees with the serial reference") {
  for (const auto& g : kGeometries) {
    CAPTURE(g.in_h);
    CAPTURE(g.kernel_h);
    CAPTURE(g.kernel_w);
    compare_conv<double>(g, 1e-12);
    compare_conv<float>(g, 2e-5);
  }
}

TEST_CASE("parallel gemm agrees with a naive triple loop") {
  struct Dims {
    std::size_t m, n, k;
  };
  for (Dims d : {Dims{1, 1, 1}, Dims{13, 37, 5}, Dims{96, 64, 256}, Dims{130, 70, 300},
                 Dims{7, 2100, 9}}) {
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        auto a = random_vec<double>(d.m * d.k, 8), b = random_vec<double>(d.k * d.n, 9);
        auto c0 = random_vec<double>(d.m * d.n, 10);
        auto c1 = c0;
        const std::size_t lda = ta ? d.m : d.k, ldb = tb ? d.k : d.n;
        for (std::size_t i = 0; i < d.m; ++i)
          for (std::size_t j = 0; j < d.n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < d.k; ++p)
              s += (ta ? a[p * lda + i] : a[i * lda + p]) * (tb ? b[j * ldb + p] : b[p * ldb + j]);
            c0[i * d.n + j] += s;
          }
        par::gemm(ta, tb, d.m, d.n, d.k, a.data(), lda, b.data(), ldb, c1.data(), d.n, true);
        CHECK(rel_diff(c1, c0) < 1e-13);

        std::vector<double> c2(d.m * d.n, 123.0), c3(d.m * d.n, -5.0);
        par::gemm(ta, tb, d.m, d.n, d.k, a.data(), lda, b.data(), ldb, c2.data(), d.n, false);
        ref::gemm(ta, tb, d.m, d.n, d.k, a.data(), lda, b.data(), ldb, c3.data(), d.n, false);
        CHECK(rel_diff(c2, c3) < 1e-13);
      }
  }
}

TEST_CASE("parallel plane kernels agree with the serial reference") {
  const PlaneGeometry g{3, 5, 8, 6};
  auto x = random_vec<double>(g.size(), 11);
  const std::size_t half = g.size() / 4;

  std::vector<double> y0(half), y1(half);
  std::vector<std::size_t> a0(half), a1(half);
  ref::max_pool2x2_forward(g, x.data(), y0.data(), a0.data());
  par::max_pool2x2_forward(g, x.data(), y1.data(), a1.data());
  CHECK(y0 == y1);
  CHECK(a0 == a1);
  auto dy = random_vec<double>(half, 12);
  std::vector<double> dx0(g.size()), dx1(g.size());
  ref::max_pool2x2_backward(g, a0.data(), dy.data(), dx0.data());
  par::max_pool2x2_backward(g, a1.data(), dy.data(), dx1.data());
  CHECK(dx0 == dx1);

  ref::avg_pool2x2_forward(g, x.data(), y0.data());
  par::avg_pool2x2_forward(g, x.data(), y1.data());
  CHECK(rel_diff(y1, y0) < 1e-15);

  std::vector<double> u0(g.size() * 4), u1(g.size() * 4);
  ref::upsample2x_forward(g, x.data(), u0.data());
  par::upsample2x_forward(g, x.data(), u1.data());
  CHECK(rel_diff(u1, u0) < 1e-15);
  auto du = random_vec<double>(g.size() * 4, 13);
  std::vector<double> ux0(g.size()), ux1(g.size());
  ref::upsample2x_backward(g, du.data(), ux0.data());
  par::upsample2x_backward(g, du.data(), ux1.data());
  CHECK(rel_diff(ux1, ux0) < 1e-14);

  auto gamma = random_vec<double>(g.channels, 14), beta = random_vec<double>(g.channels, 15);
  std::vector<double> xh0(g.size()), xh1(g.size()), b0(g.size()), b1(g.size());
  std::vector<double> m0(g.channels), m1(g.channels), s0(g.channels), s1(g.channels);
  ref::batchnorm_train_forward(g, x.data(), gamma.data(), beta.data(), 1e-5, xh0.data(), b0.data(),
                               {m0.data(), s0.data()});
  par::batchnorm_train_forward(g, x.data(), gamma.data(), beta.data(), 1e-5, xh1.data(), b1.data(),
                               {m1.data(), s1.data()});
  CHECK(rel_diff(b1, b0) < 1e-13);
  CHECK(rel_diff(m1, m0) < 1e-13);
  CHECK(rel_diff(s1, s0) < 1e-13);
  auto dyb = random_vec<double>(g.size(), 16);
  std::vector<double> bx0(g.size()), bx1(g.size()), dg0(g.channels), dg1(g.channels),
      dbt0(g.channels), dbt1(g.channels);
  ref::batchnorm_train_backward(g, xh0.data(), gamma.data(), s0.data(), dyb.data(), bx0.data(),
                                dg0.data(), dbt0.data());
  par::batchnorm_train_backward(g, xh1.data(), gamma.data(), s1.data(), dyb.data(), bx1.data(),
                                dg1.data(), dbt1.data());
  CHECK(rel_diff(bx1, bx0) < 1e-12);
  CHECK(rel_diff(dg1, dg0) < 1e-12);
  CHECK(rel_diff(dbt1, dbt0) < 1e-12);
}

TEST_CASE("parallel results do not depend on the thread count") {
  const ConvGeometry g{2, 8, 32, 32, 16, 3, 3, 1, 1};
  auto x = random_vec<float>(g.batch * g.in_channels * g.in_h * g.in_w, 17);
  auto w = random_vec<float>(g.out_channels * g.patch(), 18);
  std::vector<float> y1(g.batch * g.out_channels * g.out_h() * g.out_w()), y2(y1.size());
  const int saved = par::num_threads();
  par::set_num_threads(1);
  par::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y1.data());
  par::set_num_threads(3);
  par::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y2.data());
  par::set_num_threads(saved);
  CHECK(testing::bitwise_equal(y1, y2));
}
