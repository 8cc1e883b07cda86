#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <cstring>
#include <functional>
#include <span>
#include <random>
#include <vector>

#include "crosslink/ops.hpp"
#include "crosslink/tensor.hpp"

namespace testing {

using crosslink::Shape;
using crosslink::Tensor;

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(u(rng));
  return t;
}

// Direct nested-loop cross-correlation with zero padding.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                                 const Tensor<double>& b, std::size_t ph, std::size_t pw) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = h + 2 * ph - kh + 1, ow = wd + 2 * pw - kw + 1;
  Tensor<double> y({n, o, oh, ow});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b.defined() ? b[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t bb = 0; bb < kw; ++bb) {
                const long r = long(i + a) - long(ph), s = long(j + bb) - long(pw);
                if (r < 0 || s < 0 || r >= long(h) || s >= long(wd)) continue;
                acc += x.at(in, ic, std::size_t(r), std::size_t(s)) * w.at(oc, ic, a, bb);
              }
          y.at(in, oc, i, j) = acc;
        }
  return y;
}

// Central differences of a scalar function with respect to every element of t.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor<double>& t,
                                            double h = 1e-5) {
  std::vector<double> g(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = f();
    t[i] = saved - h;
    const double down = f();
    t[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

template <typename A>
double max_relative_error(const A& a, const std::vector<double>& b,
                                 double floor = 1e-8) {
  double worst = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

template <typename A, typename B>
bool bitwise_equal(const A& a, const B& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](auto x, auto y) {
           return std::memcmp(&x, &y, sizeof(x)) == 0;
         });
}

}  // namespace testing
