#include <cmath>
#include <numeric>
#include <vector>

#include "crosslink/ops.hpp"
#include "crosslink/tape.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace crosslink;
using testing::random_tensor;

namespace {

Tensor<double> ones(Shape s) { return Tensor<double>(std::move(s), 1.0); }

double sum_of(const Tensor<double>& t) {
  return std::accumulate(t.values().begin(), t.values().end(), 0.0);
}

// Runs f under a fresh tape and returns the gradient of its scalar output
// with respect to x.
template <typename F>
std::vector<double> tape_gradient(Tensor<double>& x, F f) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> y = f();
    tape.backward(y);
  }
  return {x.grad().begin(), x.grad().end()};
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<double> t({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.rank() == 4);
  CHECK_FALSE(t.has_grad());
  t.grad_buffer();
  CHECK(t.grad().size() == t.numel());
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}).item(), ShapeError);

  Tensor<double> alias = t;
  Tensor<double> copy = t.clone();
  CHECK(alias.same_storage(t));
  CHECK_FALSE(copy.same_storage(t));
}

TEST_CASE("conv2d box sum of ones") {
  Tensor<double> x = ones({1, 1, 4, 4});
  Tensor<double> w = ones({1, 1, 3, 3});
  Tensor<double> y = ops::conv2d(x, w, Tensor<double>(), ConvParams{1, 1, 3, 3, 1, 1});
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.at(0, 0, 1, 1) == 9.0);
  CHECK(y.at(0, 0, 2, 2) == 9.0);
  CHECK(y.at(0, 0, 0, 0) == 4.0);
  CHECK(y.at(0, 0, 3, 3) == 4.0);
  CHECK(y.at(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d with a 5x3 kernel and (2,1) padding keeps 5x5") {
  Tensor<double> x = random_tensor({1, 1, 5, 5}, 1);
  Tensor<double> w = random_tensor({1, 1, 5, 3}, 2);
  CHECK(ops::conv2d(x, w, Tensor<double>(), ConvParams{1, 1, 5, 3, 2, 1}).shape() ==
        Shape{1, 1, 5, 5});
}

TEST_CASE("conv2d size preservation for odd kernels up to 5x5") {
  for (std::size_t kh : {1, 3, 5})
    for (std::size_t kw : {1, 3, 5}) {
      ConvParams p{2, 3, kh, kw, (kh - 1) / 2, (kw - 1) / 2};
      CHECK(p.preserves_size());
      Tensor<double> x = random_tensor({1, 2, 9, 7}, kh * 10 + kw);
      Tensor<double> w = random_tensor({3, 2, kh, kw}, kh * 100 + kw);
      CHECK(ops::conv2d(x, w, Tensor<double>(), p).shape() == Shape{1, 3, 9, 7});
    }
}

TEST_CASE("conv2d matches a direct nested-loop oracle") {
  struct Case {
    Shape x;
    std::size_t o, kh, kw, ph, pw;
  };
  // Small maps take the lowered path, 16x16 and larger the implicit one.
  const std::vector<Case> cases = {{{2, 3, 8, 8}, 4, 3, 1, 1, 0},   {{1, 2, 5, 7}, 3, 5, 3, 2, 1},
                                   {{2, 3, 16, 20}, 5, 3, 5, 1, 2}, {{1, 4, 32, 32}, 6, 3, 3, 1, 1},
                                   {{3, 2, 17, 16}, 2, 1, 1, 0, 0}, {{1, 1, 6, 6}, 2, 3, 3, 0, 0}};
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    Tensor<double> x = random_tensor(c.x, ++seed);
    Tensor<double> w = random_tensor({c.o, c.x[1], c.kh, c.kw}, ++seed);
    Tensor<double> b = random_tensor({c.o}, ++seed);
    Tensor<double> y = ops::conv2d(x, w, b, ConvParams{c.x[1], c.o, c.kh, c.kw, c.ph, c.pw});
    Tensor<double> want = testing::naive_conv(x, w, b, c.ph, c.pw);
    REQUIRE(y.shape() == want.shape());
    CHECK(testing::max_abs_diff(y.values(), want.values()) < 1e-12);
  }
}

TEST_CASE("conv2d is linear in its input") {
  Tensor<double> x = random_tensor({2, 3, 12, 12}, 3);
  Tensor<double> y = random_tensor({2, 3, 12, 12}, 4);
  Tensor<double> w = random_tensor({4, 3, 5, 3}, 5);
  const ConvParams p{3, 4, 5, 3, 2, 1};
  const double a = 1.7, b = -0.6;
  Tensor<double> mix = ops::add(ops::scale(x, a), ops::scale(y, b));
  Tensor<double> lhs = ops::conv2d(mix, w, Tensor<double>(), p);
  Tensor<double> rhs = ops::add(ops::scale(ops::conv2d(x, w, Tensor<double>(), p), a),
                                ops::scale(ops::conv2d(y, w, Tensor<double>(), p), b));
  CHECK(testing::max_abs_diff(lhs.values(), rhs.values()) < 1e-10);
}

TEST_CASE("conv2d gradients match central differences") {
  Tensor<double> x = random_tensor({2, 3, 8, 8}, 6);
  Tensor<double> w = random_tensor({4, 3, 3, 1}, 7);
  Tensor<double> b = random_tensor({4}, 8);
  const ConvParams p{3, 4, 3, 1, 1, 0};
  // Sum of squares keeps the weight gradient input-dependent.
  auto loss = [&] {
    Tensor<double> y = ops::conv2d(x, w, b, p);
    return ops::sum(ops::mul(y, y));
  };
  auto value = [&] { return loss().item(); };
  for (Tensor<double>* t : {&x, &w, &b}) {
    const auto analytic = tape_gradient(*t, loss);
    const auto numeric = testing::numeric_gradient(value, *t, 1e-4);
    CHECK(testing::max_relative_error(analytic, numeric, 1e-6) < 1e-5);
  }
}

TEST_CASE("conv2d rejects mismatched shapes") {
  Tensor<double> x = random_tensor({1, 2, 4, 4}, 9);
  Tensor<double> w = random_tensor({1, 3, 3, 3}, 10);
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w, Tensor<double>(), ConvParams{3, 1, 3, 3, 1, 1}),
                       doctest::Contains("channel axis"), ShapeError);
  Tensor<double> w2 = random_tensor({1, 2, 5, 5}, 11);
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, Tensor<double>(), ConvParams{2, 1, 5, 5, 0, 0}),
                       doctest::Contains("output height"), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, w2, Tensor<double>(), ConvParams{2, 1, 3, 3, 1, 1}), ShapeError);
}

TEST_CASE("max_pool2x2") {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(ops::max_pool2x2(x).item() == 4.0);

  SUBCASE("ties route the gradient to the first element in scan order") {
    Tensor<double> c({1, 1, 4, 4}, 2.5);
    const auto g = tape_gradient(c, [&] { return ops::sum(ops::max_pool2x2(c)); });
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(g[i * 4 + j] == ((i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0));
    CHECK(ops::max_pool2x2(c).values()[3] == 2.5);
  }

  SUBCASE("gradient at untied points") {
    // A permutation of distinct values has no ties.
    Tensor<double> r({1, 2, 6, 6});
    for (std::size_t i = 0; i < r.numel(); ++i) r[i] = double((i * 37) % 72) / 10.0;
    Tensor<double> coef = random_tensor({1, 2, 3, 3}, 12);
    auto loss = [&] { return ops::sum(ops::mul(ops::max_pool2x2(r), coef)); };
    const auto analytic = tape_gradient(r, loss);
    const auto numeric = testing::numeric_gradient([&] { return loss().item(); }, r, 1e-4);
    CHECK(testing::max_relative_error(analytic, numeric, 1e-6) < 1e-5);
  }

  CHECK_THROWS_WITH_AS(ops::max_pool2x2(Tensor<double>({1, 1, 3, 4})),
                       doctest::Contains("height 3 is odd"), ShapeError);
  CHECK_THROWS_AS(ops::max_pool2x2(Tensor<double>({1, 1, 4, 5})), ShapeError);
}

TEST_CASE("avg_pool2x2") {
  Tensor<double> q({1, 1, 4, 4});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) q.at(0, 0, i, j) = 1.0;
  CHECK(ops::avg_pool2x2(ops::avg_pool2x2(q)).item() == 0.25);

  Tensor<double> c({2, 3, 6, 8}, -1.25);
  Tensor<double> cp = ops::avg_pool2x2(c);
  for (double v : cp.values()) CHECK(v == -1.25);

  Tensor<double> r = random_tensor({1, 1, 8, 8}, 13);
  const double in_mean = sum_of(r) / double(r.numel());
  Tensor<double> pooled = ops::avg_pool2x2(r);
  CHECK(std::abs(sum_of(pooled) / double(pooled.numel()) - in_mean) < 1e-12);

  CHECK_THROWS_AS(ops::avg_pool2x2(Tensor<double>({1, 1, 5, 4})), ShapeError);

  Tensor<double> coef = random_tensor({1, 1, 4, 4}, 14);
  auto loss = [&] { return ops::sum(ops::mul(ops::avg_pool2x2(r), coef)); };
  const auto analytic = tape_gradient(r, loss);
  const auto numeric = testing::numeric_gradient([&] { return loss().item(); }, r, 1e-4);
  CHECK(testing::max_relative_error(analytic, numeric, 1e-6) < 1e-5);
}

TEST_CASE("bilinear 2x upsampling") {
  Tensor<double> c({1, 2, 3, 5}, 0.75);
  Tensor<double> cu = ops::upsample_bilinear2x(c);
  for (double v : cu.values()) CHECK(v == doctest::Approx(0.75));

  // in[r][c] = 2r + c is linear, so the interpolant is 2 s(i) + s(j) where
  // s is the clamped half-pixel source coordinate (i + 0.5) / 2 - 0.5.
  Tensor<double> x({1, 1, 2, 2}, {0, 1, 2, 3});
  Tensor<double> y = ops::upsample_bilinear2x(x);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  auto s = [](std::size_t i) { return std::clamp((double(i) + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(y.at(0, 0, i, j) == doctest::Approx(2 * s(i) + s(j)).epsilon(1e-15));
  CHECK(y.at(0, 0, 0, 0) == 0.0);
  CHECK(y.at(0, 0, 0, 3) == 1.0);
  CHECK(y.at(0, 0, 3, 0) == 2.0);
  CHECK(y.at(0, 0, 3, 3) == 3.0);
  CHECK(y.at(0, 0, 1, 1) == doctest::Approx(0.75));

  Tensor<double> r = random_tensor({2, 2, 3, 4}, 15);
  Tensor<double> coef = random_tensor({2, 2, 6, 8}, 16);
  auto loss = [&] { return ops::sum(ops::mul(ops::upsample_bilinear2x(r), coef)); };
  const auto analytic = tape_gradient(r, loss);
  const auto numeric = testing::numeric_gradient([&] { return loss().item(); }, r, 1e-4);
  CHECK(testing::max_relative_error(analytic, numeric, 1e-6) < 1e-5);
}

TEST_CASE("batch norm") {
  Tensor<double> x = random_tensor({3, 2, 4, 5}, 17, -3.0, 5.0);
  Tensor<double> gamma({2}, 1.0), beta({2}, 0.0);
  Tensor<double> rm({2}, 0.0), rv({2}, 1.0);

  SUBCASE("train mode standardises each channel") {
    Tensor<double> y = ops::batch_norm(x, gamma, beta, rm, rv, BatchNormMode::Train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0, n = 0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 5; ++j) m += y.at(b, c, i, j), ++n;
      m /= n;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 5; ++j) v += (y.at(b, c, i, j) - m) * (y.at(b, c, i, j) - m);
      v /= n;
      CHECK(std::abs(m) < 1e-6);
      CHECK(std::abs(v - 1.0) < 1e-5);
    }
  }

  SUBCASE("running statistics use momentum 0.1 and the unbiased variance") {
    ops::batch_norm(x, gamma, beta, rm, rv, BatchNormMode::Train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, n = 0, v = 0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 5; ++j) m += x.at(b, c, i, j), ++n;
      m /= n;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 5; ++j) v += (x.at(b, c, i, j) - m) * (x.at(b, c, i, j) - m);
      v /= n - 1;
      CHECK(rm[c] == doctest::Approx(0.1 * m).epsilon(1e-12));
      CHECK(rv[c] == doctest::Approx(0.9 + 0.1 * v).epsilon(1e-12));
    }
  }

  SUBCASE("eval mode with unit statistics is the identity up to epsilon") {
    Tensor<double> y = ops::batch_norm(x, gamma, beta, rm, rv, BatchNormMode::Eval);
    const double k = 1.0 / std::sqrt(1.0 + kBatchNormEps);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i] * k));
    CHECK(rm[0] == 0.0);
    CHECK(rv[0] == 1.0);
  }

  SUBCASE("train mode rejects single-value channels") {
    Tensor<double> single({1, 2, 1, 1}, 1.0);
    CHECK_THROWS_WITH_AS(ops::batch_norm(single, gamma, beta, rm, rv, BatchNormMode::Train),
                         doctest::Contains("more than one value"), ShapeError);
    CHECK_NOTHROW(ops::batch_norm(single, gamma, beta, rm, rv, BatchNormMode::Eval));
  }

  SUBCASE("gradients match central differences") {
    Tensor<double> g = random_tensor({2}, 18, 0.5, 1.5);
    Tensor<double> bt = random_tensor({2}, 19);
    Tensor<double> coef = random_tensor({3, 2, 4, 5}, 20);
    auto loss = [&] {
      Tensor<double> m({2}, 0.0), v({2}, 1.0);
      return ops::sum(ops::mul(ops::batch_norm(x, g, bt, m, v, BatchNormMode::Train), coef));
    };
    for (Tensor<double>* t : {&x, &g, &bt}) {
      const auto analytic = tape_gradient(*t, loss);
      const auto numeric = testing::numeric_gradient([&] { return loss().item(); }, *t, 1e-4);
      CHECK(testing::max_relative_error(analytic, numeric, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("relu and sigmoid") {
  Tensor<double> x({1, 1, 1, 4}, {-1.0, 0.0, 2.0, -0.0});
  Tensor<double> r = ops::relu(x);
  CHECK(r[0] == 0.0);
  CHECK(r[2] == 2.0);
  const auto g = tape_gradient(x, [&] { return ops::sum(ops::relu(x)); });
  CHECK(g == std::vector<double>{0, 0, 1, 0});

  CHECK(ops::sigmoid(Tensor<double>({1}, 0.0))[0] == 0.5);
  Tensor<double> s = random_tensor({1, 1, 3, 3}, 21, -4.0, 4.0);
  const auto sg = tape_gradient(s, [&] { return ops::sum(ops::sigmoid(s)); });
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-s[i]));
    CHECK(sg[i] == doctest::Approx(p * (1 - p)).epsilon(1e-12));
  }
  // Saturated inputs stay finite.
  Tensor<double> big({2}, {800.0, -800.0});
  Tensor<double> sb = ops::sigmoid(big);
  CHECK(sb[0] == 1.0);
  CHECK(sb[1] == 0.0);
}

TEST_CASE("concat_channels") {
  std::vector<Tensor<double>> parts = {random_tensor({2, 32, 4, 4}, 22),
                                       random_tensor({2, 32, 4, 4}, 23),
                                       random_tensor({2, 32, 4, 4}, 24)};
  Tensor<double> c = ops::concat_channels<double>(parts);
  CHECK(c.shape() == Shape{2, 96, 4, 4});
  CHECK(c.at(1, 33, 2, 3) == parts[1].at(1, 1, 2, 3));
  CHECK(c.at(0, 95, 0, 0) == parts[2].at(0, 31, 0, 0));

  std::vector<Tensor<double>> bad = {Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 2, 4})};
  CHECK_THROWS_WITH_AS(ops::concat_channels<double>(bad), doctest::Contains("height axis"),
                       ShapeError);

  Tensor<double>& a = parts[0];
  Tensor<double> coef = random_tensor({2, 96, 4, 4}, 25);
  const auto g =
      tape_gradient(a, [&] { return ops::sum(ops::mul(ops::concat_channels<double>(parts), coef)); });
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 32; ++c)
      for (std::size_t i = 0; i < 16; ++i)
        CHECK(g[(n * 32 + c) * 16 + i] == coef[(n * 96 + c) * 16 + i]);
}

TEST_CASE("add of x and -x") {
  Tensor<double> x = random_tensor({1, 2, 3, 3}, 26);
  Tensor<double> neg = ops::scale(x.clone(), -1.0);
  Tensor<double> z = ops::add(x, neg);
  for (double v : z.values()) CHECK(v == 0.0);

  x.set_requires_grad(true);
  neg.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> s = ops::sum(ops::add(x, neg));
    tape.backward(s);
  }
  for (double v : x.grad()) CHECK(v == 1.0);
  for (double v : neg.grad()) CHECK(v == 1.0);
  CHECK_THROWS_AS(ops::add(x, Tensor<double>({1, 2, 3, 4})), ShapeError);
}

TEST_CASE("backward examples") {
  Tensor<double> x = random_tensor({2, 3}, 27);
  for (double v : tape_gradient(x, [&] { return ops::sum(x); })) CHECK(v == 1.0);
  const auto g = tape_gradient(x, [&] { return ops::sum(ops::mul(x, x)); });
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(g[i] == 2 * x[i]);

  SUBCASE("non-scalar outputs are rejected") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> y = ops::mul(x, x);
    CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("exactly one element"), ShapeError);
  }

  SUBCASE("entries are replayed once each in reverse order") {
    Tape<double> tape;
    std::vector<std::string> visited;
    x.zero_grad();
    {
      TapeScope<double> scope(tape);
      Tensor<double> a = ops::relu(x);
      Tensor<double> b = ops::sigmoid(a);
      Tensor<double> s = ops::sum(b);
      CHECK(tape.ops() == std::vector<std::string>{"relu", "sigmoid", "sum"});
      tape.backward(s);
    }
    CHECK(tape.size() == 0);
  }

  SUBCASE("gradients accumulate across uses") {
    x.zero_grad();
    const auto twice = tape_gradient(x, [&] { return ops::add(ops::sum(x), ops::sum(x)); });
    for (double v : twice) CHECK(v == 2.0);
  }

  SUBCASE("nothing is recorded without a gradient-requiring input or under NoGradScope") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> plain = random_tensor({2, 3}, 28);
    ops::relu(plain);
    CHECK(tape.size() == 0);
    {
      NoGradScope<double> off;
      ops::relu(x);
    }
    CHECK(tape.size() == 0);
    ops::relu(x);
    CHECK(tape.size() == 1);
  }
}

TEST_CASE("forward values are bitwise reproducible") {
  auto run = [] {
    Tensor<float> x = random_tensor<float>({2, 3, 32, 32}, 29);
    Tensor<float> w = random_tensor<float>({8, 3, 5, 3}, 30);
    Tensor<float> b = random_tensor<float>({8}, 31);
    Tensor<float> y = ops::relu(ops::conv2d(x, w, b, ConvParams{3, 8, 5, 3, 2, 1}));
    return ops::upsample_bilinear2x(ops::max_pool2x2(y));
  };
  Tensor<float> a = run(), b = run();
  CHECK(testing::bitwise_equal(a.values(), b.values()));
}

TEST_CASE("transpose_spatial swaps the spatial axes") {
  Tensor<double> x = random_tensor({2, 3, 4, 5}, 32);
  Tensor<double> t = ops::transpose_spatial(x);
  REQUIRE(t.shape() == Shape{2, 3, 5, 4});
  CHECK(t.at(1, 2, 4, 3) == x.at(1, 2, 3, 4));
}
