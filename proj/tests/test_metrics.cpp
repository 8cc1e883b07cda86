#include <cmath>
#include <random>
#include <sstream>

#include "crosslink/metrics.hpp"
#include "doctest.h"

using namespace crosslink;
using namespace crosslink::metrics;

namespace {

BinaryMask random_mask(std::size_t h, std::size_t w, std::uint64_t seed, double p) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.pixels) v = b(rng);
  return m;
}

ConfusionCounts naive_confusion(const BinaryMask& p, const BinaryMask& g) {
  ConfusionCounts c;
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      const bool a = p.at(y, x), b = g.at(y, x);
      if (a && b) ++c.tp;
      else if (a) ++c.fp;
      else if (b) ++c.fn;
      else ++c.tn;
    }
  return c;
}

// All-pairs Hausdorff over boundary pixels found by an independent scan.
double brute_hausdorff(const BinaryMask& a, const BinaryMask& b, double sy, double sx) {
  auto boundary = [](const BinaryMask& m) {
    std::vector<std::pair<long, long>> out;
    const long h = long(m.height), w = long(m.width);
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        if (!m.at(std::size_t(y), std::size_t(x))) continue;
        bool edge = false;
        const long dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const long ny = y + dy[k], nx = x + dx[k];
          if (ny < 0 || nx < 0 || ny >= h || nx >= w || !m.at(std::size_t(ny), std::size_t(nx))) edge = true;
        }
        if (edge) out.emplace_back(y, x);
      }
    return out;
  };
  const auto pa = boundary(a), pb = boundary(b);
  auto directed = [&](const auto& from, const auto& to) {
    double worst = 0;
    for (auto [y0, x0] : from) {
      double best = INFINITY;
      for (auto [y1, x1] : to)
        best = std::min(best, std::hypot(double(y0 - y1) * sy, double(x0 - x1) * sx));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(pa, pb), directed(pb, pa));
}

}  // namespace

TEST_CASE("confusion counts") {
  BinaryMask ones(4, 4, 1);
  CHECK(confusion(ones, ones) == ConfusionCounts{16, 0, 0, 0});

  BinaryMask g = random_mask(4, 4, 1, 0.5), comp = g;
  for (auto& v : comp.pixels) v = !v;
  const auto c = confusion(comp, g);
  CHECK(c.tp == 0);
  CHECK(c.tn == 0);

  for (std::uint64_t s = 0; s < 20; ++s) {
    BinaryMask p = random_mask(16, 16, 100 + s, 0.3), t = random_mask(16, 16, 200 + s, 0.2);
    const auto cc = confusion(p, t);
    CHECK(cc == naive_confusion(p, t));
    CHECK(cc.total() == 256);
  }
  CHECK_THROWS_AS(confusion(BinaryMask(4, 4), BinaryMask(4, 5)), std::invalid_argument);
}

TEST_CASE("rates") {
  const ConfusionCounts perfect{10, 0, 90, 0};
  CHECK(*dsc(perfect) == 100.0);
  CHECK(*over_rate(perfect) == 0.0);
  CHECK(*under_rate(perfect) == 0.0);

  const ConfusionCounts empty_pred{0, 0, 90, 10};
  CHECK(*dsc(empty_pred) == 0.0);
  CHECK(*under_rate(empty_pred) == 100.0);
  CHECK(*over_rate(empty_pred) == 0.0);

  const ConfusionCounts c{8, 2, 242, 4};
  CHECK(*dsc(c) == doctest::Approx(72.7272727).epsilon(1e-8));
  CHECK(*sensitivity(c) == doctest::Approx(66.6666667).epsilon(1e-8));
  CHECK(*over_rate(c) == doctest::Approx(16.6666667).epsilon(1e-8));
  CHECK(*under_rate(c) == doctest::Approx(33.3333333).epsilon(1e-8));
  CHECK(*specificity(c) == doctest::Approx(100.0 * 242 / 244).epsilon(1e-12));
  CHECK(*dsc(c) == 100.0 * 16 / 22);

  const ConfusionCounts no_truth{0, 3, 13, 0};
  CHECK_FALSE(sensitivity(no_truth).has_value());
  CHECK_FALSE(over_rate(no_truth).has_value());
  CHECK_FALSE(under_rate(no_truth).has_value());
  CHECK(*dsc(no_truth) == 0.0);
  CHECK_FALSE(dsc(ConfusionCounts{0, 0, 16, 0}).has_value());
  CHECK_FALSE(specificity(ConfusionCounts{16, 0, 0, 0}).has_value());
}

TEST_CASE("rate properties on random pairs") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    BinaryMask p = random_mask(12, 12, 300 + s, 0.1 + 0.004 * double(s));
    BinaryMask g = random_mask(12, 12, 700 + s, 0.05 + 0.002 * double(s));
    const auto c = confusion(p, g);
    if (g.count() > 0) {
      CHECK(*sensitivity(c) + *under_rate(c) == doctest::Approx(100.0).epsilon(1e-12));
    }
    const auto swapped = confusion(g, p);
    CHECK(dsc(c) == dsc(swapped));
    for (auto v : {dsc(c), sensitivity(c), specificity(c), under_rate(c)})
      if (v) {
        CHECK(*v >= 0.0);
        CHECK(*v <= 100.0);
      }
  }
}

TEST_CASE("hausdorff distance") {
  BinaryMask a = random_mask(10, 10, 5, 0.4);
  CHECK(*hausdorff(a, a) == 0.0);

  BinaryMask p(8, 8), q(8, 8);
  p.at(0, 0) = 1;
  q.at(3, 4) = 1;
  CHECK(*hausdorff(p, q) == 5.0);
  CHECK(*hausdorff(p, q, PixelSpacing{2.0, 0.5}) == doctest::Approx(std::hypot(6.0, 2.0)));
  CHECK_FALSE(hausdorff(p, BinaryMask(8, 8)).has_value());

  for (std::uint64_t s = 0; s < 30; ++s) {
    BinaryMask x = random_mask(11, 9, 400 + s, 0.3), y = random_mask(11, 9, 500 + s, 0.2),
               z = random_mask(11, 9, 600 + s, 0.25);
    if (!x.count() || !y.count() || !z.count()) continue;
    const double xy = *hausdorff(x, y, {1.5, 1.0});
    CHECK(xy == brute_hausdorff(x, y, 1.5, 1.0));
    CHECK(xy == *hausdorff(y, x, {1.5, 1.0}));
    CHECK(*hausdorff(x, z) <= *hausdorff(x, y) + *hausdorff(y, z) + 1e-12);
  }

  BinaryMask block(5, 5);
  for (std::size_t y = 1; y < 4; ++y)
    for (std::size_t x = 1; x < 4; ++x) block.at(y, x) = 1;
  const auto edge = boundary_pixels(block);
  CHECK(edge.size() == 8);
}

TEST_CASE("binarize uses >= threshold") {
  const BinaryMask m = binarize({0.2f, 0.5f, 0.7f, 0.49f}, 2, 2);
  CHECK(m.pixels == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("summaries and strata") {
  BinaryMask g(10, 10);
  g.at(0, 0) = g.at(0, 1) = 1;
  BinaryMask p = g;
  p.at(5, 5) = 1;
  std::vector<CaseMetrics> cases = {evaluate_case("a", g, g), evaluate_case("b", p, g),
                                    evaluate_case("c", BinaryMask(10, 10), BinaryMask(10, 10))};
  CHECK(cases[0].truth_fraction == 0.02);
  const auto sum = summarize(cases);
  CHECK(sum.cases == 3);
  CHECK(*sum.dsc == doctest::Approx((100.0 + 80.0) / 2));
  CHECK(sum.undefined_dsc == 1);
  CHECK(sum.undefined_hd == 1);

  SUBCASE("one bin holds the global mean") {
    const auto rows = stratified_report(cases, {0.0, 1.0});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].count == 3);
    CHECK(*rows[0].mean_dsc == *sum.dsc);
    CHECK(rows[0].undefined == 1);
  }

  SUBCASE("two cases in different bins") {
    CaseMetrics x, y;
    x.truth_fraction = 0.003, x.dsc = 80.0;
    y.truth_fraction = 0.01, y.dsc = 40.0;
    const auto rows = stratified_report({x, y}, default_bins());
    REQUIRE(rows.size() == 3);
    CHECK(default_bins() == std::vector<double>{0.0, 0.006, 0.02, 1.0});
    CHECK(*rows[0].mean_dsc == 80.0);
    CHECK(*rows[1].mean_dsc == 40.0);
    CHECK(rows[2].count == 0);
    CHECK_FALSE(rows[2].mean_dsc.has_value());
  }

  CHECK_THROWS_AS(stratified_report(cases, {0.0, 0.5, 0.5}), std::invalid_argument);

  SUBCASE("tables") {
    std::ostringstream os;
    write_case_table(os, cases, ',');
    const std::string text = os.str();
    CHECK(text.rfind("id,dsc,sen,spe,or,ur,hd\n", 0) == 0);
    CHECK(text.find("\nc,NA,NA,100") != std::string::npos);
    CHECK(text.find("\nmean,") != std::string::npos);
    std::ostringstream ts;
    write_strata_table(ts, stratified_report(cases, default_bins()), '\t');
    CHECK(ts.str().find('\t') != std::string::npos);
  }
}
