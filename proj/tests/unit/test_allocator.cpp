#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "qalloc/allocator.hpp"
#include "qalloc/quantizer.hpp"

using namespace qalloc;
using namespace qalloc::testing;

namespace {

LayerProfile profile(std::size_t layer, std::size_t s, double p, double t) {
  LayerProfile l;
  l.layer = layer;
  l.params = s;
  l.p = p;
  l.t = t;
  return l;
}

std::vector<LayerProfile> random_profiles(Rng& rng, std::size_t n) {
  std::vector<LayerProfile> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(profile(i, 10 + rng.below(50000), std::exp(rng.uniform(-3, 8)), std::exp(rng.uniform(-2, 6))));
  return out;
}

double m_all(const std::vector<LayerProfile>& ps, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) m += ps[i].p / ps[i].t * std::pow(4.0, -b[i]);
  return m;
}

}  // namespace

TEST(Adaptive, Examples) {
  const std::vector<LayerProfile> two{profile(0, 100, 1.0, 1.0), profile(1, 200, 1.0, 1.0)};
  const auto a = allocate_adaptive(two, 8.0);
  EXPECT_DOUBLE_EQ(a.b_real[0], 8.0);
  EXPECT_NEAR(a.b_real[1], 7.5, 1e-12);
  EXPECT_EQ(a.method, Method::adaptive);

  const std::vector<LayerProfile> same(4, profile(0, 300, 2.0, 5.0));
  const auto b = allocate_adaptive(same, 6.25);
  for (double v : b.b_real) EXPECT_EQ(v, 6.25);
  EXPECT_EQ(b.b_int, allocate_equal(6, std::vector<std::size_t>(4, 300)).b_int);
}

TEST(Adaptive, RejectsNonPositive) {
  EXPECT_THROW(allocate_adaptive(std::vector<LayerProfile>{profile(0, 10, 0.0, 1.0), profile(1, 10, -1.0, 1.0)}, 8),
               std::invalid_argument);
  EXPECT_THROW(allocate_adaptive(std::vector<LayerProfile>{profile(0, 10, 1.0, 0.0)}, 8), std::invalid_argument);
  EXPECT_THROW(allocate_adaptive(std::vector<LayerProfile>{profile(0, 0, 1.0, 1.0)}, 8), std::invalid_argument);
  EXPECT_THROW(allocate_adaptive(std::vector<LayerProfile>{}, 8), std::invalid_argument);
}

TEST(Adaptive, DegenerateLayerPinnedToMinimum) {
  auto ps = std::vector<LayerProfile>{profile(0, 10, 0.0, 1.0), profile(1, 20, 1.0, 1.0), profile(2, 40, 1.0, 1.0)};
  ps[0].degenerate = true;
  const auto a = allocate_adaptive(ps, 8.0);
  EXPECT_EQ(a.b_int[0], kMinBits);
  EXPECT_DOUBLE_EQ(a.b_real[1], 8.0);  // anchor moves to the first usable layer
  EXPECT_NEAR(a.b_real[2], 7.5, 1e-12);
}

TEST(Adaptive, Stationarity) {
  Rng rng(1);
  for (int n = 0; n < 200; ++n) {
    const auto ps = random_profiles(rng, 2 + rng.below(6));
    const auto a = allocate_adaptive(ps, rng.uniform(3, 12));
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double v = std::log(ps[i].p) - a.b_real[i] * std::log(4.0) - std::log(ps[i].t * ps[i].params);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    ASSERT_LE(hi - lo, 1e-9);
    ASSERT_NEAR(stationarity_gap(ps, a.b_real), hi - lo, 1e-12);
  }
}

TEST(Adaptive, OptimalOnThreeLayerGrid) {
  Rng rng(2);
  for (int set = 0; set < 3; ++set) {
    const auto ps = random_profiles(rng, 3);
    const auto a = allocate_adaptive(ps, rng.uniform(6, 10));
    const double s1 = ps[0].params, s2 = ps[1].params, s3 = ps[2].params;
    const double budget = s1 * a.b_real[0] + s2 * a.b_real[1] + s3 * a.b_real[2];
    const double mine = m_all(ps, a.b_real);
    double best = INFINITY;
    for (int i = 0; i <= 2000; ++i)
      for (int j = 0; j <= 2000; ++j) {
        const double b2 = i * 0.01, b3 = j * 0.01;
        best = std::min(best, m_all(ps, {(budget - s2 * b2 - s3 * b3) / s1, b2, b3}));
      }
    EXPECT_LE(mine, best + 1e-9);
  }
}

TEST(Adaptive, OptimalAgainstLocalGridForTwoAndFourLayers) {
  Rng rng(3);
  {
    const auto ps = random_profiles(rng, 2);
    const auto a = allocate_adaptive(ps, 8);
    const double budget = ps[0].params * a.b_real[0] + ps[1].params * a.b_real[1];
    const double mine = m_all(ps, a.b_real);
    for (int i = 0; i <= 2000; ++i) {
      const double b2 = i * 0.01;
      EXPECT_LE(mine, m_all(ps, {(budget - ps[1].params * b2) / ps[0].params, b2}) + 1e-9);
    }
  }
  const auto ps = random_profiles(rng, 4);
  const auto a = allocate_adaptive(ps, 8);
  const double mine = m_all(ps, a.b_real);
  double budget = 0.0;
  for (std::size_t i = 0; i < 4; ++i) budget += ps[i].params * a.b_real[i];
  double best = INFINITY;
  for (int i = -60; i <= 60; ++i)
    for (int j = -60; j <= 60; ++j)
      for (int k = -60; k <= 60; ++k) {
        std::vector<double> b{0, a.b_real[1] + i * 0.01, a.b_real[2] + j * 0.01, a.b_real[3] + k * 0.01};
        b[0] = (budget - ps[1].params * b[1] - ps[2].params * b[2] - ps[3].params * b[3]) / ps[0].params;
        best = std::min(best, m_all(ps, b));
      }
  EXPECT_LE(mine, best + 1e-9);
}

TEST(Adaptive, AnchorShiftsEveryLayer) {
  Rng rng(4);
  const auto ps = random_profiles(rng, 5);
  const auto a = allocate_adaptive(ps, 6.0), b = allocate_adaptive(ps, 7.75);
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_NEAR(b.b_real[i] - a.b_real[i], 1.75, 1e-12);
}

TEST(Adaptive, ClampsAndReportsSaturation) {
  const std::vector<LayerProfile> ps{profile(0, 10, 1.0, 1.0), profile(1, 10, 1e12, 1.0), profile(2, 10, 1e-12, 1.0)};
  const auto a = allocate_adaptive(ps, 8.0);
  EXPECT_EQ(a.b_int[1], kMaxBits);
  EXPECT_EQ(a.b_int[2], kMinBits);
  EXPECT_EQ(a.saturated, (std::vector<bool>{false, true, true}));
}

TEST(Sqnr, Examples) {
  const std::vector<std::size_t> sizes{100, 400};
  const auto a = allocate_sqnr(sizes, 8.0);
  EXPECT_NEAR(a.b_real[1], 7.0, 1e-12);
  const auto e = allocate_sqnr(std::vector<std::size_t>{50, 50, 50}, 5.5);
  for (double v : e.b_real) EXPECT_EQ(v, 5.5);
  EXPECT_THROW(allocate_sqnr(std::vector<std::size_t>{10, 0}, 8), std::invalid_argument);
}

TEST(Sqnr, SpecialCaseOfAdaptive) {
  Rng rng(5);
  for (int n = 0; n < 100; ++n) {
    auto ps = random_profiles(rng, 2 + rng.below(6));
    const double c = std::exp(rng.uniform(-5, 5));
    std::vector<std::size_t> sizes;
    for (auto& p : ps) {
      p.p = c * p.t;
      sizes.push_back(p.params);
    }
    const double b1 = rng.uniform(4, 12);
    const auto a = allocate_adaptive(ps, b1), s = allocate_sqnr(sizes, b1);
    for (std::size_t i = 0; i < ps.size(); ++i) ASSERT_NEAR(a.b_real[i], s.b_real[i], 1e-12);
  }
}

TEST(Equal, Examples) {
  const std::vector<std::size_t> sizes{10, 20, 30};
  const auto a = allocate_equal(8, sizes);
  EXPECT_EQ(a.b_int, (std::vector<int>{8, 8, 8}));
  EXPECT_EQ(a.size_bits, 8 * 60);
  EXPECT_THROW(allocate_equal(1, sizes), std::invalid_argument);
  EXPECT_THROW(allocate_equal(17, sizes), std::invalid_argument);
}

TEST(Rounding, Variants) {
  BitAllocation a = allocate_sqnr(std::vector<std::size_t>{100, 100}, 8.0);
  a.b_real = {7.3, 5.6};
  finalize_rounding(a);
  const std::vector<double> c{1.0, 3.0};
  const auto vs = round_allocation(a, c, 16);
  ASSERT_EQ(vs.size(), 4u);
  double prev = -INFINITY;
  for (const auto& v : vs) {
    // independent re-evaluation of the ranking key
    const double m = c[0] * std::pow(4.0, -v.b_int[0]) + c[1] * std::pow(4.0, -v.b_int[1]);
    EXPECT_GE(m, prev);
    prev = m;
    EXPECT_EQ(v.size_bits, 100 * v.b_int[0] + 100 * v.b_int[1]);
    EXPECT_EQ(v.b_real, a.b_real);
  }
  EXPECT_EQ(vs.front().b_int, (std::vector<int>{8, 6}));
  EXPECT_EQ(round_allocation(a, c, 2).size(), 2u);
}

TEST(Rounding, IntegerInputSingleVariant) {
  const auto a = allocate_equal(6, std::vector<std::size_t>{5, 7, 9});
  const auto vs = round_allocation(a, {}, 16);
  ASSERT_EQ(vs.size(), 1u);
  EXPECT_EQ(vs[0].b_int, a.b_int);
}

TEST(Rounding, ClampedChoicesDeduplicate) {
  BitAllocation a = allocate_equal(8, std::vector<std::size_t>{5, 5});
  a.b_real = {1.4, 16.5};
  finalize_rounding(a);
  const auto vs = round_allocation(a, {}, 16);
  ASSERT_EQ(vs.size(), 1u);
  EXPECT_EQ(vs[0].b_int, (std::vector<int>{2, 16}));
}

TEST(Budget, SizeBitsIsExactIntegerSum) {
  Rng rng(6);
  for (int n = 0; n < 50; ++n) {
    const auto ps = random_profiles(rng, 1 + rng.below(6));
    const auto a = allocate_adaptive(ps, rng.uniform(2, 16));
    std::int64_t want = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) want += std::int64_t(ps[i].params) * a.b_int[i];
    ASSERT_EQ(a.size_bits, want);
    for (const auto& v : round_allocation(a, noise_coefficients(ps), 8)) {
      std::int64_t w = 0;
      for (std::size_t i = 0; i < ps.size(); ++i) w += std::int64_t(ps[i].params) * v.b_int[i];
      ASSERT_EQ(v.size_bits, w);
    }
  }
}

TEST(Pin, OverridesSelectedLayers) {
  auto a = allocate_sqnr(std::vector<std::size_t>{10, 1000, 20}, 8.0);
  pin_layers(a, {false, true, false}, 16);
  EXPECT_EQ(a.b_int[1], 16);
  EXPECT_EQ(a.size_bits, 10 * a.b_int[0] + 1000 * 16 + 20 * a.b_int[2]);
  EXPECT_THROW(pin_layers(a, {true}, 16), std::invalid_argument);
}

TEST(Methods, Names) {
  for (auto m : {Method::adaptive, Method::sqnr, Method::equal}) EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_THROW(method_from_string("greedy"), std::invalid_argument);
}

TEST(Predicted, MatchesMeasurementDefinition) {
  const std::vector<double> c{2.0, 0.5};
  EXPECT_NEAR(predicted_m_all(c, std::vector<int>{1, 2}), 2.0 / 4 + 0.5 / 16, 1e-15);
}
