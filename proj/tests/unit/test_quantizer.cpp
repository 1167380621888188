#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "qalloc/quantizer.hpp"

using namespace qalloc;
using namespace qalloc::testing;

TEST(Quantize, Examples) {
  const QuantSpec s{2, -1.0, 1.0};
  EXPECT_DOUBLE_EQ(s.step(), 0.5);
  const float q = quantize_value(0.3f, s);
  EXPECT_FLOAT_EQ(q, 0.25f);
  EXPECT_NEAR(double(q) - 0.3, -0.05, 1e-7);
  EXPECT_FLOAT_EQ(quantize_value(-1.0f, s), -0.75f);
  EXPECT_FLOAT_EQ(quantize_value(1.0f, s), 0.75f);
  // outside the range clamps to the edge cells
  EXPECT_FLOAT_EQ(quantize_value(5.0f, s), 0.75f);
  EXPECT_FLOAT_EQ(quantize_value(-5.0f, s), -0.75f);
}

TEST(Quantize, ErrorBoundedByHalfStep) {
  Rng rng(1);
  for (int b : {1, 3, 8, 16, 24}) {
    const QuantSpec s{double(b), -0.7, 1.3};
    for (int i = 0; i < 10000; ++i) {
      const float w = static_cast<float>(rng.uniform(-0.7, 1.3));
      const float q = quantize_value(w, s);
      ASSERT_LE(std::abs(double(q) - double(w)), s.step() / 2 + 1e-7) << "b=" << b << " w=" << w;
    }
  }
}

TEST(Quantize, RejectsBadSpecs) {
  const std::vector<float> w{0.1f};
  EXPECT_THROW(quantize_uniform(w, QuantSpec{2.5, -1, 1}), std::invalid_argument);
  EXPECT_THROW(quantize_uniform(w, QuantSpec{0, -1, 1}), std::invalid_argument);
  EXPECT_THROW(quantize_uniform(w, QuantSpec{4, 1, -1}), std::invalid_argument);
}

TEST(Quantize, LevelsAreMidpoints) {
  const QuantSpec s{3, -2.0, 2.0};
  std::set<float> levels;
  for (int i = 0; i <= 4000; ++i) levels.insert(quantize_value(static_cast<float>(-2.0 + i * 0.001), s));
  ASSERT_EQ(levels.size(), 8u);
  int k = 0;
  for (float v : levels) EXPECT_FLOAT_EQ(v, -2.0f + (k++ + 0.5f) * 0.5f);
}

TEST(NoisePower, Examples) {
  EXPECT_DOUBLE_EQ(expected_noise_power(1200, -1.0, 1.0, 4), 1.5625);
  for (int b = 2; b < 16; ++b)
    EXPECT_NEAR(expected_noise_power(500, -0.3, 0.9, b) / expected_noise_power(500, -0.3, 0.9, b + 1), 4.0, 1e-12);
  const auto m = NoiseModel::for_range(1200, -1.0, 1.0);
  EXPECT_NEAR(m.predict(4), 1.5625, 1e-12);
  EXPECT_NEAR(kAlpha, std::log(4.0), 1e-15);
}

TEST(NoisePower, MonteCarloWithinFivePercent) {
  Rng rng(2);
  std::vector<float> w(100000);
  for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (int b = 4; b <= 10; ++b) {
    const QuantSpec s{double(b), -1.0, 1.0};
    const double measured = residual_power(w, quantize_uniform(w, s));
    EXPECT_NEAR(measured / expected_noise_power(w.size(), -1.0, 1.0, b), 1.0, 0.05) << "b=" << b;
  }
}

TEST(QuantizeModel, SixteenBitsKeepsAccuracy) {
  const Model m = small_convnet(3);
  Dataset ds = normal_inputs({6, 6, 2}, 2000, 4);
  relabel(m, ds);
  const std::vector<int> bits(2, 16);
  EXPECT_GE(evaluate_accuracy(quantize_model(m, bits), ds), 1.0 - 0.001);
}

TEST(QuantizeModel, IdempotentAtSameSpec) {
  const Model m = small_convnet(5);
  const std::vector<int> bits{4, 6};
  const auto specs = model_quant_specs(m, bits);
  const Model q1 = quantize_model(m, specs);
  const Model q2 = quantize_model(q1, specs);
  EXPECT_TRUE(q1 == q2);
}

TEST(QuantizeModel, TwoBitsGivesFourValues) {
  const Model m = small_convnet(6);
  const Model q = quantize_model(m, std::vector<int>{2, 2});
  for (std::size_t i : q.weighted_layers()) {
    std::set<float> values(q.layer(i).weights.data.begin(), q.layer(i).weights.data.end());
    EXPECT_LE(values.size(), 4u);
    std::set<float> before(m.layer(i).weights.data.begin(), m.layer(i).weights.data.end());
    EXPECT_GT(before.size(), 4u);
  }
}

TEST(QuantizeModel, RejectsBadAllocations) {
  const Model m = small_convnet(7);
  EXPECT_THROW(quantize_model(m, std::vector<int>{8}), std::invalid_argument);
  EXPECT_THROW(quantize_model(m, std::vector<int>{8, 8, 8}), std::invalid_argument);
  EXPECT_THROW(quantize_model(m, std::vector<int>{1, 8}), std::invalid_argument);
  EXPECT_THROW(quantize_model(m, std::vector<int>{8, 17}), std::invalid_argument);
}

TEST(QuantizeModel, ConstantTensorIsKept) {
  Tensor w({2, 2}, {0.5f, 0.5f, 0.5f, 0.5f});
  EXPECT_FALSE(tensor_range_spec(w, 4).has_value());
  Model m({2}, {Layer::dense(w, Tensor({2}, {0.1f, -0.2f}))});
  const Model q = quantize_model(m, std::vector<int>{3});
  EXPECT_TRUE(bit_identical(q.layer(0).weights, w));
}

TEST(QuantizeModel, LayerAloneLeavesOthersExact) {
  const Model m = small_convnet(8);
  const Model q = quantize_layer(m, 3, 4);
  EXPECT_TRUE(q.layer(0) == m.layer(0));
  EXPECT_FALSE(q.layer(3) == m.layer(3));
  const Model all = quantize_model(m, std::vector<int>{16, 4});
  EXPECT_TRUE(all.layer(3) == q.layer(3));
}

TEST(QuantizeModel, ResidualMatchesSpecNoise) {
  // per-layer residual power matches N * width^2 / 12 * 4^-b for spread-out weights
  Rng rng(9);
  Model m({256}, {Layer::dense(random_tensor({64, 256}, rng), random_tensor({64}, rng))});
  for (int b : {5, 8}) {
    const auto specs = model_quant_specs(m, std::vector<int>{b});
    const Model q = quantize_model(m, specs);
    const auto& s = *specs[0].weights;
    const double measured = residual_power(m.layer(0).weights.data, q.layer(0).weights.data);
    EXPECT_NEAR(measured / expected_noise_power(m.layer(0).weights.size(), s.w_min, s.w_max, b), 1.0, 0.05);
  }
}
