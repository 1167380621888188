#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "qalloc/probes.hpp"
#include "qalloc/quantizer.hpp"

using namespace qalloc;
using namespace qalloc::testing;

namespace {

struct Setup {
  Model model;
  Dataset data;
};

Setup teacher_mlp(std::uint64_t seed, std::size_t n = 400) {
  Setup s{small_mlp(8, 16, 5, seed), normal_inputs({8}, n, seed + 100)};
  relabel(s.model, s.data);
  return s;
}

Model scale_layer(const Model& m, std::size_t i, float f) {
  Layer l = m.layer(i);
  for (auto& v : l.weights.data) v *= f;
  for (auto& v : l.bias.data) v *= f;
  return m.with_layer(i, l);
}

}  // namespace

TEST(Margins, Examples) {
  EXPECT_DOUBLE_EQ(adversarial_norm_sq(std::vector<float>{3, 1, 0}), 2.0);
  EXPECT_DOUBLE_EQ(adversarial_norm_sq(std::vector<float>{0.5f, 0.5f, 0.5f}), 0.0);
  const auto s = margin_stats(Features{{3, 1, 0}, {1, 1}});
  EXPECT_DOUBLE_EQ(s.mean_r_star, 1.0);
  EXPECT_EQ(s.per_sample, (std::vector<double>{2.0, 0.0}));
  std::size_t total = 0;
  for (auto c : s.histogram.counts) total += c;
  EXPECT_EQ(total, 2u);
  EXPECT_THROW(adversarial_norm_sq(std::vector<float>{1}), std::invalid_argument);
}

TEST(Margins, MeanOfPerSample) {
  const auto s = teacher_mlp(1);
  const auto m = margin_stats(s.model, s.data);
  double sum = 0.0;
  for (const auto& x : s.data.inputs) {
    auto z = forward(s.model, std::span<const float>(x.data));
    std::sort(z.begin(), z.end());
    const double g = double(z[z.size() - 1]) - double(z[z.size() - 2]);
    sum += g * g / 2.0;
  }
  EXPECT_NEAR(m.mean_r_star, sum / s.data.size(), 1e-12 * m.mean_r_star);
}

TEST(EstimateT, StoppingRuleAndDefinition) {
  const auto s = teacher_mlp(2);
  const auto rep = estimate_t(s.model, s.data, ProbeConfig{});
  EXPECT_DOUBLE_EQ(rep.baseline_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(rep.delta_acc, 0.5);
  ASSERT_EQ(rep.layers.size(), 2u);
  for (const auto& l : rep.layers) {
    EXPECT_TRUE(l.converged);
    EXPECT_LE(std::abs(l.accuracy_drop - rep.delta_acc), 0.005);
    EXPECT_GT(l.t, 0.0);
    EXPECT_DOUBLE_EQ(l.t, l.mean_rz / rep.mean_r_star);
    EXPECT_GE(l.k, 1e-5);
    EXPECT_LE(l.k, 1e3);
    // the recorded drop is what the recorded k produces
    Tensor n = noise_direction(s.model, l.layer, ProbeConfig{}.seed);
    for (auto& v : n.data) v = static_cast<float>(l.k * v);
    const auto ev = evaluate_perturbed(forward_batch(s.model, s.data), perturb_layer(s.model, l.layer, n), s.data);
    EXPECT_DOUBLE_EQ(1.0 - ev.accuracy, l.accuracy_drop);
    EXPECT_DOUBLE_EQ(ev.mean_delta, l.mean_rz);
  }
}

TEST(EstimateT, IterationCapFlagsLayer) {
  const auto s = teacher_mlp(3);
  ProbeConfig c;
  c.max_iters = 1;
  c.acc_tolerance = 0.0;
  const auto rep = estimate_t(s.model, s.data, c);
  for (const auto& l : rep.layers)
    if (!l.converged) EXPECT_GT(std::abs(l.accuracy_drop - rep.delta_acc), 0.0);
  bool any = false;
  for (const auto& l : rep.layers) any |= !l.converged;
  EXPECT_TRUE(any);
}

TEST(EstimateT, UnbracketedTargetAbortsWithPartialReport) {
  const auto s = teacher_mlp(4);
  ProbeConfig c;
  c.k_max = 1e-4;
  try {
    estimate_t(s.model, s.data, c);
    FAIL() << "expected ProbeError";
  } catch (const ProbeError& e) {
    EXPECT_EQ(e.layer(), 0u);
    EXPECT_DOUBLE_EQ(e.partial().baseline_accuracy, 1.0);
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(EstimateT, MarginScaleInvariance) {
  // logits x2: r* x4 and ||r_z||^2 x4 at the same k, so t is unchanged
  const auto s = teacher_mlp(5);
  const Model big = scale_layer(s.model, 2, 2.0f);
  const auto a = estimate_t(s.model, s.data, ProbeConfig{});
  const auto b = estimate_t(big, s.data, ProbeConfig{});
  EXPECT_NEAR(b.mean_r_star / a.mean_r_star, 4.0, 1e-5);
  // noise before the scaled layer: the search retraces the same path
  EXPECT_DOUBLE_EQ(a.layers[0].k, b.layers[0].k);
  EXPECT_NEAR(b.layers[0].mean_rz / a.layers[0].mean_rz, 4.0, 1e-4);
  EXPECT_NEAR(b.layers[0].t / a.layers[0].t, 1.0, 1e-4);
  // noise in the scaled layer needs about twice the k; t agrees up to the stopping band
  EXPECT_NEAR(b.layers[1].k / a.layers[1].k, 2.0, 0.1);
  EXPECT_NEAR(b.layers[1].t / a.layers[1].t, 1.0, 0.05);
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    // same noise response against 4x the margins gives t / 4
    EXPECT_NEAR(a.layers[i].mean_rz / b.mean_r_star, a.layers[i].t / 4.0, 1e-4 * a.layers[i].t);
}

TEST(EstimateT, SeededDeterminism) {
  const auto s = teacher_mlp(6);
  ProbeConfig c;
  c.seed = 99;
  const auto a = estimate_t(s.model, s.data, c);
  const auto b = estimate_t(s.model, s.data, c);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].t, b.layers[i].t);
    EXPECT_EQ(a.layers[i].k, b.layers[i].k);
  }
  c.seed = 100;
  const auto d = estimate_t(s.model, s.data, c);
  EXPECT_NE(a.layers[0].t, d.layers[0].t);
}

TEST(EstimateT, LastN) {
  const auto s = teacher_mlp(7);
  ProbeConfig c;
  c.last_n = 1;
  const auto rep = estimate_t(s.model, s.data, c);
  ASSERT_EQ(rep.layers.size(), 2u);
  EXPECT_FALSE(rep.layers[0].probed);
  EXPECT_TRUE(rep.layers[1].probed);
  EXPECT_EQ(rep.layers[0].t, rep.layers[1].t);
  EXPECT_EQ(rep.layers[0].layer, 0u);
  const auto full = estimate_t(s.model, s.data, ProbeConfig{});
  EXPECT_EQ(rep.layers[1].t, full.layers[1].t);
}

TEST(EstimateT, RejectsBadConfig) {
  const auto s = teacher_mlp(8);
  ProbeConfig c;
  c.delta_acc = 1.0;
  EXPECT_THROW(estimate_t(s.model, s.data, c), std::invalid_argument);
  c = ProbeConfig{};
  c.k_min = 2e3;
  EXPECT_THROW(estimate_t(s.model, s.data, c), std::invalid_argument);
  EXPECT_THROW(estimate_t(s.model, Dataset{}, ProbeConfig{}), std::invalid_argument);
}

TEST(EstimateP, PredictsOtherBitWidth) {
  Rng rng(9);
  Model m({512}, {Layer::dense(random_tensor({256, 512}, rng), random_tensor({256}, rng))});
  const Dataset ds = normal_inputs({512}, 1, 10);
  const auto p = estimate_p(m, ds, 10);
  ASSERT_EQ(p.size(), 1u);
  const double predicted = p[0].p * std::exp(-kAlpha * 8);
  const double measured = feature_delta(m, quantize_layer(m, 0, 8), ds);
  EXPECT_NEAR(measured / predicted, 1.0, 0.25);
  EXPECT_DOUBLE_EQ(p[0].p, p[0].mean_rz / std::exp(-kAlpha * 10));
}

TEST(EstimateP, DuplicatedDatasetUnchanged) {
  const auto s = teacher_mlp(11, 100);
  Dataset twice = s.data;
  twice.inputs.insert(twice.inputs.end(), s.data.inputs.begin(), s.data.inputs.end());
  twice.labels.insert(twice.labels.end(), s.data.labels.begin(), s.data.labels.end());
  const auto a = estimate_p(s.model, s.data), b = estimate_p(s.model, twice);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i].p, a[i].p, 1e-12 * a[i].p);
}

TEST(EstimateP, ScalingResponseQuadruplesP) {
  Rng rng(12);
  Model m({16}, {Layer::dense(random_tensor({4, 16}, rng), Tensor({4}))});
  const Dataset ds = normal_inputs({16}, 50, 13);
  // weights x4, inputs x0.5: r_z doubles
  Model m4 = scale_layer(m, 0, 4.0f);
  Dataset half = ds;
  for (auto& x : half.inputs)
    for (auto& v : x.data) v *= 0.5f;
  const auto a = estimate_p(m, ds), b = estimate_p(m4, half);
  EXPECT_NEAR(b[0].p / a[0].p, 4.0, 1e-6);
}

TEST(EstimateP, DegenerateLayerFlagged) {
  Rng rng(14);
  Model m({4}, {Layer::dense(Tensor({4, 4}), Tensor({4})), Layer::relu(),
                Layer::dense(random_tensor({3, 4}, rng), random_tensor({3}, rng))});
  const auto p = estimate_p(m, normal_inputs({4}, 20, 15));
  EXPECT_TRUE(p[0].degenerate);
  EXPECT_EQ(p[0].p, 0.0);
  EXPECT_FALSE(p[1].degenerate);
  EXPECT_THROW(estimate_p(m, normal_inputs({4}, 20, 15), 1), std::invalid_argument);
}

TEST(Measurement, Examples) {
  const std::vector<double> t{2.0}, r{4.0};
  EXPECT_DOUBLE_EQ(measurement(t, r).m_all, 2.0);
  const std::vector<double> t3{1.0, 2.0, 3.0}, zero(3, 0.0);
  EXPECT_EQ(measurement(t3, zero).m_all, 0.0);
  Rng rng(16);
  std::vector<double> tt(20), rr(20);
  double want = 0.0;
  for (std::size_t i = 0; i < tt.size(); ++i) {
    tt[i] = rng.uniform(0.1, 10.0);
    rr[i] = rng.uniform(0.0, 5.0);
    want += rr[i] / tt[i];
  }
  const auto m = measurement(tt, rr);
  EXPECT_NEAR(m.m_all, want, 1e-12 * want);
  double sum = 0.0;
  for (double v : m.m) sum += v;
  EXPECT_EQ(sum, m.m_all);
  EXPECT_THROW(measurement(std::vector<double>{0.0}, r), std::invalid_argument);
}

TEST(Linearity, DenseOnlyIsExact) {
  Rng rng(17);
  Model m({10}, {Layer::dense(random_tensor({8, 10}, rng), random_tensor({8}, rng)),
                 Layer::dense(random_tensor({4, 8}, rng), random_tensor({4}, rng))});
  const Dataset ds = normal_inputs({10}, 100, 18);
  const auto ladder = geometric_ladder(1e-2, std::sqrt(10.0), 5);
  ASSERT_EQ(ladder.size(), 5u);
  const auto pts = linearity_probe(m, ds, 0, ladder, 1);
  const auto fit = loglog_fit(pts, pts.size());
  EXPECT_NEAR(fit.slope, 1.0, 1e-6);
  EXPECT_NEAR(fit.r_squared, 1.0, 1e-9);
}

TEST(Linearity, ReluNetworkSmallScales) {
  const Model m = small_convnet(19);
  const Dataset ds = normal_inputs({6, 6, 2}, 300, 20);
  for (std::size_t layer : m.weighted_layers()) {
    const auto pts = linearity_probe(m, ds, layer, default_scale_ladder(m, layer), 2);
    ASSERT_EQ(pts.size(), 7u);
    const auto fit = loglog_fit(pts, 3);
    EXPECT_NEAR(fit.slope, 1.0, 0.1);
    EXPECT_GE(fit.r_squared, 0.99);
  }
}

TEST(Additivity, SingleLayerIsExact) {
  Rng rng(21);
  Model m({6}, {Layer::dense(random_tensor({3, 6}, rng), random_tensor({3}, rng))});
  const auto r = additivity_probe(m, normal_inputs({6}, 50, 22), std::vector<int>{4});
  EXPECT_EQ(r.sum_of_singles, r.joint);
  EXPECT_EQ(r.relative_gap(), 0.0);
}

TEST(Additivity, SmallNoiseRoughlyAdditive) {
  const Model m = small_convnet(23);
  const auto r = additivity_probe(m, normal_inputs({6, 6, 2}, 500, 24), std::vector<int>{12, 12});
  ASSERT_EQ(r.singles.size(), 2u);
  EXPECT_EQ(r.sum_of_singles, r.singles[0] + r.singles[1]);
  EXPECT_GT(r.joint, 0.0);
}

TEST(Gamma, Values) {
  EXPECT_DOUBLE_EQ(lemma_gamma(1.0), 5.0);
  EXPECT_NEAR(lemma_gamma(0.5), 7.7726, 1e-4);
  EXPECT_THROW(lemma_gamma(0.0), std::invalid_argument);
}

TEST(Theta, MonotoneAndSpotValue) {
  EXPECT_GT(theta(0.2, 1.0, 10), theta(0.1, 1.0, 10));
  // gamma(0.1) = 5 + 4 ln 10; theta = 10 / (gamma ln 10)
  const double ln10 = 2.302585092994046;
  EXPECT_NEAR(theta(0.2, 1.0, 10), 10.0 / ((5.0 + 4.0 * ln10) * ln10), 1e-12);
  // hand formula at d = 3
  EXPECT_NEAR(theta(0.5, 1.0, 3), 3.0 / (lemma_gamma(0.25) * std::log(3.0)), 1e-12);
  EXPECT_THROW(theta(0.1, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(theta(2.5, 1.0, 10), std::invalid_argument);
}

TEST(FlipBound, MonteCarloRateWithinBound) {
  const auto r = lemma_check(10, 0.1, 10000, 1);
  EXPECT_EQ(r.trials, 10000u);
  EXPECT_DOUBLE_EQ(r.bound, 0.2);
  EXPECT_LE(r.rate, 0.2);
  EXPECT_TRUE(r.within_bound);
  EXPECT_NEAR(r.gamma, 5.0 + 4.0 * std::log(10.0), 1e-12);
  const auto again = lemma_check(10, 0.1, 10000, 1);
  EXPECT_EQ(again.flips, r.flips);
  EXPECT_THROW(lemma_check(1, 0.1, 1000, 1), std::invalid_argument);
  EXPECT_THROW(lemma_check(10, 1.0, 1000, 1), std::invalid_argument);
}

TEST(NoiseRank, BoundedByClassCount) {
  const Model m = small_convnet(25);
  const auto r = noise_rank(m, normal_inputs({6, 6, 2}, 100, 26), 0, 6);
  EXPECT_GE(r.numerical_rank, 1u);
  EXPECT_LE(r.numerical_rank, m.d());
  EXPECT_LE(r.effective_rank, double(m.d()) + 1e-9);
}
