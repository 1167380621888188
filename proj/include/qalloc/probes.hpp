#pragma once

// Calibration and validation measurements on the last feature map Z.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qalloc/nncore.hpp"

namespace qalloc {

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

struct MarginStats {
  /// Mean over samples of (z_(1) - z_(2))^2 / 2.
  double mean_r_star = 0.0;
  std::vector<double> per_sample;
  Histogram histogram;
};

/// ||r*||^2 = (z_(1) - z_(2))^2 / 2 for one feature vector (length >= 2).
double adversarial_norm_sq(std::span<const float> z);

MarginStats margin_stats(const Features& features, std::size_t bins = 50);
MarginStats margin_stats(const Model& model, const Dataset& dataset, std::size_t bins = 50);

struct ProbeConfig {
  /// Target accuracy drop. Values <= 0 select half the baseline accuracy.
  double delta_acc = 0.0;
  double k_min = 1e-5;
  double k_max = 1e3;
  double acc_tolerance = 0.005;
  int max_iters = 40;
  std::uint64_t seed = 0x5EED;
  /// Probe only the last N weighted layers (0 = all); earlier layers copy
  /// the earliest probed layer's t.
  std::size_t last_n = 0;
};

struct TProbe {
  std::size_t layer = 0;
  std::size_t params = 0;
  double t = 0.0;
  double k = 0.0;
  double accuracy_drop = 0.0;
  double mean_rz = 0.0;
  int iterations = 0;
  bool converged = false;
  /// False when t was copied from a later layer (last_n mode).
  bool probed = true;
};

struct TReport {
  double baseline_accuracy = 0.0;
  double delta_acc = 0.0;
  double mean_r_star = 0.0;
  std::vector<TProbe> layers;
};

/// Raised when the search cannot bracket the target drop inside
/// [k_min, k_max]. Carries everything measured up to that layer.
class ProbeError : public std::runtime_error {
 public:
  ProbeError(const std::string& what, std::size_t layer, TReport partial)
      : std::runtime_error(what), layer_(layer), partial_(std::move(partial)) {}
  std::size_t layer() const { return layer_; }
  const TReport& partial() const { return partial_; }

 private:
  std::size_t layer_;
  TReport partial_;
};

/// Fixed noise direction for layer `layer`: U(-0.5, 0.5) per weight element
/// from the stream derive_seed(seed, layer).
Tensor noise_direction(const Model& model, std::size_t layer, std::uint64_t seed);

/// Robustness parameters t_i by geometric binary search on the noise scale k.
TReport estimate_t(const Model& model, const Dataset& dataset, const ProbeConfig& config);

struct PProbe {
  std::size_t layer = 0;
  double p = 0.0;
  double mean_rz = 0.0;
  int b_probe = 10;
  /// Quantizing the layer changed nothing; excluded from allocation.
  bool degenerate = false;
};

inline constexpr int kDefaultProbeBits = 10;

/// Noise-power coefficients p_i = mean ||r_z_i||^2 / e^(-alpha b_probe),
/// quantizing each layer alone.
std::vector<PProbe> estimate_p(const Model& model, const Dataset& dataset,
                               int b_probe = kDefaultProbeBits);

struct LayerProfile {
  std::size_t layer = 0;
  std::size_t params = 0;
  double t = 0.0;
  double p = 0.0;
  double delta_acc = 0.0;
  int b_probe = kDefaultProbeBits;
  double k = 0.0;
  bool degenerate = false;

  friend bool operator==(const LayerProfile&, const LayerProfile&) = default;
};

std::vector<LayerProfile> assemble_profiles(const TReport& t, std::span<const PProbe> p);

struct Measurement {
  std::vector<double> m;
  double m_all = 0.0;
};

/// m_i = ||r_Z_i||^2 / t_i and m_all = sum of m_i.
Measurement measurement(std::span<const double> t, std::span<const double> noise_powers);
Measurement measurement(std::span<const LayerProfile> profiles, std::span<const double> noise_powers);

struct LinearityPoint {
  double scale = 0.0;
  double weight_noise_sq = 0.0;   // ||r_W_i||^2
  double feature_noise_sq = 0.0;  // mean ||r_Z_i||^2
};

/// `count` geometric scales from `smallest` upward by `ratio`.
std::vector<double> geometric_ladder(double smallest, double ratio, std::size_t count);

/// Default ladder for a layer: 10^-3 .. 1 times the weights' RMS, half-decade steps.
std::vector<double> default_scale_ladder(const Model& model, std::size_t layer);

std::vector<LinearityPoint> linearity_probe(const Model& model, const Dataset& dataset,
                                            std::size_t layer, std::span<const double> scales,
                                            std::uint64_t seed);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

/// Least-squares line through (log x, log y) of the first `count` points.
LineFit loglog_fit(std::span<const LinearityPoint> points, std::size_t count);

struct AdditivityReport {
  std::vector<double> singles;
  double sum_of_singles = 0.0;
  double joint = 0.0;
  double relative_gap() const;
};

/// `bits` has one integer bit-width per weighted layer.
AdditivityReport additivity_probe(const Model& model, const Dataset& dataset, std::span<const int> bits);

/// gamma(delta) = 5 + 4 ln(1/delta).
double lemma_gamma(double delta);

/// theta(delta_acc) = d / (gamma(delta_acc / (2 acc)) ln d). Diagnostic only.
double theta(double delta_acc, double acc_baseline, std::size_t d);

struct LemmaReport {
  std::size_t d = 0;
  double delta = 0.0;
  std::size_t trials = 0;
  std::size_t flips = 0;
  double gamma = 0.0;
  double rate = 0.0;
  double bound = 0.0;  // 2 delta
  bool within_bound = false;
};

/// Monte Carlo check: random logits, isotropic noise with
/// (ln d / d) gamma(delta) ||r_Z||^2 = (z_(1) - z_(2))^2 / 2, count argmax flips.
LemmaReport lemma_check(std::size_t d, double delta, std::size_t trials, std::uint64_t seed);

struct RankDiagnostic {
  std::size_t layer = 0;
  std::size_t numerical_rank = 0;
  double effective_rank = 0.0;  // exp(entropy of normalized eigenvalues)
};

/// Rank of the feature-noise samples r_z produced by quantizing one layer
/// at `bits`. Model-dependent; reported, never asserted.
RankDiagnostic noise_rank(const Model& model, const Dataset& dataset, std::size_t layer, int bits);

}  // namespace qalloc
