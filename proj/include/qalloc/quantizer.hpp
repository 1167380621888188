#pragma once

// Uniform mid-rise weight quantizer and its analytic noise-power model.

#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "qalloc/nncore.hpp"

namespace qalloc {

/// Noise power grows by this factor in the exponent per bit removed: ln 4.
inline constexpr double kAlpha = 2.0 * std::numbers::ln2;

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 16;

struct QuantSpec {
  double bits = 8.0;
  double w_min = -1.0;
  double w_max = 1.0;

  double width() const { return w_max - w_min; }
  /// Cell width (w_max - w_min) / 2^b.
  double step() const;
  void validate() const;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// q(w) = w_min + (floor((clamp(w) - w_min) / step) + 0.5) * step, with the
/// top edge folded into the last cell. `spec.bits` must be an integer >= 1.
std::vector<float> quantize_uniform(std::span<const float> values, const QuantSpec& spec);
float quantize_value(float w, const QuantSpec& spec);

/// Expected ||r_w||^2 = N_W (w_max - w_min)^2 / 12 * e^(-alpha b).
double expected_noise_power(std::size_t count, double w_min, double w_max, double bits);

struct NoiseModel {
  double p_prime = 0.0;
  double alpha = kAlpha;

  static NoiseModel for_range(std::size_t count, double w_min, double w_max);
  double predict(double bits) const;
};

/// Sum of squared residuals q(w) - w.
double residual_power(std::span<const float> values, std::span<const float> quantized);

/// Per-tensor [min, max] spec; nullopt when the tensor is empty or constant
/// (a constant tensor has no range to split and is kept as-is).
std::optional<QuantSpec> tensor_range_spec(const Tensor& t, int bits);

struct LayerQuantSpecs {
  std::size_t layer = 0;
  std::optional<QuantSpec> weights;
  std::optional<QuantSpec> bias;
};

/// Specs from each weighted layer's own weight and bias ranges. `bits` has
/// one entry per weighted layer, each in [kMinBits, kMaxBits].
std::vector<LayerQuantSpecs> model_quant_specs(const Model& model, std::span<const int> bits);

Model quantize_model(const Model& model, std::span<const LayerQuantSpecs> specs);
Model quantize_model(const Model& model, std::span<const int> bits);

/// Quantize weights and bias of a single layer, everything else exact.
Model quantize_layer(const Model& model, std::size_t layer, int bits);

}  // namespace qalloc
