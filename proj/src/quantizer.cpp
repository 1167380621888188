#include "qalloc/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qalloc {

double QuantSpec::step() const { return width() / std::exp2(bits); }

void QuantSpec::validate() const {
  if (!(bits >= 1.0) || !std::isfinite(bits))
    throw std::invalid_argument("quantizer: bit-width must be >= 1, got " + std::to_string(bits));
  if (!(w_min < w_max) || !std::isfinite(w_min) || !std::isfinite(w_max))
    throw std::invalid_argument("quantizer: empty range [" + std::to_string(w_min) + ", " +
                                std::to_string(w_max) + "]");
}

namespace {

void require_integer_bits(const QuantSpec& spec) {
  spec.validate();
  if (spec.bits != std::floor(spec.bits) || spec.bits > 52)
    throw std::invalid_argument("quantizer: applied bit-width must be an integer in [1, 52], got " +
                                std::to_string(spec.bits));
}

double quantize_checked(double w, const QuantSpec& spec, double step, double top_cell) {
  const double x = std::clamp(w, spec.w_min, spec.w_max);
  const double cell = std::min(std::floor((x - spec.w_min) / step), top_cell);
  return spec.w_min + (cell + 0.5) * step;
}

}  // namespace

float quantize_value(float w, const QuantSpec& spec) {
  require_integer_bits(spec);
  return static_cast<float>(quantize_checked(w, spec, spec.step(), std::exp2(spec.bits) - 1.0));
}

std::vector<float> quantize_uniform(std::span<const float> values, const QuantSpec& spec) {
  require_integer_bits(spec);
  const double step = spec.step();
  const double top = std::exp2(spec.bits) - 1.0;
  std::vector<float> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!std::isfinite(values[k])) throw std::invalid_argument("quantizer: non-finite value");
    out[k] = static_cast<float>(quantize_checked(values[k], spec, step, top));
  }
  return out;
}

double expected_noise_power(std::size_t count, double w_min, double w_max, double bits) {
  return NoiseModel::for_range(count, w_min, w_max).predict(bits);
}

NoiseModel NoiseModel::for_range(std::size_t count, double w_min, double w_max) {
  const double width = w_max - w_min;
  return NoiseModel{static_cast<double>(count) * width * width / 12.0, kAlpha};
}

double NoiseModel::predict(double bits) const { return p_prime * std::exp(-alpha * bits); }

double residual_power(std::span<const float> values, std::span<const float> quantized) {
  if (values.size() != quantized.size())
    throw std::invalid_argument("residual_power: length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    const double r = static_cast<double>(quantized[k]) - static_cast<double>(values[k]);
    s += r * r;
  }
  return s;
}

std::optional<QuantSpec> tensor_range_spec(const Tensor& t, int bits) {
  if (t.empty()) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(t.data.begin(), t.data.end());
  if (!(*lo < *hi)) return std::nullopt;
  return QuantSpec{static_cast<double>(bits), *lo, *hi};
}

namespace {

void check_bits(int b) {
  if (b < kMinBits || b > kMaxBits)
    throw std::invalid_argument("bit-width " + std::to_string(b) + " outside [" +
                                std::to_string(kMinBits) + ", " + std::to_string(kMaxBits) + "]");
}

LayerQuantSpecs layer_specs(const Model& model, std::size_t layer, int bits) {
  check_bits(bits);
  const auto& l = model.layer(layer);
  return {layer, tensor_range_spec(l.weights, bits), tensor_range_spec(l.bias, bits)};
}

void apply(Tensor& t, const std::optional<QuantSpec>& spec) {
  if (spec) t.data = quantize_uniform(t.data, *spec);
}

}  // namespace

std::vector<LayerQuantSpecs> model_quant_specs(const Model& model, std::span<const int> bits) {
  const auto weighted = model.weighted_layers();
  if (bits.size() != weighted.size())
    throw std::invalid_argument("allocation has " + std::to_string(bits.size()) +
                                " bit-widths, model has " + std::to_string(weighted.size()) +
                                " weighted layers");
  std::vector<LayerQuantSpecs> specs;
  specs.reserve(bits.size());
  for (std::size_t k = 0; k < bits.size(); ++k) specs.push_back(layer_specs(model, weighted[k], bits[k]));
  return specs;
}

Model quantize_model(const Model& model, std::span<const LayerQuantSpecs> specs) {
  auto layers = model.layers();
  for (const auto& s : specs) {
    if (s.layer >= layers.size() || !layers[s.layer].has_weights())
      throw std::invalid_argument("quantize_model: layer " + std::to_string(s.layer) +
                                  " is not a weighted layer");
    apply(layers[s.layer].weights, s.weights);
    apply(layers[s.layer].bias, s.bias);
  }
  return Model(model.input_shape(), std::move(layers));
}

Model quantize_model(const Model& model, std::span<const int> bits) {
  const auto specs = model_quant_specs(model, bits);
  return quantize_model(model, specs);
}

Model quantize_layer(const Model& model, std::size_t layer, int bits) {
  if (layer >= model.num_layers() || !model.layer(layer).has_weights())
    throw std::invalid_argument("quantize_layer: layer " + std::to_string(layer) +
                                " is not a weighted layer");
  const LayerQuantSpecs spec = layer_specs(model, layer, bits);
  return quantize_model(model, std::span<const LayerQuantSpecs>(&spec, 1));
}

}  // namespace qalloc
