#pragma once

// Closed-form bit-width allocation and its baselines.
//
// The adaptive rule equalizes p_i e^(-alpha b_i) / (t_i s_i) across layers,
// anchored at the first layer's bit-width b_1:
//
//   b_i = b_1 + ln(p_i t_1 s_1 / (p_1 t_i s_i)) / alpha
//
// The SQNR baseline is the same rule with p_i / t_i held constant.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qalloc/nncore.hpp"
#include "qalloc/probes.hpp"

namespace qalloc {

enum class Method { adaptive, sqnr, equal };

const char* to_string(Method m);
Method method_from_string(const std::string& name);

struct BitAllocation {
  Method method = Method::adaptive;
  double b1 = 0.0;
  std::vector<double> b_real;
  std::vector<int> b_int;
  std::vector<std::size_t> sizes;
  /// b_real fell outside [kMinBits, kMaxBits] and was clamped.
  std::vector<bool> saturated;
  std::int64_t size_bits = 0;

  friend bool operator==(const BitAllocation&, const BitAllocation&) = default;
};

/// Sum of s_i * b_i in integer arithmetic.
std::int64_t total_size_bits(std::span<const std::size_t> sizes, std::span<const int> bits);

/// Predicted m_all = sum_i c_i e^(-alpha b_i) with c_i = p_i / t_i.
double predicted_m_all(std::span<const double> coeffs, std::span<const double> bits);
double predicted_m_all(std::span<const double> coeffs, std::span<const int> bits);

/// c_i = p_i / t_i per profile (0 for degenerate layers).
std::vector<double> noise_coefficients(std::span<const LayerProfile> profiles);

/// Nearest-integer rounding clamped to [kMinBits, kMaxBits]; fills b_int,
/// saturated and size_bits from b_real and sizes.
void finalize_rounding(BitAllocation& a);

/// Adaptive allocation anchored at the first non-degenerate layer. Degenerate
/// layers (p = 0, flagged) are excluded and pinned to kMinBits.
BitAllocation allocate_adaptive(std::span<const LayerProfile> profiles, double b1);

BitAllocation allocate_sqnr(std::span<const std::size_t> sizes, double b1);

BitAllocation allocate_equal(int bits, std::span<const std::size_t> sizes);

/// Floor/ceil enumeration of b_real, clamped and deduplicated, ordered by
/// predicted m_all ascending then size_bits ascending. Empty `coeffs`
/// weights every layer equally.
std::vector<BitAllocation> round_allocation(const BitAllocation& a, std::span<const double> coeffs,
                                            std::size_t max_variants);

/// Overrides the selected layers with a fixed bit-width (b_real and b_int).
void pin_layers(BitAllocation& a, const std::vector<bool>& pinned, int bits);

/// Log-space spread of p_i e^(-alpha b_i) / (t_i s_i) over non-degenerate
/// layers: max minus min of the logs. Zero at exact stationarity.
double stationarity_gap(std::span<const LayerProfile> profiles, std::span<const double> bits);

Model quantize_model(const Model& model, const BitAllocation& a);

}  // namespace qalloc
