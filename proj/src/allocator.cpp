#include "qalloc/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "qalloc/quantizer.hpp"

namespace qalloc {

const char* to_string(Method m) {
  switch (m) {
    case Method::adaptive: return "adaptive";
    case Method::sqnr: return "sqnr";
    case Method::equal: return "equal";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  if (name == "adaptive") return Method::adaptive;
  if (name == "sqnr") return Method::sqnr;
  if (name == "equal") return Method::equal;
  throw std::invalid_argument("unknown allocation method '" + name + "'");
}

std::int64_t total_size_bits(std::span<const std::size_t> sizes, std::span<const int> bits) {
  if (sizes.size() != bits.size()) throw std::invalid_argument("size_bits: length mismatch");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i)
    total += static_cast<std::int64_t>(sizes[i]) * static_cast<std::int64_t>(bits[i]);
  return total;
}

double predicted_m_all(std::span<const double> coeffs, std::span<const double> bits) {
  if (coeffs.size() != bits.size()) throw std::invalid_argument("predicted_m_all: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < bits.size(); ++i) m += coeffs[i] * std::exp(-kAlpha * bits[i]);
  return m;
}

double predicted_m_all(std::span<const double> coeffs, std::span<const int> bits) {
  std::vector<double> b(bits.begin(), bits.end());
  return predicted_m_all(coeffs, b);
}

std::vector<double> noise_coefficients(std::span<const LayerProfile> profiles) {
  std::vector<double> c;
  for (const auto& p : profiles) c.push_back(p.degenerate ? 0.0 : p.p / p.t);
  return c;
}

void finalize_rounding(BitAllocation& a) {
  if (a.b_real.size() != a.sizes.size()) throw std::invalid_argument("allocation: length mismatch");
  a.b_int.clear();
  a.saturated.clear();
  for (double b : a.b_real) {
    if (!std::isfinite(b)) throw std::invalid_argument("allocation: non-finite bit-width");
    a.saturated.push_back(b < kMinBits || b > kMaxBits);
    a.b_int.push_back(static_cast<int>(std::clamp(std::round(b), double(kMinBits), double(kMaxBits))));
  }
  a.size_bits = total_size_bits(a.sizes, a.b_int);
}

BitAllocation allocate_adaptive(std::span<const LayerProfile> profiles, double b1) {
  if (profiles.empty()) throw std::invalid_argument("allocate_adaptive: no profiles");
  if (!std::isfinite(b1)) throw std::invalid_argument("allocate_adaptive: anchor must be finite");
  std::optional<std::size_t> anchor;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const auto& p = profiles[i];
    if (p.degenerate) continue;
    if (!(p.p > 0.0) || !(p.t > 0.0) || p.params == 0 || !std::isfinite(p.p) || !std::isfinite(p.t))
      throw std::invalid_argument("allocate_adaptive: layer " + std::to_string(p.layer) +
                                  " needs positive p, t and size");
    if (!anchor) anchor = i;
  }
  if (!anchor) throw std::invalid_argument("allocate_adaptive: every layer is degenerate");

  const auto& a0 = profiles[*anchor];
  const double anchor_ratio = a0.p / (a0.t * static_cast<double>(a0.params));
  BitAllocation a;
  a.method = Method::adaptive;
  a.b1 = b1;
  for (const auto& p : profiles) {
    a.sizes.push_back(p.params);
    if (p.degenerate) {
      a.b_real.push_back(kMinBits);
      continue;
    }
    const double ratio = p.p / (p.t * static_cast<double>(p.params));
    a.b_real.push_back(b1 + std::log(ratio / anchor_ratio) / kAlpha);
  }
  finalize_rounding(a);
  return a;
}

BitAllocation allocate_sqnr(std::span<const std::size_t> sizes, double b1) {
  if (sizes.empty()) throw std::invalid_argument("allocate_sqnr: no layers");
  for (auto s : sizes)
    if (s == 0) throw std::invalid_argument("allocate_sqnr: layer sizes must be positive");
  BitAllocation a;
  a.method = Method::sqnr;
  a.b1 = b1;
  a.sizes.assign(sizes.begin(), sizes.end());
  const double s1 = static_cast<double>(sizes[0]);
  for (auto s : sizes) a.b_real.push_back(b1 + std::log(s1 / static_cast<double>(s)) / kAlpha);
  finalize_rounding(a);
  return a;
}

BitAllocation allocate_equal(int bits, std::span<const std::size_t> sizes) {
  if (bits < kMinBits || bits > kMaxBits)
    throw std::invalid_argument("allocate_equal: bit-width " + std::to_string(bits) + " outside [2, 16]");
  BitAllocation a;
  a.method = Method::equal;
  a.b1 = bits;
  a.sizes.assign(sizes.begin(), sizes.end());
  a.b_real.assign(sizes.size(), bits);
  finalize_rounding(a);
  return a;
}

std::vector<BitAllocation> round_allocation(const BitAllocation& a, std::span<const double> coeffs,
                                            std::size_t max_variants) {
  const std::size_t n = a.b_real.size();
  if (!coeffs.empty() && coeffs.size() != n)
    throw std::invalid_argument("round_allocation: coefficient count mismatch");
  std::vector<double> c = coeffs.empty() ? std::vector<double>(n, 1.0)
                                         : std::vector<double>(coeffs.begin(), coeffs.end());

  // Choices per layer after clamping; a layer with an integer (or saturated)
  // b_real contributes a single choice.
  std::vector<std::vector<int>> choices(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double b = a.b_real[i];
    if (!std::isfinite(b)) throw std::invalid_argument("round_allocation: non-finite bit-width");
    std::set<int> opts;
    for (double v : {std::floor(b), std::ceil(b)})
      opts.insert(static_cast<int>(std::clamp(v, double(kMinBits), double(kMaxBits))));
    choices[i].assign(opts.begin(), opts.end());
  }

  std::set<std::vector<int>> seen;
  std::vector<int> cur(n);
  std::vector<std::size_t> idx(n, 0);
  for (;;) {
    for (std::size_t i = 0; i < n; ++i) cur[i] = choices[i][idx[i]];
    seen.insert(cur);
    std::size_t i = 0;
    while (i < n && ++idx[i] == choices[i].size()) idx[i++] = 0;
    if (i == n) break;
  }

  struct Ranked {
    double m;
    std::int64_t size;
    std::vector<int> bits;
  };
  std::vector<Ranked> ranked;
  for (const auto& bits : seen) ranked.push_back({predicted_m_all(c, bits), total_size_bits(a.sizes, bits), bits});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& x, const Ranked& y) {
    if (x.m != y.m) return x.m < y.m;
    if (x.size != y.size) return x.size < y.size;
    return x.bits < y.bits;
  });

  std::vector<BitAllocation> out;
  for (const auto& r : ranked) {
    if (out.size() >= max_variants) break;
    BitAllocation v = a;
    v.b_int = r.bits;
    v.size_bits = r.size;
    out.push_back(std::move(v));
  }
  return out;
}

void pin_layers(BitAllocation& a, const std::vector<bool>& pinned, int bits) {
  if (pinned.size() != a.b_real.size()) throw std::invalid_argument("pin_layers: length mismatch");
  if (bits < kMinBits || bits > kMaxBits) throw std::invalid_argument("pin_layers: bit-width outside [2, 16]");
  for (std::size_t i = 0; i < pinned.size(); ++i) {
    if (!pinned[i]) continue;
    a.b_real[i] = bits;
    a.b_int[i] = bits;
    a.saturated[i] = false;
  }
  a.size_bits = total_size_bits(a.sizes, a.b_int);
}

double stationarity_gap(std::span<const LayerProfile> profiles, std::span<const double> bits) {
  if (profiles.size() != bits.size()) throw std::invalid_argument("stationarity_gap: length mismatch");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const auto& p = profiles[i];
    if (p.degenerate) continue;
    const double v = std::log(p.p) - kAlpha * bits[i] - std::log(p.t * static_cast<double>(p.params));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi >= lo ? hi - lo : 0.0;
}

Model quantize_model(const Model& model, const BitAllocation& a) {
  return quantize_model(model, std::span<const int>(a.b_int));
}

}  // namespace qalloc
