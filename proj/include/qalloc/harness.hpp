#pragma once

// End-to-end experiments: calibrate, sweep anchors, compare methods.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qalloc/allocator.hpp"
#include "qalloc/nncore.hpp"
#include "qalloc/probes.hpp"

namespace qalloc {

struct PipelineConfig {
  ProbeConfig probe;
  int b_probe = kDefaultProbeBits;
};

struct PipelineResult {
  double baseline_accuracy = 0.0;
  MarginStats margins;
  TReport t;
  std::vector<PProbe> p;
  std::vector<LayerProfile> profiles;
};

/// margin_stats -> estimate_t -> estimate_p -> profiles.
PipelineResult run_pipeline(const Model& model, const Dataset& dataset, const PipelineConfig& config);

struct CurvePoint {
  Method method = Method::adaptive;
  double b1 = 0.0;
  std::size_t variant = 0;
  std::vector<int> b_int;
  std::int64_t size_bits = 0;
  double size_mb = 0.0;  // size_bits / 8 / 2^20
  double top1 = 0.0;
};

struct Curve {
  Method method = Method::adaptive;
  std::vector<CurvePoint> points;
};

double size_megabytes(std::int64_t size_bits);

struct SweepConfig {
  std::vector<double> b1_values;
  std::vector<Method> methods{Method::adaptive, Method::sqnr, Method::equal};
  /// Rounded variants kept per adaptive anchor.
  std::size_t max_variants = 16;
  /// Pin dense layers to this bit-width (adaptive and sqnr only).
  std::optional<int> fc_bits;
};

/// 4, 4.5, ..., 12.
std::vector<double> default_anchor_grid();

/// Adaptive: every rounded variant per anchor. SQNR: nearest rounding per
/// anchor. Equal: one point per distinct integer round(b1) in [2, 16].
std::vector<Curve> sweep(const Model& model, const Dataset& dataset,
                         std::span<const LayerProfile> profiles, const SweepConfig& config);

/// Lower envelope: points sorted by size with strictly increasing accuracy.
std::vector<CurvePoint> pareto_front(const Curve& curve);

/// Smallest size reaching accuracy `acc`, linearly interpolated between the
/// bracketing front points. nullopt when `acc` is outside the front's range.
std::optional<double> size_at_accuracy(std::span<const CurvePoint> front, double acc);

struct MatchedPoint {
  double accuracy = 0.0;
  double size_a = 0.0;
  double size_b = 0.0;
  double ratio = 0.0;  // size_a / size_b
  bool a_dominates = false;  // size_a <= size_b
};

struct Comparison {
  Method a = Method::adaptive;
  Method b = Method::equal;
  std::vector<MatchedPoint> points;
  double dominance_fraction = 0.0;
  double mean_ratio = 0.0;
  /// Accuracy ranges are disjoint; no matched points.
  bool empty = true;
};

struct ComparisonReport {
  std::vector<Comparison> comparisons;
  const Comparison* find(Method a, Method b) const;
};

/// Matches sizes at the accuracies attained by either front inside the
/// common accuracy range.
Comparison compare(const Curve& a, const Curve& b);

/// Every ordered pair of distinct curves.
ComparisonReport compare(std::span<const Curve> curves);

}  // namespace qalloc
