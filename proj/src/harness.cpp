#include "qalloc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "qalloc/quantizer.hpp"

namespace qalloc {

PipelineResult run_pipeline(const Model& model, const Dataset& dataset, const PipelineConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("run_pipeline: empty dataset");
  PipelineResult r;
  r.margins = margin_stats(model, dataset);
  r.t = estimate_t(model, dataset, config.probe);
  r.baseline_accuracy = r.t.baseline_accuracy;
  r.p = estimate_p(model, dataset, config.b_probe);
  r.profiles = assemble_profiles(r.t, r.p);
  return r;
}

double size_megabytes(std::int64_t size_bits) {
  return static_cast<double>(size_bits) / 8.0 / 1048576.0;
}

std::vector<double> default_anchor_grid() {
  std::vector<double> g;
  for (int k = 8; k <= 24; ++k) g.push_back(k * 0.5);
  return g;
}

namespace {

CurvePoint evaluate_point(const Model& model, const Dataset& dataset, const BitAllocation& a,
                          std::size_t variant) {
  CurvePoint p;
  p.method = a.method;
  p.b1 = a.b1;
  p.variant = variant;
  p.b_int = a.b_int;
  p.size_bits = a.size_bits;
  p.size_mb = size_megabytes(a.size_bits);
  p.top1 = evaluate_accuracy(quantize_model(model, a), dataset);
  return p;
}

}  // namespace

std::vector<Curve> sweep(const Model& model, const Dataset& dataset,
                         std::span<const LayerProfile> profiles, const SweepConfig& config) {
  if (config.b1_values.empty()) throw std::invalid_argument("sweep: no anchors");
  if (dataset.empty()) throw std::invalid_argument("sweep: empty dataset");
  const auto weighted = model.weighted_layers();
  if (profiles.size() != weighted.size())
    throw std::invalid_argument("sweep: " + std::to_string(profiles.size()) + " profiles for " +
                                std::to_string(weighted.size()) + " weighted layers");
  const auto sizes = model.layer_sizes();
  std::vector<bool> dense(weighted.size());
  for (std::size_t k = 0; k < weighted.size(); ++k)
    dense[k] = model.layer(weighted[k]).kind == LayerKind::dense;
  const auto coeffs = noise_coefficients(profiles);

  // Collect every allocation first so evaluation order is fixed.
  std::vector<Curve> curves;
  for (Method m : config.methods) {
    Curve c;
    c.method = m;
    std::vector<std::pair<BitAllocation, std::size_t>> jobs;
    if (m == Method::equal) {
      std::set<int> done;
      for (double b : config.b1_values) {
        const int bits = static_cast<int>(std::round(b));
        if (bits < kMinBits || bits > kMaxBits || !done.insert(bits).second) continue;
        jobs.emplace_back(allocate_equal(bits, sizes), 0);
      }
    } else {
      for (double b1 : config.b1_values) {
        BitAllocation a = m == Method::adaptive ? allocate_adaptive(profiles, b1) : allocate_sqnr(sizes, b1);
        if (config.fc_bits) pin_layers(a, dense, *config.fc_bits);
        if (m == Method::adaptive) {
          const auto variants = round_allocation(a, coeffs, config.max_variants);
          for (std::size_t v = 0; v < variants.size(); ++v) {
            BitAllocation va = variants[v];
            if (config.fc_bits) pin_layers(va, dense, *config.fc_bits);
            jobs.emplace_back(std::move(va), v);
          }
        } else {
          jobs.emplace_back(std::move(a), 0);
        }
      }
    }
    for (const auto& [alloc, variant] : jobs) c.points.push_back(evaluate_point(model, dataset, alloc, variant));
    curves.push_back(std::move(c));
  }
  return curves;
}

std::vector<CurvePoint> pareto_front(const Curve& curve) {
  std::vector<CurvePoint> pts = curve.points;
  std::stable_sort(pts.begin(), pts.end(), [](const CurvePoint& x, const CurvePoint& y) {
    if (x.size_bits != y.size_bits) return x.size_bits < y.size_bits;
    return x.top1 > y.top1;
  });
  std::vector<CurvePoint> front;
  for (const auto& p : pts)
    if (front.empty() || p.top1 > front.back().top1) front.push_back(p);
  return front;
}

std::optional<double> size_at_accuracy(std::span<const CurvePoint> front, double acc) {
  if (front.empty() || acc < front.front().top1 || acc > front.back().top1) return std::nullopt;
  for (std::size_t j = 0; j < front.size(); ++j) {
    if (front[j].top1 < acc) continue;
    const double sj = static_cast<double>(front[j].size_bits);
    if (front[j].top1 == acc || j == 0) return sj;
    const auto& lo = front[j - 1];
    const double si = static_cast<double>(lo.size_bits);
    const double w = (acc - lo.top1) / (front[j].top1 - lo.top1);
    return si + w * (sj - si);
  }
  return std::nullopt;
}

Comparison compare(const Curve& a, const Curve& b) {
  Comparison c;
  c.a = a.method;
  c.b = b.method;
  const auto fa = pareto_front(a);
  const auto fb = pareto_front(b);
  if (fa.empty() || fb.empty()) return c;
  const double lo = std::max(fa.front().top1, fb.front().top1);
  const double hi = std::min(fa.back().top1, fb.back().top1);
  if (lo > hi) return c;

  std::set<double> levels;
  for (const auto* f : {&fa, &fb})
    for (const auto& p : *f)
      if (p.top1 >= lo && p.top1 <= hi) levels.insert(p.top1);

  double ratio_sum = 0.0;
  std::size_t wins = 0;
  for (double acc : levels) {
    const auto sa = size_at_accuracy(fa, acc);
    const auto sb = size_at_accuracy(fb, acc);
    if (!sa || !sb) continue;
    MatchedPoint m;
    m.accuracy = acc;
    m.size_a = *sa;
    m.size_b = *sb;
    m.ratio = *sa / *sb;
    m.a_dominates = *sa <= *sb;
    wins += m.a_dominates;
    ratio_sum += m.ratio;
    c.points.push_back(m);
  }
  c.empty = c.points.empty();
  if (!c.empty) {
    c.dominance_fraction = static_cast<double>(wins) / static_cast<double>(c.points.size());
    c.mean_ratio = ratio_sum / static_cast<double>(c.points.size());
  }
  return c;
}

ComparisonReport compare(std::span<const Curve> curves) {
  if (curves.size() < 2) throw std::invalid_argument("compare: need at least two curves");
  ComparisonReport r;
  for (std::size_t i = 0; i < curves.size(); ++i)
    for (std::size_t j = 0; j < curves.size(); ++j)
      if (i != j) r.comparisons.push_back(compare(curves[i], curves[j]));
  return r;
}

const Comparison* ComparisonReport::find(Method a, Method b) const {
  for (const auto& c : comparisons)
    if (c.a == a && c.b == b) return &c;
  return nullptr;
}

}  // namespace qalloc
