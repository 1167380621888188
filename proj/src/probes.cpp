#include "qalloc/probes.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qalloc/quantizer.hpp"
#include "qalloc/rng.hpp"

namespace qalloc {

double adversarial_norm_sq(std::span<const float> z) {
  if (z.size() < 2) throw std::invalid_argument("margin needs at least 2 logits");
  double first = -INFINITY, second = -INFINITY;
  for (float v : z) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  const double gap = first - second;
  return gap * gap / 2.0;
}

MarginStats margin_stats(const Features& features, std::size_t bins) {
  MarginStats s;
  if (features.empty()) throw std::invalid_argument("margin_stats: no samples");
  s.per_sample.reserve(features.size());
  for (const auto& z : features) s.per_sample.push_back(adversarial_norm_sq(z));
  for (double v : s.per_sample) s.mean_r_star += v;
  s.mean_r_star /= static_cast<double>(s.per_sample.size());

  bins = std::max<std::size_t>(bins, 1);
  const auto [lo, hi] = std::minmax_element(s.per_sample.begin(), s.per_sample.end());
  s.histogram.lo = *lo;
  s.histogram.hi = *hi;
  s.histogram.counts.assign(bins, 0);
  const double width = (*hi - *lo) / static_cast<double>(bins);
  for (double v : s.per_sample) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - *lo) / width) : 0;
    s.histogram.counts[std::min(b, bins - 1)]++;
  }
  return s;
}

MarginStats margin_stats(const Model& model, const Dataset& dataset, std::size_t bins) {
  if (model.d() < 2) throw std::invalid_argument("margin_stats: model needs d >= 2");
  return margin_stats(forward_batch(model, dataset), bins);
}

Tensor noise_direction(const Model& model, std::size_t layer, std::uint64_t seed) {
  const auto& l = model.layer(layer);
  if (!l.has_weights())
    throw std::invalid_argument("layer " + std::to_string(layer) + " has no weights to perturb");
  Rng rng(derive_seed(seed, layer));
  Tensor dir(l.weights.shape);
  for (auto& v : dir.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return dir;
}

namespace {

Tensor scaled(const Tensor& t, double k) {
  Tensor out = t;
  for (auto& v : out.data) v = static_cast<float>(k * v);
  return out;
}

}  // namespace

TReport estimate_t(const Model& model, const Dataset& dataset, const ProbeConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("estimate_t: empty dataset");
  if (!(config.k_min > 0.0 && config.k_min < config.k_max))
    throw std::invalid_argument("estimate_t: need 0 < k_min < k_max");
  if (config.acc_tolerance < 0.0 || config.max_iters < 1)
    throw std::invalid_argument("estimate_t: invalid tolerance or iteration cap");

  const Features base = forward_batch(model, dataset);
  TReport report;
  const auto margins = margin_stats(base);
  report.mean_r_star = margins.mean_r_star;
  {
    std::size_t hits = 0;
    for (std::size_t n = 0; n < dataset.size(); ++n) hits += classify(base[n]) == dataset.labels[n];
    report.baseline_accuracy = static_cast<double>(hits) / static_cast<double>(dataset.size());
  }
  report.delta_acc = config.delta_acc > 0.0 ? config.delta_acc : 0.5 * report.baseline_accuracy;
  if (!(report.delta_acc < report.baseline_accuracy))
    throw std::invalid_argument("estimate_t: target drop " + std::to_string(report.delta_acc) +
                                " not below baseline accuracy " +
                                std::to_string(report.baseline_accuracy));
  if (!(report.mean_r_star > 0.0))
    throw std::invalid_argument("estimate_t: mean adversarial norm is zero (all logits tied)");

  const auto weighted = model.weighted_layers();
  const std::size_t first_probed =
      config.last_n == 0 || config.last_n >= weighted.size() ? 0 : weighted.size() - config.last_n;
  const double target = report.delta_acc;
  const double tol = config.acc_tolerance;

  std::vector<TProbe> probed;
  for (std::size_t w = first_probed; w < weighted.size(); ++w) {
    const std::size_t layer = weighted[w];
    const Tensor dir = noise_direction(model, layer, config.seed);
    auto eval = [&](double k) {
      return evaluate_perturbed(base, perturb_layer(model, layer, scaled(dir, k)), dataset);
    };

    TProbe probe;
    probe.layer = layer;
    probe.params = model.layer(layer).parameter_count();

    const auto at_max = eval(config.k_max);
    const auto at_min = eval(config.k_min);
    const double drop_max = report.baseline_accuracy - at_max.accuracy;
    const double drop_min = report.baseline_accuracy - at_min.accuracy;
    if (drop_max < target - tol || drop_min > target + tol) {
      TReport partial = report;
      partial.layers = probed;
      throw ProbeError("layer " + std::to_string(layer) + ": accuracy drop " +
                           std::to_string(drop_min) + ".." + std::to_string(drop_max) +
                           " over k in [k_min, k_max] does not bracket target " +
                           std::to_string(target),
                       layer, std::move(partial));
    }

    double lo = config.k_min, hi = config.k_max;
    double k = std::sqrt(lo * hi);
    PerturbedEval e{};
    for (int it = 0; it < config.max_iters; ++it) {
      e = eval(k);
      probe.iterations = it + 1;
      const double drop = report.baseline_accuracy - e.accuracy;
      probe.k = k;
      probe.accuracy_drop = drop;
      if (std::abs(drop - target) <= tol) {
        probe.converged = true;
        break;
      }
      if (drop < target)
        lo = k;
      else
        hi = k;
      k = std::sqrt(lo * hi);
    }
    probe.mean_rz = e.mean_delta;
    probe.t = e.mean_delta / report.mean_r_star;
    probed.push_back(probe);
  }

  for (std::size_t w = 0; w < first_probed; ++w) {
    TProbe copy = probed.front();
    copy.layer = weighted[w];
    copy.params = model.layer(weighted[w]).parameter_count();
    copy.probed = false;
    report.layers.push_back(copy);
  }
  report.layers.insert(report.layers.end(), probed.begin(), probed.end());
  return report;
}

std::vector<PProbe> estimate_p(const Model& model, const Dataset& dataset, int b_probe) {
  if (b_probe < kMinBits || b_probe > kMaxBits)
    throw std::invalid_argument("estimate_p: b_probe " + std::to_string(b_probe) + " outside [2, 16]");
  const Features base = forward_batch(model, dataset);
  std::vector<PProbe> out;
  for (std::size_t layer : model.weighted_layers()) {
    PProbe p;
    p.layer = layer;
    p.b_probe = b_probe;
    p.mean_rz = feature_delta(base, quantize_layer(model, layer, b_probe), dataset);
    p.p = p.mean_rz / std::exp(-kAlpha * b_probe);
    p.degenerate = !(p.mean_rz > 0.0);
    out.push_back(p);
  }
  return out;
}

std::vector<LayerProfile> assemble_profiles(const TReport& t, std::span<const PProbe> p) {
  if (t.layers.size() != p.size())
    throw std::invalid_argument("assemble_profiles: " + std::to_string(t.layers.size()) +
                                " t values vs " + std::to_string(p.size()) + " p values");
  std::vector<LayerProfile> out;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (t.layers[k].layer != p[k].layer)
      throw std::invalid_argument("assemble_profiles: layer order mismatch at " + std::to_string(k));
    LayerProfile prof;
    prof.layer = p[k].layer;
    prof.params = t.layers[k].params;
    prof.t = t.layers[k].t;
    prof.p = p[k].p;
    prof.delta_acc = t.delta_acc;
    prof.b_probe = p[k].b_probe;
    prof.k = t.layers[k].k;
    prof.degenerate = p[k].degenerate;
    out.push_back(prof);
  }
  return out;
}

Measurement measurement(std::span<const double> t, std::span<const double> noise_powers) {
  if (t.size() != noise_powers.size()) throw std::invalid_argument("measurement: length mismatch");
  Measurement m;
  m.m.reserve(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] > 0.0)) throw std::invalid_argument("measurement: t must be positive");
    m.m.push_back(noise_powers[i] / t[i]);
  }
  for (double v : m.m) m.m_all += v;
  return m;
}

Measurement measurement(std::span<const LayerProfile> profiles, std::span<const double> noise_powers) {
  std::vector<double> t;
  for (const auto& p : profiles) t.push_back(p.t);
  return measurement(t, noise_powers);
}

std::vector<double> geometric_ladder(double smallest, double ratio, std::size_t count) {
  if (!(smallest > 0.0) || !(ratio > 1.0)) throw std::invalid_argument("geometric_ladder: bad parameters");
  std::vector<double> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(smallest * std::pow(ratio, static_cast<double>(k)));
  return out;
}

std::vector<double> default_scale_ladder(const Model& model, std::size_t layer) {
  const auto& w = model.layer(layer).weights.data;
  double ss = 0.0;
  for (float v : w) ss += static_cast<double>(v) * v;
  const double rms = w.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(w.size()));
  return geometric_ladder(rms > 0.0 ? 1e-3 * rms : 1e-6, std::sqrt(10.0), 7);
}

std::vector<LinearityPoint> linearity_probe(const Model& model, const Dataset& dataset,
                                            std::size_t layer, std::span<const double> scales,
                                            std::uint64_t seed) {
  const Tensor dir = noise_direction(model, layer, seed);
  const Features base = forward_batch(model, dataset);
  const auto& w = model.layer(layer).weights.data;
  std::vector<LinearityPoint> out;
  for (double k : scales) {
    const Model perturbed = perturb_layer(model, layer, scaled(dir, k), nullptr);
    // Effective weight noise after float rounding of W + r.
    const auto& wq = perturbed.layer(layer).weights.data;
    double wn = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double r = static_cast<double>(wq[j]) - static_cast<double>(w[j]);
      wn += r * r;
    }
    out.push_back({k, wn, feature_delta(base, perturbed, dataset)});
  }
  return out;
}

LineFit loglog_fit(std::span<const LinearityPoint> points, std::size_t count) {
  count = std::min(count, points.size());
  if (count < 2) throw std::invalid_argument("loglog_fit: need at least 2 points");
  std::vector<double> x, y;
  for (std::size_t k = 0; k < count; ++k) {
    if (!(points[k].weight_noise_sq > 0.0) || !(points[k].feature_noise_sq > 0.0))
      throw std::invalid_argument("loglog_fit: nonpositive norm");
    x.push_back(std::log(points[k].weight_noise_sq));
    y.push_back(std::log(points[k].feature_noise_sq));
  }
  const double n = static_cast<double>(count);
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

double AdditivityReport::relative_gap() const {
  return joint > 0.0 ? std::abs(sum_of_singles - joint) / joint : (sum_of_singles == 0.0 ? 0.0 : INFINITY);
}

AdditivityReport additivity_probe(const Model& model, const Dataset& dataset, std::span<const int> bits) {
  const auto weighted = model.weighted_layers();
  if (bits.size() != weighted.size())
    throw std::invalid_argument("additivity_probe: allocation length mismatch");
  const Features base = forward_batch(model, dataset);
  AdditivityReport r;
  for (std::size_t k = 0; k < weighted.size(); ++k) {
    r.singles.push_back(feature_delta(base, quantize_layer(model, weighted[k], bits[k]), dataset));
    r.sum_of_singles += r.singles.back();
  }
  r.joint = feature_delta(base, quantize_model(model, bits), dataset);
  return r;
}

double lemma_gamma(double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("gamma: delta must be positive");
  return 5.0 + 4.0 * std::log(1.0 / delta);
}

double theta(double delta_acc, double acc_baseline, std::size_t d) {
  if (d < 2) throw std::invalid_argument("theta: d must be >= 2");
  if (!(delta_acc > 0.0) || !(delta_acc < 2.0 * acc_baseline))
    throw std::invalid_argument("theta: need 0 < delta_acc < 2 acc_baseline");
  const double dd = static_cast<double>(d);
  return dd / (lemma_gamma(delta_acc / (2.0 * acc_baseline)) * std::log(dd));
}

namespace {

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

LemmaReport lemma_check(std::size_t d, double delta, std::size_t trials, std::uint64_t seed) {
  if (d < 2) throw std::invalid_argument("lemma_check: d must be >= 2");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("lemma_check: need 0 < delta < 1");
  if (trials == 0) throw std::invalid_argument("lemma_check: need at least one trial");
  LemmaReport r;
  r.d = d;
  r.delta = delta;
  r.trials = trials;
  r.gamma = lemma_gamma(delta);
  r.bound = 2.0 * delta;
  const double dd = static_cast<double>(d);
  const double noise_scale = dd / (std::log(dd) * r.gamma);

  Rng rng(seed);
  std::vector<double> z(d), g(d);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    for (auto& v : z) v = rng.normal();
    double first = -INFINITY, second = -INFINITY;
    for (double v : z) {
      if (v > first) {
        second = first;
        first = v;
      } else if (v > second) {
        second = v;
      }
    }
    const double r_star_sq = (first - second) * (first - second) / 2.0;
    const double norm_sq = noise_scale * r_star_sq;
    double gn = 0.0;
    for (auto& v : g) {
      v = rng.normal();
      gn += v * v;
    }
    const double s = std::sqrt(norm_sq / gn);
    const auto before = argmax(z);
    for (std::size_t i = 0; i < d; ++i) z[i] += s * g[i];
    if (argmax(z) != before) ++r.flips;
  }
  r.rate = static_cast<double>(r.flips) / static_cast<double>(trials);
  r.within_bound = r.rate <= r.bound;
  return r;
}

RankDiagnostic noise_rank(const Model& model, const Dataset& dataset, std::size_t layer, int bits) {
  const Features base = forward_batch(model, dataset);
  const Features noisy = forward_batch(quantize_layer(model, layer, bits), dataset);
  const auto d = static_cast<Eigen::Index>(model.d());
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd r(d);
  for (std::size_t n = 0; n < base.size(); ++n) {
    for (Eigen::Index j = 0; j < d; ++j)
      r(j) = static_cast<double>(base[n][j]) - static_cast<double>(noisy[n][j]);
    gram.noalias() += r * r.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
  RankDiagnostic out;
  out.layer = layer;
  const double top = ev.maxCoeff();
  const double total = ev.sum();
  if (top <= 0.0) return out;
  for (Eigen::Index j = 0; j < d; ++j)
    if (ev(j) > 1e-9 * top) ++out.numerical_rank;
  double h = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double q = ev(j) / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  out.effective_rank = std::exp(h);
  return out;
}

}  // namespace qalloc
