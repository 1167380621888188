// qalloc: command-line driver for calibration, allocation and sweeps.
//
// Exit codes: 0 success, 1 precondition or input error, 2 verification failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "qalloc/allocator.hpp"
#include "qalloc/harness.hpp"
#include "qalloc/modelio.hpp"
#include "qalloc/nncore.hpp"
#include "qalloc/probes.hpp"
#include "qalloc/quantizer.hpp"
#include "qalloc/verify.hpp"

using namespace qalloc;

namespace {

constexpr int kExitPrecondition = 1;
constexpr int kExitVerification = 2;

struct Globals {
  std::string out_dir;
  unsigned threads = 0;
};

fs::path out_path(const Globals& g, const std::string& name) { return fs::path(g.out_dir) / name; }

void finish(const Globals& g, const std::string& command, const json& config, const std::vector<fs::path>& inputs,
            const std::vector<fs::path>& outputs) {
  json cfg = config;
  cfg["out"] = g.out_dir;
  cfg["threads"] = g.threads;
  write_json(out_path(g, "manifest.json"), make_manifest(command, cfg, inputs, outputs));
}

std::vector<fs::path> artifact_files(const std::string& path, const std::string& kind) {
  std::string stem = path;
  const std::string suffix = "." + kind + ".json";
  if (stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
  return {fs::path(stem + suffix), fs::path(stem + "." + kind + ".bin")};
}

std::vector<fs::path> model_files(const std::string& path) { return artifact_files(path, "model"); }

std::vector<fs::path> data_files(const std::string& path) { return artifact_files(path, "dataset"); }

std::vector<fs::path> concat(std::vector<fs::path> a, const std::vector<fs::path>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string tuple_text(const std::vector<double>& v) {
  std::string s = "(";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s + ")";
}

std::string tuple_text(const std::vector<int>& v) {
  std::string s = "(";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + ")";
}

std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(method_from_string(item));
  if (out.empty()) throw std::invalid_argument("no methods given");
  return out;
}

std::vector<bool> dense_mask(const Model& model) {
  std::vector<bool> mask;
  for (auto i : model.weighted_layers()) mask.push_back(model.layer(i).kind == LayerKind::dense);
  return mask;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive per-layer bit-width allocation for feed-forward networks"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  if (const char* env = std::getenv("QALLOC_OUT")) g.out_dir = env;
  if (g.out_dir.empty()) g.out_dir = ".";
  app.add_option("-o,--out", g.out_dir, "Output directory (default $QALLOC_OUT or .)");
  app.add_option("--threads", g.threads, "Worker threads for per-sample loops (0 = all cores)");

  std::function<int()> action;

  // gen-model
  auto* gen_model_cmd = app.add_subcommand("gen-model", "Generate the default fixture model");
  std::uint64_t fixture_seed = kDefaultFixtureSeed;
  std::string model_name = "fixture";
  gen_model_cmd->add_option("--seed", fixture_seed, "Weight initialization seed");
  gen_model_cmd->add_option("--name", model_name, "Output stem");
  gen_model_cmd->callback([&] {
    action = [&] {
      const auto spec = default_fixture_spec(fixture_seed);
      const Model m = gen_model(spec);
      const auto stem = out_path(g, model_name);
      save_model(m, stem);
      std::cout << "model: " << model_json_path(stem).string() << "\n";
      std::cout << "layer sizes:";
      for (auto s : m.layer_sizes()) std::cout << ' ' << s;
      std::cout << "\nd = " << m.d() << "\n";
      finish(g, "gen-model", {{"fixture", fixture_spec_to_json(spec)}, {"name", model_name}}, {},
             {model_json_path(stem), fs::path(stem.string() + ".model.bin")});
      return 0;
    };
  });

  // gen-data
  auto* gen_data_cmd = app.add_subcommand("gen-data", "Generate a teacher-labelled dataset");
  std::string model_path, data_path, data_name = "fixture";
  std::size_t n_samples = 2000;
  std::uint64_t data_seed = 7;
  gen_data_cmd->add_option("--model", model_path, "Model stem or .model.json")->required();
  gen_data_cmd->add_option("-n,--n", n_samples, "Number of samples");
  gen_data_cmd->add_option("--seed", data_seed, "Input sampling seed");
  gen_data_cmd->add_option("--name", data_name, "Output stem");
  gen_data_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = gen_dataset(m, n_samples, data_seed);
      const auto stem = out_path(g, data_name);
      save_dataset(ds, stem);
      std::vector<std::size_t> counts(m.d(), 0);
      for (auto l : ds.labels) counts[l]++;
      std::cout << "dataset: " << dataset_json_path(stem).string() << " (" << ds.size() << " samples)\nlabel counts:";
      for (auto c : counts) std::cout << ' ' << c;
      std::cout << "\n";
      finish(g, "gen-data", {{"model", model_path}, {"n", n_samples}, {"seed", data_seed}},
             model_files(model_path),
             {dataset_json_path(stem), fs::path(stem.string() + ".dataset.bin")});
      return 0;
    };
  });

  auto add_model_data = [&](CLI::App* cmd) {
    cmd->add_option("--model", model_path, "Model stem or .model.json")->required();
    cmd->add_option("--data", data_path, "Dataset stem or .dataset.json")->required();
  };

  // margins
  auto* margins_cmd = app.add_subcommand("margins", "Mean adversarial-noise norm and margin histogram");
  std::size_t bins = 50;
  add_model_data(margins_cmd);
  margins_cmd->add_option("--bins", bins, "Histogram bins");
  margins_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      const auto stats = margin_stats(m, ds, bins);
      const auto out = out_path(g, "margins.json");
      write_json(out, margins_to_json(stats, true));
      std::cout << "mean ||r*||^2 = " << format_double(stats.mean_r_star) << "\n";
      finish(g, "margins", {{"model", model_path}, {"data", data_path}, {"bins", bins}},
             concat(model_files(model_path), data_files(data_path)), {out});
      return 0;
    };
  });

  // estimate-t / pipeline share probe options
  ProbeConfig probe;
  int b_probe = kDefaultProbeBits;
  auto add_probe_options = [&](CLI::App* cmd) {
    cmd->add_option("--delta-acc", probe.delta_acc, "Target accuracy drop (fraction; default half of baseline)");
    cmd->add_option("--seed", probe.seed, "Noise direction seed");
    cmd->add_option("--tolerance", probe.acc_tolerance, "Allowed |drop - target|");
    cmd->add_option("--max-iters", probe.max_iters, "Binary search iteration cap");
    cmd->add_option("--k-min", probe.k_min, "Lower noise scale bound");
    cmd->add_option("--k-max", probe.k_max, "Upper noise scale bound");
    cmd->add_option("--last-n", probe.last_n, "Probe only the last N weighted layers (0 = all)");
  };
  auto probe_json = [&] {
    return json{{"delta_acc", probe.delta_acc}, {"seed", probe.seed},       {"tolerance", probe.acc_tolerance},
                {"max_iters", probe.max_iters}, {"k_min", probe.k_min},     {"k_max", probe.k_max},
                {"last_n", probe.last_n}};
  };

  auto* t_cmd = app.add_subcommand("estimate-t", "Robustness parameter t_i per weighted layer");
  add_model_data(t_cmd);
  add_probe_options(t_cmd);
  t_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      const auto out = out_path(g, "t_report.json");
      try {
        const auto rep = estimate_t(m, ds, probe);
        write_json(out, t_report_to_json(rep));
        std::cout << "baseline accuracy " << format_double(rep.baseline_accuracy) << ", target drop "
                  << format_double(rep.delta_acc) << ", mean ||r*||^2 " << format_double(rep.mean_r_star) << "\n";
        for (const auto& l : rep.layers)
          std::cout << "layer " << l.layer << ": t = " << format_double(l.t) << " (k " << format_double(l.k)
                    << ", drop " << format_double(l.accuracy_drop) << (l.converged ? "" : ", NOT CONVERGED")
                    << (l.probed ? "" : ", copied") << ")\n";
      } catch (const ProbeError& e) {
        json partial = t_report_to_json(e.partial());
        partial["error"] = e.what();
        partial["failed_layer"] = e.layer();
        write_json(out, partial);
        throw;
      }
      finish(g, "estimate-t", {{"model", model_path}, {"data", data_path}, {"probe", probe_json()}},
             concat(model_files(model_path), data_files(data_path)), {out});
      return 0;
    };
  });

  auto* p_cmd = app.add_subcommand("estimate-p", "Noise-power coefficient p_i per weighted layer");
  add_model_data(p_cmd);
  p_cmd->add_option("--b-probe", b_probe, "Probe bit-width");
  p_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      const auto probes = estimate_p(m, ds, b_probe);
      const auto out = out_path(g, "p_report.json");
      write_json(out, p_report_to_json(probes));
      for (const auto& p : probes)
        std::cout << "layer " << p.layer << ": p = " << format_double(p.p)
                  << (p.degenerate ? " (degenerate, excluded)" : "") << "\n";
      finish(g, "estimate-p", {{"model", model_path}, {"data", data_path}, {"b_probe", b_probe}},
             concat(model_files(model_path), data_files(data_path)), {out});
      return 0;
    };
  });

  auto* pipe_cmd = app.add_subcommand("pipeline", "Margins, t_i and p_i assembled into profiles.json");
  add_model_data(pipe_cmd);
  add_probe_options(pipe_cmd);
  pipe_cmd->add_option("--b-probe", b_probe, "Probe bit-width for p_i");
  pipe_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      PipelineConfig pc{probe, b_probe};
      const auto res = run_pipeline(m, ds, pc);
      const auto out = out_path(g, "profiles.json");
      write_json(out, profiles_to_json(res));
      for (const auto& p : res.profiles)
        std::cout << "layer " << p.layer << ": s = " << p.params << ", t = " << format_double(p.t)
                  << ", p = " << format_double(p.p) << "\n";
      finish(g, "pipeline",
             {{"model", model_path}, {"data", data_path}, {"probe", probe_json()}, {"b_probe", b_probe}},
             concat(model_files(model_path), data_files(data_path)), {out});
      return 0;
    };
  });

  // allocate
  auto* alloc_cmd = app.add_subcommand("allocate", "Bit-widths from calibrated profiles");
  std::string profiles_path, method_name = "adaptive";
  double b1 = 8.0;
  int fc_bits = 0;
  alloc_cmd->add_option("--profiles", profiles_path, "profiles.json")->required();
  alloc_cmd->add_option("--method", method_name, "adaptive | sqnr | equal")
      ->check(CLI::IsMember({"adaptive", "sqnr", "equal"}));
  alloc_cmd->add_option("--b1", b1, "Anchor bit-width of the first weighted layer");
  alloc_cmd->add_option("--fc-bits", fc_bits, "Pin dense layers to this bit-width (needs --model)");
  alloc_cmd->add_option("--model", model_path, "Model, used to locate dense layers for --fc-bits");
  alloc_cmd->callback([&] {
    action = [&] {
      const auto profiles = profiles_from_json(read_json(profiles_path));
      std::vector<std::size_t> sizes;
      for (const auto& p : profiles) sizes.push_back(p.params);
      const Method method = method_from_string(method_name);
      BitAllocation a = method == Method::adaptive ? allocate_adaptive(profiles, b1)
                        : method == Method::sqnr   ? allocate_sqnr(sizes, b1)
                                                   : allocate_equal(static_cast<int>(std::lround(b1)), sizes);
      if (fc_bits != 0) {
        if (model_path.empty()) throw std::invalid_argument("--fc-bits requires --model");
        pin_layers(a, dense_mask(load_model(model_path)), fc_bits);
      }
      const auto out = out_path(g, "allocation.json");
      write_json(out, allocation_to_json(a));
      std::cout << "b = " << tuple_text(a.b_real) << "\n";
      std::cout << "b_int = " << tuple_text(a.b_int) << "\n";
      std::cout << "size_bits = " << a.size_bits << "\n";
      for (std::size_t i = 0; i < a.saturated.size(); ++i)
        if (a.saturated[i]) std::cerr << "warning: layer " << i << " saturated at the bit-width bounds\n";
      finish(g, "allocate", {{"profiles", profiles_path}, {"method", method_name}, {"b1", b1}, {"fc_bits", fc_bits}},
             {profiles_path}, {out});
      return 0;
    };
  });

  // quantize
  auto* quant_cmd = app.add_subcommand("quantize", "Quantize a model with an allocation");
  std::string allocation_path, quant_name = "quantized";
  quant_cmd->add_option("--model", model_path, "Model stem or .model.json")->required();
  quant_cmd->add_option("--allocation", allocation_path, "allocation.json")->required();
  quant_cmd->add_option("--name", quant_name, "Output stem");
  quant_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const auto a = allocation_from_json(read_json(allocation_path));
      const Model q = quantize_model(m, a);
      const auto stem = out_path(g, quant_name);
      save_model(q, stem);
      std::cout << "quantized model: " << model_json_path(stem).string() << " (" << a.size_bits << " bits)\n";
      finish(g, "quantize", {{"model", model_path}, {"allocation", allocation_path}},
             concat(model_files(model_path), {allocation_path}),
             {model_json_path(stem), fs::path(stem.string() + ".model.bin")});
      return 0;
    };
  });

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Top-1 accuracy of a model on a dataset");
  add_model_data(eval_cmd);
  eval_cmd->callback([&] {
    action = [&] {
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      const double acc = evaluate_accuracy(m, ds);
      const auto out = out_path(g, "evaluation.json");
      write_json(out, {{"top1", acc}, {"samples", ds.size()}});
      std::cout << "top1 = " << format_double(acc) << "\n";
      finish(g, "evaluate", {{"model", model_path}, {"data", data_path}},
             concat(model_files(model_path), data_files(data_path)), {out});
      return 0;
    };
  });

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Size-vs-accuracy curves over anchor bit-widths");
  double b1_min = 4.0, b1_max = 12.0, b1_step = 0.5;
  std::string methods_text = "adaptive,sqnr,equal";
  std::size_t max_variants = 16;
  add_model_data(sweep_cmd);
  sweep_cmd->add_option("--profiles", profiles_path, "profiles.json")->required();
  sweep_cmd->add_option("--b1-min", b1_min, "Smallest anchor");
  sweep_cmd->add_option("--b1-max", b1_max, "Largest anchor");
  sweep_cmd->add_option("--b1-step", b1_step, "Anchor step");
  sweep_cmd->add_option("--methods", methods_text, "Comma-separated methods");
  sweep_cmd->add_option("--max-variants", max_variants, "Rounded variants per adaptive anchor");
  sweep_cmd->add_option("--fc-bits", fc_bits, "Pin dense layers to this bit-width");
  sweep_cmd->callback([&] {
    action = [&] {
      if (!(b1_step > 0.0) || b1_max < b1_min) throw std::invalid_argument("invalid anchor grid");
      const Model m = load_model(model_path);
      const Dataset ds = load_dataset(data_path);
      const auto profiles = profiles_from_json(read_json(profiles_path));
      SweepConfig sc;
      for (long k = 0;; ++k) {
        const double b = b1_min + static_cast<double>(k) * b1_step;
        if (b > b1_max + 1e-9) break;
        sc.b1_values.push_back(b);
      }
      sc.methods = parse_methods(methods_text);
      sc.max_variants = max_variants;
      if (fc_bits != 0) sc.fc_bits = fc_bits;
      const auto curves = sweep(m, ds, profiles, sc);
      const auto out = out_path(g, "curve.csv");
      write_text(out, curves_to_csv(curves));
      for (const auto& c : curves) std::cout << to_string(c.method) << ": " << c.points.size() << " points\n";
      std::cout << "curve: " << out.string() << "\n";
      finish(g, "sweep",
             {{"model", model_path},
              {"data", data_path},
              {"profiles", profiles_path},
              {"b1_values", sc.b1_values},
              {"methods", methods_text},
              {"max_variants", max_variants},
              {"fc_bits", fc_bits},
              {"note", "every enumerated rounding variant is plotted for the adaptive method"}},
             concat(concat(model_files(model_path), data_files(data_path)), {profiles_path}), {out});
      return 0;
    };
  });

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "Matched-accuracy size ratios between curves");
  std::string curve_path;
  cmp_cmd->add_option("--curve", curve_path, "curve.csv")->required();
  cmp_cmd->callback([&] {
    action = [&] {
      const auto curves = curves_from_csv(read_text(curve_path));
      const auto report = compare(curves);
      const auto out = out_path(g, "comparison.json");
      write_json(out, comparison_to_json(report));
      for (const auto& c : report.comparisons) {
        std::cout << to_string(c.a) << " vs " << to_string(c.b) << ": ";
        if (c.empty)
          std::cout << "no common accuracy range\n";
        else
          std::cout << c.points.size() << " matched points, dominance " << format_double(c.dominance_fraction)
                    << ", mean size ratio " << format_double(c.mean_ratio) << "\n";
      }
      finish(g, "compare", {{"curve", curve_path}}, {curve_path}, {out});
      return 0;
    };
  });

  // lemma-check
  auto* lemma_cmd = app.add_subcommand("lemma-check", "Monte Carlo check of the random-noise flip bound");
  std::size_t lemma_d = 10, trials = 10000;
  double delta = 0.1;
  std::uint64_t lemma_seed = 1;
  lemma_cmd->add_option("--d", lemma_d, "Class count");
  lemma_cmd->add_option("--delta", delta, "Failure probability parameter in (0, 1)");
  lemma_cmd->add_option("--trials", trials, "Monte Carlo trials (>= 1000)");
  lemma_cmd->add_option("--seed", lemma_seed, "Sampling seed");
  lemma_cmd->callback([&] {
    action = [&] {
      if (trials < 1000) throw std::invalid_argument("lemma-check needs at least 1000 trials");
      const auto r = lemma_check(lemma_d, delta, trials, lemma_seed);
      const auto out = out_path(g, "lemma.json");
      write_json(out, {{"d", r.d}, {"delta", r.delta}, {"trials", r.trials}, {"flips", r.flips},
                       {"gamma", r.gamma}, {"rate", r.rate}, {"bound", r.bound}, {"within_bound", r.within_bound}});
      std::cout << "gamma = " << format_double(r.gamma) << ", flip rate " << format_double(r.rate) << " (bound "
                << format_double(r.bound) << ") " << (r.within_bound ? "OK" : "VIOLATED") << "\n";
      finish(g, "lemma-check", {{"d", lemma_d}, {"delta", delta}, {"trials", trials}, {"seed", lemma_seed}}, {}, {out});
      return r.within_bound ? 0 : kExitVerification;
    };
  });

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "Run every acceptance check");
  VerifyConfig vc;
  std::vector<int> only;
  bool diagnostics = false;
  verify_cmd->add_option("--model", model_path, "Model to verify instead of the generated fixture");
  verify_cmd->add_option("--data", data_path, "Dataset to verify instead of a generated one");
  verify_cmd->add_option("-n,--n", vc.dataset_size, "Generated dataset size");
  verify_cmd->add_option("--fixture-seed", vc.fixture_seed, "Fixture weight seed");
  verify_cmd->add_option("--data-seed", vc.data_seed, "Dataset seed");
  verify_cmd->add_option("--seed", vc.probe_seed, "Probe seed");
  verify_cmd->add_option("--corrupt-t", vc.corrupt_t, "Fault injection: scale the last layer's t");
  verify_cmd->add_option("--only", only, "Run only these criterion ids");
  verify_cmd->add_flag("--diagnostics", diagnostics, "Also print unasserted diagnostics");
  verify_cmd->callback([&] {
    action = [&] {
      if (!model_path.empty()) vc.model = load_model(model_path);
      if (!data_path.empty()) vc.dataset = load_dataset(data_path);
      vc.only = only;
      vc.work_dir = out_path(g, "verify");
      VerifyContext ctx(vc);
      json results = json::array();
      bool all = true;
      run_verification(ctx, [&](const CheckResult& r) {
        std::cout << format_check_line(r) << std::endl;
        all &= r.passed;
        results.push_back({{"id", r.id}, {"name", r.name}, {"passed", r.passed}, {"detail", r.detail},
                           {"seconds", r.seconds}, {"limit_seconds", r.limit_seconds}});
      });
      if (diagnostics)
        for (const auto& line : verification_diagnostics(ctx)) std::cout << "  diag: " << line << "\n";
      const auto out = out_path(g, "verify.json");
      write_json(out, {{"passed", all}, {"checks", results}});
      finish(g, "verify",
             {{"n", vc.dataset_size}, {"fixture_seed", vc.fixture_seed}, {"data_seed", vc.data_seed},
              {"seed", vc.probe_seed}, {"corrupt_t", vc.corrupt_t}, {"only", only}},
             {}, {out});
      std::cout << (all ? "all checks passed" : "verification FAILED") << "\n";
      return all ? 0 : kExitVerification;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitPrecondition;
  }

  try {
    set_max_threads(g.threads);
    fs::create_directories(g.out_dir);
    return action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPrecondition;
  }
}
