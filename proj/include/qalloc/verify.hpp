#pragma once

// Acceptance checks shared by `qalloc verify` and the acceptance test binary.
// Every tolerance below is fixed; none is calibrated from measured data.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qalloc/harness.hpp"
#include "qalloc/modelio.hpp"

namespace qalloc {

struct VerifyConfig {
  std::uint64_t fixture_seed = kDefaultFixtureSeed;
  std::uint64_t data_seed = 7;
  std::uint64_t probe_seed = 0x5EED;
  std::size_t dataset_size = 2000;
  /// Fault injection: multiply the last weighted layer's t by this factor
  /// before allocating (1 = no corruption).
  double corrupt_t = 1.0;
  /// Scratch directory for round-trip artifacts; empty uses a temp dir.
  std::filesystem::path work_dir;
  /// Model and data to verify instead of the generated fixture.
  std::optional<Model> model;
  std::optional<Dataset> dataset;
  /// Criterion ids to run (empty = all).
  std::vector<int> only;
};

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  double limit_seconds = 0.0;
};

/// Lazily built fixture, dataset and calibration shared across checks.
class VerifyContext {
 public:
  explicit VerifyContext(VerifyConfig config);

  const VerifyConfig& config() const { return config_; }
  const Model& model();
  const Dataset& dataset();
  /// Calibration at the default target drop (half the baseline accuracy).
  const PipelineResult& pipeline();
  std::filesystem::path work_dir();

 private:
  VerifyConfig config_;
  std::optional<Model> model_;
  std::optional<Dataset> dataset_;
  std::optional<PipelineResult> pipeline_;
  std::filesystem::path work_dir_;
};

CheckResult check_quantizer_law(VerifyContext& ctx);
CheckResult check_linearity(VerifyContext& ctx);
CheckResult check_additivity(VerifyContext& ctx);
CheckResult check_kkt_stationarity(VerifyContext& ctx);
CheckResult check_allocator_optimality(VerifyContext& ctx);
CheckResult check_sqnr_special_case(VerifyContext& ctx);
CheckResult check_flip_bound(VerifyContext& ctx);
CheckResult check_t_ratio_stability(VerifyContext& ctx);
CheckResult check_dominance(VerifyContext& ctx);
CheckResult check_roundtrip(VerifyContext& ctx);

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  /// Needs the shared fixture calibration, which is built once outside the
  /// timed region.
  bool uses_calibration;
  std::function<CheckResult(VerifyContext&)> run;
};

const std::vector<Criterion>& acceptance_criteria();

/// Runs the selected criteria; a check that throws is recorded as failed
/// and the run continues. `on_result` is called after each check.
std::vector<CheckResult> run_verification(VerifyContext& ctx,
                                          const std::function<void(const CheckResult&)>& on_result = {});

/// Model-dependent diagnostics that are reported but never asserted.
std::vector<std::string> verification_diagnostics(VerifyContext& ctx);

std::string format_check_line(const CheckResult& r);

}  // namespace qalloc
