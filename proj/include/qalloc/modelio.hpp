#pragma once

// Fixture generation and on-disk formats.
//
//   <stem>.model.json   + <stem>.model.bin     model manifest + tensor sidecar
//   <stem>.dataset.json + <stem>.dataset.bin   labels + input sidecar
//   profiles.json, allocation.json, curve.csv, comparison.json, manifest.json
//
// Sidecars hold little-endian IEEE-754 binary32 values; manifests record
// byte offsets and element counts for every tensor.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qalloc/allocator.hpp"
#include "qalloc/harness.hpp"
#include "qalloc/nncore.hpp"
#include "qalloc/probes.hpp"

namespace qalloc {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;   // dense outputs or conv filters
  std::size_t kernel = 3;  // conv kernel edge
  std::size_t stride = 1;
  Padding padding = Padding::same;
  std::size_t pool = 2;

  static LayerDesc dense(std::size_t units) { return {LayerKind::dense, units}; }
  static LayerDesc conv(std::size_t filters, std::size_t kernel, Padding padding = Padding::same) {
    return {LayerKind::conv2d, filters, kernel, 1, padding};
  }
  static LayerDesc relu() { return {}; }
  static LayerDesc maxpool(std::size_t pool) { return {LayerKind::maxpool2d, 0, 0, pool, Padding::valid, pool}; }
};

struct FixtureSpec {
  Shape input_shape;
  std::vector<LayerDesc> layers;
  std::uint64_t seed = 0;
  /// Weights ~ U(-r, r); unset means r = 1 / sqrt(fan_in).
  std::optional<double> init_range;
  /// Biases cancel the mean pre-activation of each output channel over this
  /// many standard-normal inputs. 0 draws biases ~ U(-r, r) instead.
  std::size_t calibration_samples = 256;
};

inline constexpr std::uint64_t kDefaultFixtureSeed = 20180402;

/// conv(3x3x4x8, same) -> relu -> maxpool(2) -> conv(3x3x8x8, same) -> relu
/// -> dense(64) -> relu -> dense(10) on 16x16x4 inputs.
FixtureSpec default_fixture_spec(std::uint64_t seed = kDefaultFixtureSeed);

Model gen_model(const FixtureSpec& spec);

/// n standard-normal inputs labelled by the model's own argmax.
Dataset gen_dataset(const Model& model, std::size_t n, std::uint64_t seed);

json fixture_spec_to_json(const FixtureSpec& spec);

// Artifact paths derived from a stem ("out/fixture" -> "out/fixture.model.json").
fs::path model_json_path(const fs::path& stem);
fs::path dataset_json_path(const fs::path& stem);

void save_model(const Model& model, const fs::path& stem);
/// Accepts either the stem or the .model.json path.
Model load_model(const fs::path& path);

void save_dataset(const Dataset& dataset, const fs::path& stem);
Dataset load_dataset(const fs::path& path);

json profiles_to_json(const PipelineResult& result);
json profiles_to_json(std::span<const LayerProfile> profiles);
std::vector<LayerProfile> profiles_from_json(const json& j);

json t_report_to_json(const TReport& report);
json p_report_to_json(std::span<const PProbe> probes);
json margins_to_json(const MarginStats& stats, bool include_samples = false);

json allocation_to_json(const BitAllocation& a);
BitAllocation allocation_from_json(const json& j);

json comparison_to_json(const ComparisonReport& report);

std::string curves_to_csv(std::span<const Curve> curves);
std::vector<Curve> curves_from_csv(const std::string& text);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);
void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

/// Run manifest: resolved config plus SHA-256 of every listed file.
json make_manifest(const std::string& command, const json& config,
                   const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs);

}  // namespace qalloc
