#include "qalloc/modelio.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qalloc/rng.hpp"

namespace qalloc {

FixtureSpec default_fixture_spec(std::uint64_t seed) {
  FixtureSpec s;
  s.input_shape = {16, 16, 4};
  s.layers = {LayerDesc::conv(8, 3), LayerDesc::relu(),     LayerDesc::maxpool(2),
              LayerDesc::conv(8, 3), LayerDesc::relu(),     LayerDesc::dense(64),
              LayerDesc::relu(),     LayerDesc::dense(10)};
  s.seed = seed;
  return s;
}

Model gen_model(const FixtureSpec& spec) {
  Rng rng(spec.seed);
  std::vector<Tensor> calibration(spec.calibration_samples, Tensor(spec.input_shape));
  Rng cal_rng(derive_seed(spec.seed, 1));
  for (auto& x : calibration)
    for (auto& v : x.data) v = static_cast<float>(cal_rng.normal());
  std::vector<Layer> layers;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& desc = spec.layers[i];
    Layer l;
    switch (desc.kind) {
      case LayerKind::relu: l = Layer::relu(); break;
      case LayerKind::maxpool2d: l = Layer::maxpool2d(desc.pool, desc.stride); break;
      case LayerKind::dense:
      case LayerKind::conv2d: {
        if (desc.units == 0) throw ShapeError("layer " + std::to_string(i) + ": zero units");
        Shape wshape;
        std::size_t fan_in = 0;
        if (desc.kind == LayerKind::dense) {
          fan_in = shape_size(cur);
          wshape = {desc.units, fan_in};
        } else {
          if (cur.size() != 3)
            throw ShapeError("layer " + std::to_string(i) + " (conv2d): input must be (H, W, C), got " +
                             shape_to_string(cur));
          fan_in = desc.kernel * desc.kernel * cur[2];
          wshape = {desc.kernel, desc.kernel, cur[2], desc.units};
        }
        const double r = spec.init_range.value_or(1.0 / std::sqrt(static_cast<double>(fan_in)));
        Tensor w(wshape), b(Shape{desc.units});
        for (auto& v : w.data) v = static_cast<float>(rng.uniform(-r, r));
        if (spec.calibration_samples == 0)
          for (auto& v : b.data) v = static_cast<float>(rng.uniform(-r, r));
        l = desc.kind == LayerKind::dense ? Layer::dense(std::move(w), std::move(b))
                                          : Layer::conv2d(std::move(w), std::move(b), desc.stride, desc.padding);
        if (spec.calibration_samples > 0) {
          // bias = -mean pre-activation per output channel over the calibration batch
          std::vector<double> sum(desc.units, 0.0);
          std::size_t count = 0;
          for (const auto& x : calibration) {
            const auto y = apply_layer(l, x, i);
            for (std::size_t j = 0; j < y.data.size(); ++j) sum[j % desc.units] += y.data[j];
            count += y.data.size() / desc.units;
          }
          for (std::size_t c = 0; c < desc.units; ++c)
            l.bias.data[c] = static_cast<float>(-sum[c] / static_cast<double>(count));
        }
        break;
      }
    }
    cur = layer_output_shape(l, cur, i);
    for (auto& x : calibration) x = apply_layer(l, x, i);
    layers.push_back(std::move(l));
  }
  return Model(spec.input_shape, std::move(layers));
}

Dataset gen_dataset(const Model& model, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("gen_dataset: n must be >= 1");
  Rng rng(seed);
  Dataset ds;
  ds.inputs.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Tensor x(model.input_shape());
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    ds.inputs.push_back(std::move(x));
  }
  ds.labels.resize(n);
  parallel_for(n, [&](std::size_t k) { ds.labels[k] = classify(forward(model, ds.inputs[k].data)); });
  return ds;
}

json fixture_spec_to_json(const FixtureSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers)
    layers.push_back({{"kind", to_string(l.kind)},
                      {"units", l.units},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"padding", to_string(l.padding)},
                      {"pool", l.pool}});
  json j = {{"input_shape", spec.input_shape},
            {"layers", layers},
            {"seed", spec.seed},
            {"calibration_samples", spec.calibration_samples}};
  if (spec.init_range)
    j["init_range"] = *spec.init_range;
  else
    j["init_range"] = "1/sqrt(fan_in)";
  return j;
}

// ---------------------------------------------------------------------------
// Sidecar encoding

namespace {

void append_le(std::string& out, std::span<const float> values) {
  const auto start = out.size();
  out.resize(start + values.size() * 4);
  char* p = out.data() + start;
  for (float v : values) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    p[0] = static_cast<char>(u & 0xFF);
    p[1] = static_cast<char>((u >> 8) & 0xFF);
    p[2] = static_cast<char>((u >> 16) & 0xFF);
    p[3] = static_cast<char>((u >> 24) & 0xFF);
    p += 4;
  }
}

std::vector<float> read_le(const std::string& bytes, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
  for (std::size_t k = 0; k < count; ++k, p += 4) {
    const std::uint32_t u = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                            (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
    out[k] = std::bit_cast<float>(u);
  }
  return out;
}

fs::path with_suffix(const fs::path& stem, const std::string& suffix) {
  return fs::path(stem.string() + suffix);
}

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

fs::path resolve_stem(const fs::path& path, const std::string& json_suffix) {
  const auto s = path.string();
  if (ends_with(s, json_suffix)) return fs::path(s.substr(0, s.size() - json_suffix.size()));
  return path;
}

void check_version(const json& j, const std::string& kind, const fs::path& path) {
  if (!j.contains("format_version"))
    throw FormatError(path.string() + ": missing format_version");
  const int v = j.at("format_version").get<int>();
  if (v != kFormatVersion)
    throw FormatError(path.string() + ": unsupported format_version " + std::to_string(v) +
                      " (expected " + std::to_string(kFormatVersion) + ")");
  if (j.value("kind", std::string()) != kind)
    throw FormatError(path.string() + ": expected kind '" + kind + "'");
}

struct TensorRef {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes
  std::size_t count = 0;
};

json tensor_ref(const std::string& name, const Tensor& t, std::size_t& offset) {
  json j = {{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.size()}};
  offset += t.size() * 4;
  return j;
}

}  // namespace

fs::path model_json_path(const fs::path& stem) { return with_suffix(stem, ".model.json"); }
fs::path dataset_json_path(const fs::path& stem) { return with_suffix(stem, ".dataset.json"); }

void save_model(const Model& model, const fs::path& stem) {
  std::string blob;
  std::size_t offset = 0;
  json layers = json::array();
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.layer(i);
    json jl = {{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::conv2d) {
      jl["stride"] = l.stride;
      jl["padding"] = to_string(l.padding);
    }
    if (l.kind == LayerKind::maxpool2d) {
      jl["pool_size"] = l.pool_size;
      jl["stride"] = l.stride;
    }
    if (l.has_weights()) {
      const std::string base = "layers[" + std::to_string(i) + "]";
      jl["weights"] = tensor_ref(base + ".weights", l.weights, offset);
      append_le(blob, l.weights.data);
      if (!l.bias.empty()) {
        jl["bias"] = tensor_ref(base + ".bias", l.bias, offset);
        append_le(blob, l.bias.data);
      }
    }
    layers.push_back(std::move(jl));
  }
  const auto bin = with_suffix(stem, ".model.bin");
  json j = {{"format_version", kFormatVersion},
            {"kind", "qalloc.model"},
            {"input_shape", model.input_shape()},
            {"d", model.d()},
            {"sidecar", bin.filename().string()},
            {"sidecar_bytes", blob.size()},
            {"layers", layers}};
  if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());
  write_text(bin, blob);
  write_json(model_json_path(stem), j);
}

Model load_model(const fs::path& path) {
  const auto stem = resolve_stem(path, ".model.json");
  const auto jpath = model_json_path(stem);
  const json j = read_json(jpath);
  check_version(j, "qalloc.model", jpath);
  const auto bin = jpath.parent_path() / j.at("sidecar").get<std::string>();
  const std::string blob = read_text(bin);
  const auto declared = j.at("sidecar_bytes").get<std::size_t>();
  if (blob.size() != declared)
    throw FormatError(bin.string() + ": sidecar is " + std::to_string(blob.size()) + " bytes, manifest declares " +
                      std::to_string(declared));

  std::vector<TensorRef> refs;
  auto read_ref = [&](const json& jt, const std::string& fallback) {
    TensorRef r;
    r.name = jt.value("name", fallback);
    r.shape = jt.at("shape").get<Shape>();
    r.offset = jt.at("offset").get<std::size_t>();
    r.count = jt.at("count").get<std::size_t>();
    if (shape_size(r.shape) != r.count)
      throw FormatError(jpath.string() + ": tensor " + r.name + " count does not match its shape");
    if (r.offset % 4 != 0 || r.offset > blob.size() || r.count > (blob.size() - r.offset) / 4)
      throw FormatError(jpath.string() + ": tensor " + r.name + " offset " + std::to_string(r.offset) +
                        " out of bounds");
    refs.push_back(r);
    return Tensor(r.shape, read_le(blob, r.offset, r.count));
  };

  std::vector<Layer> layers;
  const auto& jl = j.at("layers");
  for (std::size_t i = 0; i < jl.size(); ++i) {
    const auto& e = jl[i];
    const auto kind = layer_kind_from_string(e.at("kind").get<std::string>());
    const std::string base = "layers[" + std::to_string(i) + "]";
    Layer l;
    switch (kind) {
      case LayerKind::relu: l = Layer::relu(); break;
      case LayerKind::maxpool2d:
        l = Layer::maxpool2d(e.at("pool_size").get<std::size_t>(), e.at("stride").get<std::size_t>());
        break;
      case LayerKind::dense:
      case LayerKind::conv2d: {
        Tensor w = read_ref(e.at("weights"), base + ".weights");
        Tensor b = e.contains("bias") ? read_ref(e.at("bias"), base + ".bias") : Tensor{};
        l = kind == LayerKind::dense
                ? Layer::dense(std::move(w), std::move(b))
                : Layer::conv2d(std::move(w), std::move(b), e.at("stride").get<std::size_t>(),
                                padding_from_string(e.at("padding").get<std::string>()));
        break;
      }
    }
    layers.push_back(std::move(l));
  }

  std::vector<TensorRef> sorted = refs;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.offset < b.offset; });
  std::size_t total = 0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    total += sorted[k].count * 4;
    if (k > 0 && sorted[k - 1].offset + sorted[k - 1].count * 4 > sorted[k].offset)
      throw FormatError(jpath.string() + ": tensor " + sorted[k].name + " overlaps " + sorted[k - 1].name);
  }
  if (total != blob.size())
    throw FormatError(bin.string() + ": sidecar holds " + std::to_string(blob.size()) + " bytes but tensors cover " +
                      std::to_string(total));

  Model m(j.at("input_shape").get<Shape>(), std::move(layers));
  if (m.d() != j.at("d").get<std::size_t>()) throw FormatError(jpath.string() + ": declared d does not match layers");
  return m;
}

void save_dataset(const Dataset& dataset, const fs::path& stem) {
  if (dataset.empty()) throw std::invalid_argument("save_dataset: empty dataset");
  const Shape shape = dataset.inputs.front().shape;
  std::string blob;
  blob.reserve(dataset.size() * shape_size(shape) * 4);
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    if (dataset.inputs[n].shape != shape)
      throw std::invalid_argument("save_dataset: sample " + std::to_string(n) + " has a different shape");
    append_le(blob, dataset.inputs[n].data);
  }
  const auto bin = with_suffix(stem, ".dataset.bin");
  json j = {{"format_version", kFormatVersion},
            {"kind", "qalloc.dataset"},
            {"count", dataset.size()},
            {"input_shape", shape},
            {"labels", dataset.labels},
            {"sidecar", bin.filename().string()},
            {"sidecar_bytes", blob.size()}};
  if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());
  write_text(bin, blob);
  write_json(dataset_json_path(stem), j);
}

Dataset load_dataset(const fs::path& path) {
  const auto stem = resolve_stem(path, ".dataset.json");
  const auto jpath = dataset_json_path(stem);
  const json j = read_json(jpath);
  check_version(j, "qalloc.dataset", jpath);
  const auto bin = jpath.parent_path() / j.at("sidecar").get<std::string>();
  const std::string blob = read_text(bin);
  const auto count = j.at("count").get<std::size_t>();
  const auto shape = j.at("input_shape").get<Shape>();
  const auto per = shape_size(shape);
  if (blob.size() != j.at("sidecar_bytes").get<std::size_t>() || blob.size() != count * per * 4)
    throw FormatError(bin.string() + ": sidecar is " + std::to_string(blob.size()) + " bytes, expected " +
                      std::to_string(count * per * 4));
  Dataset ds;
  ds.labels = j.at("labels").get<std::vector<std::size_t>>();
  if (ds.labels.size() != count) throw FormatError(jpath.string() + ": label count does not match count");
  ds.inputs.reserve(count);
  for (std::size_t n = 0; n < count; ++n) ds.inputs.emplace_back(shape, read_le(blob, n * per * 4, per));
  return ds;
}

// ---------------------------------------------------------------------------
// Reports

json profiles_to_json(std::span<const LayerProfile> profiles) {
  json layers = json::array();
  for (const auto& p : profiles)
    layers.push_back({{"layer", p.layer},
                      {"params", p.params},
                      {"t", p.t},
                      {"p", p.p},
                      {"delta_acc", p.delta_acc},
                      {"b_probe", p.b_probe},
                      {"k", p.k},
                      {"degenerate", p.degenerate}});
  return {{"format_version", kFormatVersion}, {"kind", "qalloc.profiles"}, {"layers", layers}};
}

json profiles_to_json(const PipelineResult& result) {
  json j = profiles_to_json(std::span<const LayerProfile>(result.profiles));
  j["baseline_accuracy"] = result.baseline_accuracy;
  j["margins"] = margins_to_json(result.margins);
  j["t_report"] = t_report_to_json(result.t);
  j["p_report"] = p_report_to_json(result.p);
  return j;
}

std::vector<LayerProfile> profiles_from_json(const json& j) {
  check_version(j, "qalloc.profiles", "profiles");
  std::vector<LayerProfile> out;
  std::size_t index = 0;
  for (const auto& e : j.at("layers")) {
    LayerProfile p;
    p.layer = e.value("layer", index);
    p.params = e.at("params").get<std::size_t>();
    p.t = e.at("t").get<double>();
    p.p = e.at("p").get<double>();
    p.delta_acc = e.value("delta_acc", 0.0);
    p.b_probe = e.value("b_probe", kDefaultProbeBits);
    p.k = e.value("k", 0.0);
    p.degenerate = e.value("degenerate", false);
    out.push_back(p);
    ++index;
  }
  return out;
}

json t_report_to_json(const TReport& report) {
  json layers = json::array();
  for (const auto& l : report.layers)
    layers.push_back({{"layer", l.layer},
                      {"params", l.params},
                      {"t", l.t},
                      {"k", l.k},
                      {"accuracy_drop", l.accuracy_drop},
                      {"mean_rz", l.mean_rz},
                      {"iterations", l.iterations},
                      {"converged", l.converged},
                      {"probed", l.probed}});
  return {{"baseline_accuracy", report.baseline_accuracy},
          {"delta_acc", report.delta_acc},
          {"mean_r_star", report.mean_r_star},
          {"layers", layers}};
}

json p_report_to_json(std::span<const PProbe> probes) {
  json out = json::array();
  for (const auto& p : probes)
    out.push_back({{"layer", p.layer},
                   {"p", p.p},
                   {"mean_rz", p.mean_rz},
                   {"b_probe", p.b_probe},
                   {"degenerate", p.degenerate}});
  return out;
}

json margins_to_json(const MarginStats& stats, bool include_samples) {
  json j = {{"mean_r_star", stats.mean_r_star},
            {"count", stats.per_sample.size()},
            {"histogram", {{"lo", stats.histogram.lo}, {"hi", stats.histogram.hi}, {"counts", stats.histogram.counts}}}};
  if (include_samples) j["per_sample"] = stats.per_sample;
  return j;
}

json allocation_to_json(const BitAllocation& a) {
  return {{"format_version", kFormatVersion},
          {"kind", "qalloc.allocation"},
          {"method", to_string(a.method)},
          {"b1", a.b1},
          {"b_real", a.b_real},
          {"b_int", a.b_int},
          {"sizes", a.sizes},
          {"saturated", a.saturated},
          {"size_bits", a.size_bits}};
}

BitAllocation allocation_from_json(const json& j) {
  check_version(j, "qalloc.allocation", "allocation");
  BitAllocation a;
  a.method = method_from_string(j.at("method").get<std::string>());
  a.b1 = j.at("b1").get<double>();
  a.b_real = j.at("b_real").get<std::vector<double>>();
  a.b_int = j.at("b_int").get<std::vector<int>>();
  a.sizes = j.at("sizes").get<std::vector<std::size_t>>();
  a.saturated = j.at("saturated").get<std::vector<bool>>();
  a.size_bits = j.at("size_bits").get<std::int64_t>();
  if (a.b_int.size() != a.sizes.size() || a.b_real.size() != a.sizes.size())
    throw FormatError("allocation: per-layer arrays differ in length");
  if (total_size_bits(a.sizes, a.b_int) != a.size_bits)
    throw FormatError("allocation: size_bits does not equal sum of s_i * b_i");
  return a;
}

json comparison_to_json(const ComparisonReport& report) {
  json comps = json::array();
  for (const auto& c : report.comparisons) {
    json pts = json::array();
    for (const auto& p : c.points)
      pts.push_back({{"accuracy", p.accuracy},
                     {"size_a", p.size_a},
                     {"size_b", p.size_b},
                     {"ratio", p.ratio},
                     {"a_dominates", p.a_dominates}});
    comps.push_back({{"a", to_string(c.a)},
                     {"b", to_string(c.b)},
                     {"empty", c.empty},
                     {"dominance_fraction", c.dominance_fraction},
                     {"mean_ratio", c.mean_ratio},
                     {"points", pts}});
  }
  return {{"format_version", kFormatVersion}, {"kind", "qalloc.comparison"}, {"comparisons", comps}};
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("curve.csv line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

}  // namespace

std::string curves_to_csv(std::span<const Curve> curves) {
  std::string out = "method,b1,variant,size_bits,size_mb,top1\n";
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      out += to_string(p.method);
      out += ',' + format_double(p.b1) + ',' + std::to_string(p.variant) + ',' + std::to_string(p.size_bits) +
             ',' + format_double(p.size_mb) + ',' + format_double(p.top1) + '\n';
    }
  return out;
}

std::vector<Curve> curves_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,b1,variant,size_bits,size_mb,top1")
    throw FormatError("curve.csv: missing or unexpected header");
  std::vector<Curve> curves;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (cols.size() != 6) throw FormatError("curve.csv line " + std::to_string(lineno) + ": expected 6 columns");
    CurvePoint p;
    p.method = method_from_string(cols[0]);
    p.b1 = parse_double(cols[1], lineno);
    p.variant = static_cast<std::size_t>(parse_double(cols[2], lineno));
    p.size_bits = static_cast<std::int64_t>(parse_double(cols[3], lineno));
    p.size_mb = parse_double(cols[4], lineno);
    p.top1 = parse_double(cols[5], lineno);
    auto it = std::find_if(curves.begin(), curves.end(), [&](const Curve& c) { return c.method == p.method; });
    if (it == curves.end()) {
      curves.push_back(Curve{p.method, {}});
      it = std::prev(curves.end());
    }
    it->points.push_back(std::move(p));
  }
  return curves;
}

// ---------------------------------------------------------------------------
// Files

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[k]);
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

json make_manifest(const std::string& command, const json& config, const std::vector<fs::path>& inputs,
                   const std::vector<fs::path>& outputs) {
  auto files = [](const std::vector<fs::path>& paths) {
    json arr = json::array();
    for (const auto& p : paths) arr.push_back({{"path", p.generic_string()}, {"sha256", sha256_file(p)}});
    return arr;
  };
  return {{"format_version", kFormatVersion},
          {"kind", "qalloc.manifest"},
          {"command", command},
          {"config", config},
          {"inputs", files(inputs)},
          {"outputs", files(outputs)}};
}

}  // namespace qalloc
