#include "qalloc/nncore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

namespace qalloc {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto v : shape) n *= v;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(shape_size(shape), 0.0f) {}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size())
    throw std::invalid_argument("tensor shape " + shape_to_string(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() ||
          std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
  }
  return "?";
}

const char* to_string(Padding padding) { return padding == Padding::same ? "same" : "valid"; }

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerKind::dense;
  if (name == "conv2d") return LayerKind::conv2d;
  if (name == "relu") return LayerKind::relu;
  if (name == "maxpool2d") return LayerKind::maxpool2d;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

Padding padding_from_string(const std::string& name) {
  if (name == "same") return Padding::same;
  if (name == "valid") return Padding::valid;
  throw std::invalid_argument("unknown padding '" + name + "'");
}

Layer Layer::dense(Tensor weights, Tensor bias) {
  Layer l;
  l.kind = LayerKind::dense;
  l.weights = std::move(weights);
  l.bias = std::move(bias);
  return l;
}

Layer Layer::conv2d(Tensor kernel, Tensor bias, std::size_t stride, Padding padding) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.weights = std::move(kernel);
  l.bias = std::move(bias);
  l.stride = stride;
  l.padding = padding;
  return l;
}

Layer Layer::relu() { return Layer{}; }

Layer Layer::maxpool2d(std::size_t pool_size, std::size_t stride) {
  Layer l;
  l.kind = LayerKind::maxpool2d;
  l.pool_size = pool_size;
  l.stride = stride == 0 ? pool_size : stride;
  return l;
}

namespace {

[[noreturn]] void shape_fail(std::size_t index, const Layer& layer, const std::string& what) {
  throw ShapeError("layer " + std::to_string(index) + " (" + to_string(layer.kind) + "): " + what);
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  return in < k ? 0 : (in - k) / stride + 1;
}

std::size_t same_pad_before(std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
  const std::size_t needed = (out - 1) * stride + k;
  return needed > in ? (needed - in) / 2 : 0;
}

}  // namespace

Shape layer_output_shape(const Layer& layer, const Shape& in, std::size_t index) {
  switch (layer.kind) {
    case LayerKind::relu:
      return in;
    case LayerKind::dense: {
      const auto& w = layer.weights.shape;
      if (w.size() != 2) shape_fail(index, layer, "weights must be (out, in)");
      if (w[1] != shape_size(in))
        shape_fail(index, layer, "expects " + std::to_string(w[1]) + " inputs, got " +
                                     shape_to_string(in));
      if (!layer.bias.empty() && layer.bias.shape != Shape{w[0]})
        shape_fail(index, layer, "bias must have shape (" + std::to_string(w[0]) + ")");
      return Shape{w[0]};
    }
    case LayerKind::conv2d: {
      const auto& k = layer.weights.shape;
      if (k.size() != 4) shape_fail(index, layer, "kernel must be (Kh, Kw, C, D)");
      if (in.size() != 3) shape_fail(index, layer, "input must be (H, W, C), got " + shape_to_string(in));
      if (k[2] != in[2])
        shape_fail(index, layer, "kernel channels " + std::to_string(k[2]) + " != input channels " +
                                     std::to_string(in[2]));
      if (layer.stride == 0) shape_fail(index, layer, "stride must be positive");
      if (!layer.bias.empty() && layer.bias.shape != Shape{k[3]})
        shape_fail(index, layer, "bias must have shape (" + std::to_string(k[3]) + ")");
      const auto h = conv_out_dim(in[0], k[0], layer.stride, layer.padding);
      const auto w = conv_out_dim(in[1], k[1], layer.stride, layer.padding);
      if (h == 0 || w == 0) shape_fail(index, layer, "kernel larger than input " + shape_to_string(in));
      return Shape{h, w, k[3]};
    }
    case LayerKind::maxpool2d: {
      if (in.size() != 3) shape_fail(index, layer, "input must be (H, W, C), got " + shape_to_string(in));
      if (layer.pool_size == 0 || layer.stride == 0) shape_fail(index, layer, "pool size and stride must be positive");
      if (in[0] < layer.pool_size || in[1] < layer.pool_size)
        shape_fail(index, layer, "pool window larger than input " + shape_to_string(in));
      return Shape{(in[0] - layer.pool_size) / layer.stride + 1,
                   (in[1] - layer.pool_size) / layer.stride + 1, in[2]};
    }
  }
  shape_fail(index, layer, "unknown layer kind");
}

Model::Model(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0)
    throw ShapeError("model input shape must be nonempty");
  if (layers_.empty()) throw ShapeError("model has no layers");
  Shape cur = input_shape_;
  shapes_.reserve(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.has_weights() && l.weights.empty()) shape_fail(i, l, "missing weights");
    if (!l.has_weights() && (!l.weights.empty() || !l.bias.empty()))
      shape_fail(i, l, "weightless layer carries parameters");
    cur = layer_output_shape(l, cur, i);
    shapes_.push_back(cur);
  }
  if (cur.size() != 1)
    throw ShapeError("final layer output must be a vector, got " + shape_to_string(cur));
  d_ = cur[0];
}

std::vector<std::size_t> Model::weighted_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].has_weights()) out.push_back(i);
  return out;
}

std::vector<std::size_t> Model::layer_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers_)
    if (l.has_weights()) out.push_back(l.parameter_count());
  return out;
}

Model Model::with_layer(std::size_t i, Layer layer) const {
  auto layers = layers_;
  layers.at(i) = std::move(layer);
  return Model(input_shape_, std::move(layers));
}

void Dataset::validate(const Shape& input_shape, std::size_t d) const {
  if (inputs.size() != labels.size())
    throw std::invalid_argument("dataset has " + std::to_string(inputs.size()) + " inputs but " +
                                std::to_string(labels.size()) + " labels");
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (inputs[n].shape != input_shape)
      throw ShapeError("sample " + std::to_string(n) + " has shape " +
                       shape_to_string(inputs[n].shape) + ", model expects " +
                       shape_to_string(input_shape));
    if (labels[n] >= d)
      throw std::invalid_argument("sample " + std::to_string(n) + " label " +
                                  std::to_string(labels[n]) + " >= class count " + std::to_string(d));
  }
}

namespace {

void run_dense(const Layer& l, std::span<const float> in, std::vector<float>& out) {
  const auto n_out = l.weights.shape[0];
  const auto n_in = l.weights.shape[1];
  out.assign(n_out, 0.0f);
  const float* w = l.weights.data.data();
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = l.bias.empty() ? 0.0 : static_cast<double>(l.bias.data[o]);
    const float* row = w + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) acc += static_cast<double>(row[i]) * in[i];
    out[o] = static_cast<float>(acc);
  }
}

void run_conv(const Layer& l, const Shape& in_shape, const Shape& out_shape,
              std::span<const float> in, std::vector<float>& out, std::vector<double>& acc) {
  const auto H = in_shape[0], W = in_shape[1], C = in_shape[2];
  const auto Kh = l.weights.shape[0], Kw = l.weights.shape[1], D = l.weights.shape[3];
  const auto Ho = out_shape[0], Wo = out_shape[1];
  const auto s = l.stride;
  std::size_t pad_y = 0, pad_x = 0;
  if (l.padding == Padding::same) {
    pad_y = same_pad_before(H, Ho, Kh, s);
    pad_x = same_pad_before(W, Wo, Kw, s);
  }
  out.assign(Ho * Wo * D, 0.0f);
  acc.resize(D);
  const float* k = l.weights.data.data();
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      for (std::size_t d = 0; d < D; ++d) acc[d] = l.bias.empty() ? 0.0 : l.bias.data[d];
      for (std::size_t ky = 0; ky < Kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(pad_y);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < Kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(pad_x);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const float* px = in.data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
          const float* kk = k + (ky * Kw + kx) * C * D;
          for (std::size_t c = 0; c < C; ++c) {
            const double v = px[c];
            const float* krow = kk + c * D;
            for (std::size_t d = 0; d < D; ++d) acc[d] += v * krow[d];
          }
        }
      }
      float* po = out.data() + (oy * Wo + ox) * D;
      for (std::size_t d = 0; d < D; ++d) po[d] = static_cast<float>(acc[d]);
    }
  }
}

void run_maxpool(const Layer& l, const Shape& in_shape, const Shape& out_shape,
                 std::span<const float> in, std::vector<float>& out) {
  const auto W = in_shape[1], C = in_shape[2];
  const auto Ho = out_shape[0], Wo = out_shape[1];
  out.assign(Ho * Wo * C, 0.0f);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (std::size_t c = 0; c < C; ++c) {
        float best = -std::numeric_limits<float>::infinity();
        for (std::size_t py = 0; py < l.pool_size; ++py)
          for (std::size_t px = 0; px < l.pool_size; ++px) {
            const auto iy = oy * l.stride + py, ix = ox * l.stride + px;
            best = std::max(best, in[(iy * W + ix) * C + c]);
          }
        out[(oy * Wo + ox) * C + c] = best;
      }
}

void run_layer(const Layer& l, const Shape& in_shape, const Shape& out_shape, std::span<const float> in,
               std::vector<float>& out, std::vector<double>& acc) {
  switch (l.kind) {
    case LayerKind::dense: run_dense(l, in, out); break;
    case LayerKind::conv2d: run_conv(l, in_shape, out_shape, in, out, acc); break;
    case LayerKind::maxpool2d: run_maxpool(l, in_shape, out_shape, in, out); break;
    case LayerKind::relu:
      out.assign(in.begin(), in.end());
      for (auto& v : out) v = v > 0.0f ? v : 0.0f;
      break;
  }
}

}  // namespace

std::vector<float> forward(const Model& model, std::span<const float> input) {
  if (input.size() != shape_size(model.input_shape()))
    throw ShapeError("input has " + std::to_string(input.size()) + " values, model expects " +
                     shape_to_string(model.input_shape()));
  std::vector<float> cur(input.begin(), input.end());
  std::vector<float> next;
  std::vector<double> acc;
  Shape in_shape = model.input_shape();
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& out_shape = model.shapes()[i];
    run_layer(model.layer(i), in_shape, out_shape, cur, next, acc);
    std::swap(cur, next);
    in_shape = out_shape;
  }
  return cur;
}

Tensor apply_layer(const Layer& layer, const Tensor& input, std::size_t index) {
  Tensor out(layer_output_shape(layer, input.shape, index));
  std::vector<double> acc;
  run_layer(layer, input.shape, out.shape, input.data, out.data, acc);
  return out;
}

Tensor forward(const Model& model, const Tensor& input) {
  if (input.shape != model.input_shape())
    throw ShapeError("input shape " + shape_to_string(input.shape) + " does not match model input " +
                     shape_to_string(model.input_shape()));
  auto z = forward(model, std::span<const float>(input.data));
  const auto d = z.size();
  return Tensor({d}, std::move(z));
}

std::size_t classify(std::span<const float> z) {
  if (z.empty()) throw std::invalid_argument("classify: empty feature vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

Features forward_batch(const Model& model, const Dataset& dataset) {
  dataset.validate(model.input_shape(), model.d());
  Features out(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t n) { out[n] = forward(model, dataset.inputs[n].data); });
  return out;
}

double evaluate_accuracy(const Model& model, const Dataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  dataset.validate(model.input_shape(), model.d());
  std::vector<unsigned char> correct(dataset.size(), 0);
  parallel_for(dataset.size(), [&](std::size_t n) {
    correct[n] = classify(forward(model, dataset.inputs[n].data)) == dataset.labels[n];
  });
  std::size_t hits = 0;
  for (auto c : correct) hits += c;
  return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

Model perturb_layer(const Model& model, std::size_t i, const Tensor& noise, const Tensor* bias_noise) {
  if (i >= model.num_layers())
    throw std::out_of_range("perturb_layer: layer " + std::to_string(i) + " out of range");
  const auto& src = model.layer(i);
  if (!src.has_weights())
    throw std::invalid_argument("perturb_layer: layer " + std::to_string(i) + " (" +
                                to_string(src.kind) + ") has no weights");
  if (noise.shape != src.weights.shape)
    throw ShapeError("perturb_layer: noise shape " + shape_to_string(noise.shape) +
                     " != weight shape " + shape_to_string(src.weights.shape));
  Layer l = src;
  for (std::size_t k = 0; k < l.weights.data.size(); ++k) l.weights.data[k] += noise.data[k];
  if (bias_noise) {
    if (bias_noise->shape != src.bias.shape)
      throw ShapeError("perturb_layer: bias noise shape " + shape_to_string(bias_noise->shape) +
                       " != bias shape " + shape_to_string(src.bias.shape));
    for (std::size_t k = 0; k < l.bias.data.size(); ++k) l.bias.data[k] += bias_noise->data[k];
  }
  return model.with_layer(i, std::move(l));
}

namespace {

double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += diff * diff;
  }
  return s;
}

}  // namespace

PerturbedEval evaluate_perturbed(const Features& baseline, const Model& perturbed, const Dataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate_perturbed: empty dataset");
  if (baseline.size() != dataset.size())
    throw std::invalid_argument("evaluate_perturbed: baseline has " + std::to_string(baseline.size()) +
                                " rows for " + std::to_string(dataset.size()) + " samples");
  dataset.validate(perturbed.input_shape(), perturbed.d());
  std::vector<double> delta(dataset.size());
  std::vector<unsigned char> correct(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t n) {
    const auto z = forward(perturbed, dataset.inputs[n].data);
    if (z.size() != baseline[n].size()) throw ShapeError("evaluate_perturbed: feature length mismatch");
    delta[n] = squared_distance(baseline[n], z);
    correct[n] = classify(z) == dataset.labels[n];
  });
  PerturbedEval r;
  std::size_t hits = 0;
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    r.mean_delta += delta[n];
    hits += correct[n];
  }
  const auto count = static_cast<double>(dataset.size());
  r.mean_delta /= count;
  r.accuracy = static_cast<double>(hits) / count;
  return r;
}

double feature_delta(const Features& baseline, const Model& perturbed, const Dataset& dataset) {
  return evaluate_perturbed(baseline, perturbed, dataset).mean_delta;
}

double feature_delta(const Model& model, const Model& perturbed, const Dataset& dataset) {
  if (model.input_shape() != perturbed.input_shape() || model.d() != perturbed.d() ||
      model.num_layers() != perturbed.num_layers())
    throw ShapeError("feature_delta: models do not share an architecture");
  return feature_delta(forward_batch(model, dataset), perturbed, dataset);
}

namespace {
std::atomic<unsigned> g_max_threads{0};
}

void set_max_threads(unsigned n) { g_max_threads = n; }

unsigned max_threads() {
  const unsigned cap = g_max_threads.load();
  if (cap != 0) return cap;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(max_threads(), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const auto i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace qalloc
