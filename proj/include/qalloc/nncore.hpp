#pragma once

// Minimal deterministic feed-forward inference engine.
//
// Activations are stored row-major in (H, W, C) order for spatial layers.
// Dense weights are (out, in); conv kernels are (Kh, Kw, C, D).
// All dot products accumulate in double and round to float once per output.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qalloc {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<float> values);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// True when both tensors have the same shape and identical bit patterns.
bool bit_identical(const Tensor& a, const Tensor& b);

enum class LayerKind { dense, conv2d, relu, maxpool2d };
enum class Padding { valid, same };

const char* to_string(LayerKind kind);
const char* to_string(Padding padding);
LayerKind layer_kind_from_string(const std::string& name);
Padding padding_from_string(const std::string& name);

struct Layer {
  LayerKind kind = LayerKind::relu;
  Tensor weights;
  Tensor bias;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  std::size_t pool_size = 2;

  static Layer dense(Tensor weights, Tensor bias);
  static Layer conv2d(Tensor kernel, Tensor bias, std::size_t stride = 1,
                      Padding padding = Padding::same);
  static Layer relu();
  static Layer maxpool2d(std::size_t pool_size, std::size_t stride = 0);

  bool has_weights() const {
    return kind == LayerKind::dense || kind == LayerKind::conv2d;
  }
  /// s_i: weight plus bias element count.
  std::size_t parameter_count() const { return weights.size() + bias.size(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Output shape of one layer given its input shape; throws ShapeError
/// naming `index` when the layer cannot consume `in`.
Shape layer_output_shape(const Layer& layer, const Shape& in, std::size_t index);

class Model {
 public:
  Model() = default;
  Model(Shape input_shape, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t num_layers() const { return layers_.size(); }
  /// Class count: length of the final feature vector.
  std::size_t d() const { return d_; }
  /// Activation shape after each layer.
  const std::vector<Shape>& shapes() const { return shapes_; }

  std::vector<std::size_t> weighted_layers() const;
  std::vector<std::size_t> layer_sizes() const;  // s_i for weighted layers

  /// Copy with layer `i` replaced; shapes are revalidated.
  Model with_layer(std::size_t i, Layer layer) const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;
  std::size_t d_ = 0;
};

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  /// Throws if lengths differ, a label is >= d, or an input shape differs.
  void validate(const Shape& input_shape, std::size_t d) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Per-sample pre-softmax outputs, one row per dataset sample.
using Features = std::vector<std::vector<float>>;

std::vector<float> forward(const Model& model, std::span<const float> input);
Tensor forward(const Model& model, const Tensor& input);

/// One layer on one activation; `index` only labels shape errors.
Tensor apply_layer(const Layer& layer, const Tensor& input, std::size_t index = 0);

/// Argmax with ties broken by lowest index.
std::size_t classify(std::span<const float> z);

Features forward_batch(const Model& model, const Dataset& dataset);
double evaluate_accuracy(const Model& model, const Dataset& dataset);

/// W_i <- W_i + noise. Bias is left exact unless `bias_noise` is given.
Model perturb_layer(const Model& model, std::size_t i, const Tensor& noise,
                    const Tensor* bias_noise = nullptr);

/// Mean over the dataset of ||G(x,W) - G(x,W')||^2.
double feature_delta(const Model& model, const Model& perturbed, const Dataset& dataset);
double feature_delta(const Features& baseline, const Model& perturbed, const Dataset& dataset);

struct PerturbedEval {
  double accuracy = 0.0;
  double mean_delta = 0.0;  // mean ||r_z||^2
};

/// Accuracy of `perturbed` and its mean squared feature deviation from
/// `baseline`, in one pass.
PerturbedEval evaluate_perturbed(const Features& baseline, const Model& perturbed,
                                 const Dataset& dataset);

/// Worker cap for per-sample parallel loops; 0 means hardware concurrency.
void set_max_threads(unsigned n);
unsigned max_threads();

/// Runs fn(i) for i in [0, n). Each index is visited exactly once; callers
/// write into per-index slots and reduce sequentially afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace qalloc
