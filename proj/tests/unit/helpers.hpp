#pragma once

#include <vector>

#include "qalloc/nncore.hpp"
#include "qalloc/rng.hpp"

namespace qalloc::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0f;
  return t;
}

inline Dataset normal_inputs(const Shape& shape, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x(shape);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    ds.inputs.push_back(std::move(x));
    ds.labels.push_back(0);
  }
  return ds;
}

// Labels from the model's own argmax.
inline void relabel(const Model& m, Dataset& ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) ds.labels[i] = classify(forward(m, std::span<const float>(ds.inputs[i].data)));
}

// dense(in -> hidden) -> relu -> dense(hidden -> d)
inline Model small_mlp(std::size_t in, std::size_t hidden, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return Model({in}, {Layer::dense(random_tensor({hidden, in}, rng), random_tensor({hidden}, rng, -0.1, 0.1)),
                      Layer::relu(),
                      Layer::dense(random_tensor({d, hidden}, rng), random_tensor({d}, rng, -0.1, 0.1))});
}

// conv -> relu -> pool -> dense, small enough for fast tests
inline Model small_convnet(std::uint64_t seed) {
  Rng rng(seed);
  return Model({6, 6, 2}, {Layer::conv2d(random_tensor({3, 3, 2, 4}, rng, -0.4, 0.4), random_tensor({4}, rng, -0.1, 0.1)),
                           Layer::relu(), Layer::maxpool2d(2),
                           Layer::dense(random_tensor({5, 36}, rng, -0.3, 0.3), random_tensor({5}, rng, -0.1, 0.1))});
}

}  // namespace qalloc::testing
