#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nepa/tensor.hpp"

namespace nepa::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, DType dtype = DType::f64,
                            double scale = 1.0) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(eng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

/// Pixels uniform in [0, 1].
inline Tensor uniform_images(Shape shape, std::uint64_t seed, DType dtype = DType::f64) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(eng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

/// Fixed random weights used to turn a tensor output into a scalar whose
/// gradient has no degenerate directions.
inline Tensor probe_weights(const Tensor& like, std::uint64_t seed) {
  return random_tensor(like.shape(), seed ^ 0x9E3779B97F4A7C15ull, like.dtype());
}

}  // namespace nepa::testing
