#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "edlab/error.hpp"

namespace edlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Dense row-major tensor. The engine is templated on the scalar so that the
// float32 production path and the float64 gradient-check path run identical
// code.
template <class T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  BasicTensor() = default;

  explicit BasicTensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}

  BasicTensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size()) {
      throw Error(ErrorKind::Dimension, "shape " + shape_string(shape) + " does not hold " +
                                            std::to_string(data.size()) + " values");
    }
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void zero_grad() { grad.emplace(data.size(), T(0)); }
};

using Tensor = BasicTensor<float>;

}  // namespace edlab
