// SPDX-License-Identifier: Apache-2.0
#include "fibro/tensor.hpp"

#include <cmath>
#include <sstream>

#include "fibro/error.hpp"

namespace fibro {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> v, bool learnable)
    : shape(std::move(s)), value(std::move(v)), requires_grad(learnable) {
  if (value.size() != shape_size(shape))
    throw Error(ErrorCode::ShapeMismatch, "tensor of shape " + shape_string(shape) + " given " +
                                              std::to_string(value.size()) + " values");
}

TensorPtr make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), std::move(values), requires_grad);
}

TensorPtr zeros_tensor(Shape shape, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

void Tape::backward(const TensorPtr& loss, std::span<const TensorPtr> check) {
  if (!recording_ || steps_.empty() || !loss || !loss->requires_grad)
    throw Error(ErrorCode::NoRecordedGraph, "no differentiable graph was recorded for this loss");
  if (loss->size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
  loss->ensure_grad();
  loss->grad[0] = 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
  for (const auto& t : check) {
    for (double g : t->grad)
      if (!std::isfinite(g)) throw Error(ErrorCode::NonFiniteGradient, "gradient contains NaN or Inf");
  }
}

}  // namespace fibro
