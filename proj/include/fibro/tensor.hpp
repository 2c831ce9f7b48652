// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fibro {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
struct Tensor {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, bool learnable = false)
      : shape(std::move(s)), value(shape_size(shape), 0.0), requires_grad(learnable) {}
  Tensor(Shape s, std::vector<double> v, bool learnable = false);

  std::size_t size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  void zero_grad() { grad.assign(value.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
TensorPtr zeros_tensor(Shape shape, bool requires_grad = false);

/// Records backward closures in execution order. A non-recording tape runs
/// every op forward-only.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  /// True when an op over `inputs` must record a backward step.
  template <typename... Ts>
  bool tracks(const Ts&... inputs) const {
    return recording_ && ((inputs && inputs->requires_grad) || ...);
  }

  void push(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded steps in reverse.
  /// Gradients accumulate into every learnable leaf. Throws NoRecordedGraph
  /// when nothing was recorded and NonFiniteGradient when any tensor in
  /// `check` ends up with a NaN/Inf gradient.
  void backward(const TensorPtr& loss, std::span<const TensorPtr> check = {});

 private:
  bool recording_;
  std::vector<std::function<void()>> steps_;
};

}  // namespace fibro
