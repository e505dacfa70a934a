#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sonn/tensor.hpp"

namespace sonn {

/// Records differentiable operations in execution order for reverse-mode
/// differentiation. One tape serves one forward/backward pass on one thread.
class Tape {
 public:
  /// Receives the gradient of the loss w.r.t. the node output and must
  /// accumulate (+=) into the gradients of the node's inputs.
  using BackwardFn = std::function<void(std::span<const double> output_grad)>;

  /// Records a node if any input requires a gradient; otherwise a no-op.
  /// Returns whether the node was recorded.
  bool record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// Seeds d loss / d loss = 1 and replays the tape in reverse. Leaf gradients
  /// accumulate additively; callers zero them between steps.
  /// Throws std::invalid_argument when loss is not a scalar.
  void backward(Tensor loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// When set, backward() verifies every node's input gradients are finite
  /// after the pass. Defaults to on in debug builds.
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
};

/// Whether any of the tensors requires a gradient.
bool any_requires_grad(std::initializer_list<const Tensor*> tensors);

}  // namespace sonn
