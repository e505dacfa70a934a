#include "sonn/tape.hpp"

#include <stdexcept>

namespace sonn {

bool any_requires_grad(std::initializer_list<const Tensor*> tensors) {
  for (const Tensor* t : tensors) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  bool needed = false;
  for (const Tensor& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return false;
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
  return true;
}

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.grad_mut()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output.has_grad()) continue;  // not reachable from the loss
    for (Tensor& in : node.inputs) {
      if (in.requires_grad()) in.grad_mut();
    }
    node.fn(node.output.grad());
    if (check_finite_) {
      for (const Tensor& in : node.inputs) {
        if (in.has_grad() && !all_finite(in.grad())) {
          throw std::runtime_error("non-finite gradient produced during backward pass");
        }
      }
    }
  }
}

}  // namespace sonn
