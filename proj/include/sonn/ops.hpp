#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <utility>

#include "sonn/tape.hpp"
#include "sonn/tensor.hpp"

namespace sonn {

enum class ElementwiseKind { kAdd, kSub, kMul, kTanh, kRelu };

/// Unary kinds ignore `b`. Binary kinds accept equal shapes or a shorter
/// operand whose shape matches the trailing axes of the longer one (broadcast
/// along leading axes).
Tensor elementwise(Tape& tape, ElementwiseKind kind, const Tensor& a, const std::optional<Tensor>& b = std::nullopt);

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, ElementwiseKind::kAdd, a, b); }
inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, ElementwiseKind::kSub, a, b); }
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, ElementwiseKind::kMul, a, b); }
inline Tensor tanh(Tape& tape, const Tensor& a) { return elementwise(tape, ElementwiseKind::kTanh, a); }
inline Tensor relu(Tape& tape, const Tensor& a) { return elementwise(tape, ElementwiseKind::kRelu, a); }

/// x^q elementwise; q must be >= 1.
Tensor elementwise_pow(Tape& tape, const Tensor& x, int q);

/// y = alpha * x + beta.
Tensor affine(Tape& tape, const Tensor& x, double alpha, double beta);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Same data, new shape with equal element count.
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

/// Numerically stable log-softmax along `axis` (max subtraction).
Tensor log_softmax(Tape& tape, const Tensor& x, std::size_t axis);

/// [N, C, T] -> [T, N, C].
Tensor to_time_major(Tape& tape, const Tensor& x);

/// Per-channel normalization over every axis but 1. Holds learnable affine
/// parameters and running statistics.
struct BatchNorm {
  explicit BatchNorm(std::size_t channels = 0);

  Tensor gamma;         // [C], trainable
  Tensor beta;          // [C], trainable
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double eps = 1e-5;

  std::size_t channels() const { return gamma.numel(); }
};

/// Training mode normalizes with biased batch statistics and updates the
/// running stats (unbiased variance) by `momentum`; eval mode uses the
/// running stats and leaves them untouched.
Tensor batch_norm(Tape& tape, const Tensor& x, BatchNorm& bn, bool training);

/// Max pooling over [N, C, H, W] without padding. Gradient goes to the first
/// maximal element of each window in row-major order.
Tensor max_pool2d(Tape& tape, const Tensor& x, std::pair<std::size_t, std::size_t> window,
                  std::pair<std::size_t, std::size_t> stride);

/// Central-difference estimate of df/dx_i, perturbing a private copy of `x`.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace sonn
