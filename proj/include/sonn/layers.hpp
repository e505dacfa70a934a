#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>

#include "sonn/tape.hpp"
#include "sonn/tensor.hpp"

namespace sonn {

/// Window geometry of a 2D layer. Defaults are 3x3 kernel, unit stride,
/// unit padding, unit dilation.
struct Conv2DGeometry {
  std::pair<std::size_t, std::size_t> kernel{3, 3};
  std::pair<std::size_t, std::size_t> stride{1, 1};
  std::pair<std::size_t, std::size_t> padding{1, 1};
  std::pair<std::size_t, std::size_t> dilation{1, 1};
};

struct Conv1DGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t dilation = 1;
};

/// Generative-neuron 2D layer. Each output is a Q-term polynomial of the
/// input patch: sum over q of <w_q, x^q> plus bias, with one weight bank per
/// power. Q == 1 is an ordinary convolution.
struct OperationalConv2D {
  OperationalConv2D() = default;
  OperationalConv2D(std::size_t c_in, std::size_t c_out, int q_order, Conv2DGeometry geometry = {});

  std::size_t c_in = 0;
  std::size_t c_out = 0;
  int q_order = 1;
  Conv2DGeometry geometry;
  Tensor weights;  // [Q, C_out, C_in, kh, kw]
  Tensor bias;     // [C_out]

  std::size_t parameter_count() const { return weights.numel() + bias.numel(); }
};

struct OperationalConv1D {
  OperationalConv1D() = default;
  OperationalConv1D(std::size_t c_in, std::size_t c_out, int q_order, Conv1DGeometry geometry = {});

  std::size_t c_in = 0;
  std::size_t c_out = 0;
  int q_order = 1;
  Conv1DGeometry geometry;
  Tensor weights;  // [Q, C_out, C_in, k]
  Tensor bias;     // [C_out]

  std::size_t parameter_count() const { return weights.numel() + bias.numel(); }
};

/// Convolution whose taps sample the input at learned fractional offsets.
/// The offset predictor is a Q=1 convolution with the base geometry that
/// emits one (dy, dx) pair per tap: channel 2t holds dy and 2t+1 holds dx
/// for tap t in row-major kernel order.
struct DeformableConv2D {
  DeformableConv2D() = default;
  DeformableConv2D(std::size_t c_in, std::size_t c_out, Conv2DGeometry geometry = {});

  OperationalConv2D base;
  OperationalConv2D offset_predictor;

  std::size_t parameter_count() const { return base.parameter_count() + offset_predictor.parameter_count(); }
};

/// Output spatial extents of a 2D layer on an H x W input. Throws when
/// either would be non-positive.
std::pair<std::size_t, std::size_t> conv2d_output_size(const Conv2DGeometry& g, std::size_t height, std::size_t width);

/// Ordinary convolution; requires p.q_order == 1.
Tensor conv2d_forward(Tape& tape, const Tensor& x, const OperationalConv2D& p);

/// x: [N, C_in, H, W] -> [N, C_out, H', W'].
Tensor selfonn_conv2d_forward(Tape& tape, const Tensor& x, const OperationalConv2D& p);

/// x: [N, C_in, T] -> [N, C_out, T'].
Tensor selfonn_conv1d_forward(Tape& tape, const Tensor& x, const OperationalConv1D& p);

/// Bilinear read of every channel of `feature` [C, H, W] at (y, x).
/// Neighbors outside the image read as zero.
Tensor bilinear_sample(const Tensor& feature, double y, double x);

/// Value and coordinate partials of one bilinear read of a single plane.
/// At integer coordinates the partials are those of the cell whose lower
/// corner is (floor(y), floor(x)).
struct BilinearPoint {
  double value = 0.0;
  double d_dy = 0.0;
  double d_dx = 0.0;
};
BilinearPoint bilinear_point(const double* plane, std::size_t height, std::size_t width, double y, double x);

Tensor deformable_conv2d_forward(Tape& tape, const Tensor& x, const DeformableConv2D& p);

/// Deformable convolution with externally supplied offsets
/// [N, 2*kh*kw, H', W']; `base` must be Q=1.
Tensor deformable_conv2d_with_offsets(Tape& tape, const Tensor& x, const Tensor& offsets, const OperationalConv2D& base);

/// Uniform fan-in init: bank q draws from +-sqrt(1/(c_in*kh*kw)) / q!.
/// Bias is zeroed.
void init_operational_weights(OperationalConv2D& p, std::mt19937_64& rng);
void init_operational_weights(OperationalConv1D& p, std::mt19937_64& rng);
/// Initializes the base layer; the offset predictor is zeroed so the layer
/// starts as a plain convolution.
void init_operational_weights(DeformableConv2D& p, std::mt19937_64& rng);

template <typename Params>
void init_operational_weights(Params& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  init_operational_weights(p, rng);
}

/// Bound used for bank q (1-based) of a layer with the given fan-in.
double init_bound(std::size_t fan_in, int q);

}  // namespace sonn
