#pragma once

#include <cstddef>
#include <span>

namespace sonn::detail {

/// Geometry of a 2D sliding window over one [C, H, W] plane stack.
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel_h = 3, kernel_w = 3;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 1, pad_w = 1;
  std::size_t dilation_h = 1, dilation_w = 1;

  /// Zero when the window does not fit.
  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t patch_size() const { return channels * kernel_h * kernel_w; }
};

/// Unfolds x [C, H, W] into cols [C*kh*kw, Ho*Wo], zero padded.
void im2col(std::span<const double> x, const ConvGeometry& g, std::span<double> cols);

/// Adjoint of im2col: accumulates cols back into dx [C, H, W].
void col2im_add(std::span<const double> cols, const ConvGeometry& g, std::span<double> dx);

/// out[M,N] (+)= a[M,K] * b[K,N], all row-major.
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);
/// out[M,N] (+)= a[M,K] * b[N,K]^T.
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);
/// out[M,N] (+)= a[K,M]^T * b[K,N].
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);

}  // namespace sonn::detail
