#include "sonn/conv.hpp"

#include <Eigen/Core>

namespace sonn::detail {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, std::size_t dil) {
  const std::size_t span = dil * (k - 1) + 1;
  if (in + 2 * pad < span) return 0;
  return (in + 2 * pad - span) / stride + 1;
}

}  // namespace

std::size_t ConvGeometry::out_height() const { return out_extent(height, kernel_h, stride_h, pad_h, dilation_h); }
std::size_t ConvGeometry::out_width() const { return out_extent(width, kernel_w, stride_w, pad_w, dilation_w); }

void im2col(std::span<const double> x, const ConvGeometry& g, std::span<double> cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x.data() + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
        double* dst = cols.data() + row * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * g.stride_h + ki * g.dilation_h) -
                                   static_cast<std::ptrdiff_t>(g.pad_h);
          double* out_row = dst + i * wo;
          if (y < 0 || y >= h) {
            std::fill(out_row, out_row + wo, 0.0);
            continue;
          }
          for (std::size_t j = 0; j < wo; ++j) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * g.stride_w + kj * g.dilation_w) -
                                      static_cast<std::ptrdiff_t>(g.pad_w);
            out_row[j] = (xx < 0 || xx >= w) ? 0.0 : plane[y * w + xx];
          }
        }
      }
    }
  }
}

void col2im_add(std::span<const double> cols, const ConvGeometry& g, std::span<double> dx) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = dx.data() + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
        const double* src = cols.data() + row * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * g.stride_h + ki * g.dilation_h) -
                                   static_cast<std::ptrdiff_t>(g.pad_h);
          if (y < 0 || y >= h) continue;
          for (std::size_t j = 0; j < wo; ++j) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * g.stride_w + kj * g.dilation_w) -
                                      static_cast<std::ptrdiff_t>(g.pad_w);
            if (xx >= 0 && xx < w) plane[y * w + xx] += src[i * wo + j];
          }
        }
      }
    }
  }
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  ConstMap A(a.data(), m, k);
  ConstMap B(b.data(), k, n);
  Map C(out.data(), m, n);
  if (accumulate) C.noalias() += A * B;
  else C.noalias() = A * B;
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  ConstMap A(a.data(), m, k);
  ConstMap B(b.data(), n, k);
  Map C(out.data(), m, n);
  if (accumulate) C.noalias() += A * B.transpose();
  else C.noalias() = A * B.transpose();
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  ConstMap A(a.data(), k, m);
  ConstMap B(b.data(), k, n);
  Map C(out.data(), m, n);
  if (accumulate) C.noalias() += A.transpose() * B;
  else C.noalias() = A.transpose() * B;
}

}  // namespace sonn::detail
