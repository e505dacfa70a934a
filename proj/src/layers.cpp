#include "sonn/layers.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sonn/conv.hpp"

namespace sonn {
namespace {

using detail::ConvGeometry;

void require_q(int q) {
  if (q < 1) throw std::invalid_argument("q_order must be >= 1, got " + std::to_string(q));
}

ConvGeometry geometry_for(std::size_t channels, std::size_t h, std::size_t w, const Conv2DGeometry& g) {
  ConvGeometry cg;
  cg.channels = channels;
  cg.height = h;
  cg.width = w;
  cg.kernel_h = g.kernel.first;
  cg.kernel_w = g.kernel.second;
  cg.stride_h = g.stride.first;
  cg.stride_w = g.stride.second;
  cg.pad_h = g.padding.first;
  cg.pad_w = g.padding.second;
  cg.dilation_h = g.dilation.first;
  cg.dilation_w = g.dilation.second;
  if (cg.kernel_h == 0 || cg.kernel_w == 0 || cg.stride_h == 0 || cg.stride_w == 0 || cg.dilation_h == 0 ||
      cg.dilation_w == 0) {
    throw std::invalid_argument("kernel, stride and dilation must be positive");
  }
  if (cg.out_height() == 0 || cg.out_width() == 0) {
    throw std::invalid_argument("convolution output size would be non-positive for input " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
  return cg;
}

Conv2DGeometry as_2d(const Conv1DGeometry& g) {
  return Conv2DGeometry{{1, g.kernel}, {1, g.stride}, {0, g.padding}, {1, g.dilation}};
}

/// Shared im2col route for every Q. `x` is interpreted as [N, C, H, W] with
/// the given extents regardless of its own rank, so 1D callers can pass
/// [N, C, T] with H = 1.
Tensor operational_core(Tape& tape, const Tensor& x, std::size_t n, std::size_t h, std::size_t w,
                        const Tensor& weights, const Tensor& bias, std::size_t c_in, std::size_t c_out, int q_order,
                        const Conv2DGeometry& geometry, bool output_1d) {
  const ConvGeometry g = geometry_for(c_in, h, w, geometry);
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::size_t plane_in = c_in * h * w;
  const std::size_t spatial = ho * wo;
  const std::size_t patch = g.patch_size();
  const std::size_t bank = c_out * patch;

  auto xd = x.data();
  auto wd = weights.data();
  auto bd = bias.data();
  std::vector<double> out(n * c_out * spatial);
  std::vector<double> cols(patch * spatial);
  std::vector<double> xq(plane_in);
  for (std::size_t s = 0; s < n; ++s) {
    std::span<const double> xs = xd.subspan(s * plane_in, plane_in);
    std::span<double> ys(out.data() + s * c_out * spatial, c_out * spatial);
    for (std::size_t co = 0; co < c_out; ++co) std::fill_n(ys.begin() + co * spatial, spatial, bd[co]);
    std::copy(xs.begin(), xs.end(), xq.begin());
    for (int q = 1; q <= q_order; ++q) {
      if (q > 1) {
        for (std::size_t i = 0; i < plane_in; ++i) xq[i] *= xs[i];
      }
      detail::im2col(xq, g, cols);
      detail::gemm_nn(wd.subspan((q - 1) * bank, bank), cols, ys, c_out, patch, spatial, true);
    }
  }

  Shape out_shape = output_1d ? Shape{n, c_out, wo} : Shape{n, c_out, ho, wo};
  Tensor result = Tensor::from_op(std::move(out_shape), std::move(out), false);
  tape.record({x, weights, bias}, result,
              [x, weights, bias, g, n, c_out, q_order, plane_in, spatial, patch, bank](
                  std::span<const double> gy) mutable {
                auto xd = x.data();
                auto wd = weights.data();
                std::vector<double> cols(patch * spatial);
                std::vector<double> dcols(patch * spatial);
                std::vector<double> dxq(plane_in);
                std::vector<double> xq(plane_in);
                std::vector<double> xq_prev(plane_in);
                if (bias.requires_grad()) {
                  auto gb = bias.grad_mut();
                  for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t co = 0; co < c_out; ++co) {
                      const double* row = gy.data() + (s * c_out + co) * spatial;
                      double acc = 0.0;
                      for (std::size_t i = 0; i < spatial; ++i) acc += row[i];
                      gb[co] += acc;
                    }
                }
                const bool need_w = weights.requires_grad();
                const bool need_x = x.requires_grad();
                if (!need_w && !need_x) return;
                std::span<double> gw = need_w ? weights.grad_mut() : std::span<double>{};
                std::span<double> gx = need_x ? x.grad_mut() : std::span<double>{};
                for (std::size_t s = 0; s < n; ++s) {
                  std::span<const double> xs = xd.subspan(s * plane_in, plane_in);
                  std::span<const double> gys = gy.subspan(s * c_out * spatial, c_out * spatial);
                  std::copy(xs.begin(), xs.end(), xq.begin());
                  std::fill(xq_prev.begin(), xq_prev.end(), 1.0);
                  for (int q = 1; q <= q_order; ++q) {
                    if (q > 1) {
                      xq_prev.swap(xq);
                      for (std::size_t i = 0; i < plane_in; ++i) xq[i] = xq_prev[i] * xs[i];
                    }
                    if (need_w) {
                      detail::im2col(xq, g, cols);
                      detail::gemm_nt(gys, cols, gw.subspan((q - 1) * bank, bank), c_out, spatial, patch, true);
                    }
                    if (need_x) {
                      detail::gemm_tn(wd.subspan((q - 1) * bank, bank), gys, dcols, patch, c_out, spatial, false);
                      std::fill(dxq.begin(), dxq.end(), 0.0);
                      detail::col2im_add(dcols, g, dxq);
                      // d(x^q)/dx = q * x^(q-1); xq_prev holds x^(q-1).
                      double* gxs = gx.data() + s * plane_in;
                      for (std::size_t i = 0; i < plane_in; ++i) gxs[i] += q * xq_prev[i] * dxq[i];
                    }
                  }
                }
              });
  return result;
}

}  // namespace

OperationalConv2D::OperationalConv2D(std::size_t c_in_, std::size_t c_out_, int q, Conv2DGeometry geom)
    : c_in(c_in_), c_out(c_out_), q_order(q), geometry(geom) {
  require_q(q);
  if (c_in == 0 || c_out == 0) throw std::invalid_argument("channel counts must be positive");
  weights = Tensor::zeros({static_cast<std::size_t>(q), c_out, c_in, geom.kernel.first, geom.kernel.second}, true);
  bias = Tensor::zeros({c_out}, true);
}

OperationalConv1D::OperationalConv1D(std::size_t c_in_, std::size_t c_out_, int q, Conv1DGeometry geom)
    : c_in(c_in_), c_out(c_out_), q_order(q), geometry(geom) {
  require_q(q);
  if (c_in == 0 || c_out == 0) throw std::invalid_argument("channel counts must be positive");
  weights = Tensor::zeros({static_cast<std::size_t>(q), c_out, c_in, geom.kernel}, true);
  bias = Tensor::zeros({c_out}, true);
}

DeformableConv2D::DeformableConv2D(std::size_t c_in, std::size_t c_out, Conv2DGeometry geom)
    : base(c_in, c_out, 1, geom), offset_predictor(c_in, 2 * geom.kernel.first * geom.kernel.second, 1, geom) {}

std::pair<std::size_t, std::size_t> conv2d_output_size(const Conv2DGeometry& g, std::size_t height, std::size_t width) {
  const ConvGeometry cg = geometry_for(1, height, width, g);
  return {cg.out_height(), cg.out_width()};
}

Tensor conv2d_forward(Tape& tape, const Tensor& x, const OperationalConv2D& p) {
  if (p.q_order != 1) {
    throw std::invalid_argument("conv2d_forward needs q_order 1, got " + std::to_string(p.q_order));
  }
  return selfonn_conv2d_forward(tape, x, p);
}

Tensor selfonn_conv2d_forward(Tape& tape, const Tensor& x, const OperationalConv2D& p) {
  require_q(p.q_order);
  if (x.rank() != 4) throw std::invalid_argument("2D layer expects [N,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != p.c_in) {
    throw std::invalid_argument("channel mismatch: input has " + std::to_string(x.dim(1)) + ", layer expects " +
                                std::to_string(p.c_in));
  }
  return operational_core(tape, x, x.dim(0), x.dim(2), x.dim(3), p.weights, p.bias, p.c_in, p.c_out, p.q_order,
                          p.geometry, false);
}

Tensor selfonn_conv1d_forward(Tape& tape, const Tensor& x, const OperationalConv1D& p) {
  require_q(p.q_order);
  if (x.rank() != 3) throw std::invalid_argument("1D layer expects [N,C,T], got " + shape_str(x.shape()));
  if (x.dim(1) != p.c_in) {
    throw std::invalid_argument("channel mismatch: input has " + std::to_string(x.dim(1)) + ", layer expects " +
                                std::to_string(p.c_in));
  }
  return operational_core(tape, x, x.dim(0), 1, x.dim(2), p.weights, p.bias, p.c_in, p.c_out, p.q_order,
                          as_2d(p.geometry), true);
}

BilinearPoint bilinear_point(const double* plane, std::size_t height, std::size_t width, double y, double x) {
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  if (y <= -1.0 || y >= h || x <= -1.0 || x >= w) return {};
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const double ly = y - fy, lx = x - fx, hy = 1.0 - ly, hx = 1.0 - lx;
  const auto ih = static_cast<std::ptrdiff_t>(height), iw = static_cast<std::ptrdiff_t>(width);
  auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
    return (r < 0 || r >= ih || c < 0 || c >= iw) ? 0.0 : plane[r * iw + c];
  };
  const double v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  BilinearPoint p;
  p.value = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
  p.d_dy = -hx * v00 - lx * v01 + hx * v10 + lx * v11;
  p.d_dx = -hy * v00 + hy * v01 - ly * v10 + ly * v11;
  return p;
}

Tensor bilinear_sample(const Tensor& feature, double y, double x) {
  if (feature.rank() != 3) throw std::invalid_argument("bilinear_sample expects [C,H,W], got " + shape_str(feature.shape()));
  const std::size_t c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  std::vector<double> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] = bilinear_point(feature.data().data() + ch * h * w, h, w, y, x).value;
  return Tensor::from_op({c}, std::move(out), false);
}

namespace {

/// Scatter of one bilinear read's gradient onto its four neighbors.
void bilinear_scatter(double* plane, std::size_t height, std::size_t width, double y, double x, double g) {
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  if (y <= -1.0 || y >= h || x <= -1.0 || x >= w) return;
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const double ly = y - fy, lx = x - fx, hy = 1.0 - ly, hx = 1.0 - lx;
  const auto ih = static_cast<std::ptrdiff_t>(height), iw = static_cast<std::ptrdiff_t>(width);
  auto add = [&](std::ptrdiff_t r, std::ptrdiff_t c, double v) {
    if (r >= 0 && r < ih && c >= 0 && c < iw) plane[r * iw + c] += v;
  };
  add(y0, x0, g * hy * hx);
  add(y0, x0 + 1, g * hy * lx);
  add(y0 + 1, x0, g * ly * hx);
  add(y0 + 1, x0 + 1, g * ly * lx);
}

}  // namespace

Tensor deformable_conv2d_with_offsets(Tape& tape, const Tensor& x, const Tensor& offsets, const OperationalConv2D& base) {
  if (base.q_order != 1) throw std::invalid_argument("deformable convolution needs a q_order 1 base layer");
  if (x.rank() != 4) throw std::invalid_argument("2D layer expects [N,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != base.c_in) {
    throw std::invalid_argument("channel mismatch: input has " + std::to_string(x.dim(1)) + ", layer expects " +
                                std::to_string(base.c_in));
  }
  const std::size_t n = x.dim(0), c_in = base.c_in, c_out = base.c_out, h = x.dim(2), w = x.dim(3);
  const ConvGeometry g = geometry_for(c_in, h, w, base.geometry);
  const std::size_t ho = g.out_height(), wo = g.out_width(), spatial = ho * wo;
  const std::size_t kk = g.kernel_h * g.kernel_w, patch = g.patch_size();
  const Shape expected{n, 2 * kk, ho, wo};
  if (offsets.shape() != expected) {
    throw std::invalid_argument("offset shape " + shape_str(offsets.shape()) + " does not match expected " +
                                shape_str(expected));
  }

  // Sampling coordinate of tap t at output position p for sample s.
  auto coord = [g, kk, wo, spatial](std::span<const double> off, std::size_t s, std::size_t t, std::size_t i,
                                         std::size_t j) {
    const std::size_t ki = t / g.kernel_w, kj = t % g.kernel_w;
    const std::size_t p = i * wo + j;
    const double dy = off[((s * 2 * kk) + 2 * t) * spatial + p];
    const double dx = off[((s * 2 * kk) + 2 * t + 1) * spatial + p];
    const double y = static_cast<double>(i * g.stride_h + ki * g.dilation_h) - static_cast<double>(g.pad_h) + dy;
    const double x = static_cast<double>(j * g.stride_w + kj * g.dilation_w) - static_cast<double>(g.pad_w) + dx;
    return std::pair<double, double>{y, x};
  };

  auto build_cols = [c_in, h, w, kk, ho, wo, spatial, coord](std::span<const double> xd, std::span<const double> off,
                                                                std::size_t s, std::vector<double>& cols) {
    for (std::size_t t = 0; t < kk; ++t)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          const auto [y, x] = coord(off, s, t, i, j);
          for (std::size_t ch = 0; ch < c_in; ++ch) {
            const double* plane = xd.data() + (s * c_in + ch) * h * w;
            cols[(ch * kk + t) * spatial + i * wo + j] = bilinear_point(plane, h, w, y, x).value;
          }
        }
  };

  auto xd = x.data();
  auto od = offsets.data();
  auto wd = base.weights.data();
  auto bd = base.bias.data();
  std::vector<double> out(n * c_out * spatial);
  std::vector<double> cols(patch * spatial);
  for (std::size_t s = 0; s < n; ++s) {
    build_cols(xd, od, s, cols);
    std::span<double> ys(out.data() + s * c_out * spatial, c_out * spatial);
    for (std::size_t co = 0; co < c_out; ++co) std::fill_n(ys.begin() + co * spatial, spatial, bd[co]);
    detail::gemm_nn(wd, cols, ys, c_out, patch, spatial, true);
  }

  Tensor result = Tensor::from_op({n, c_out, ho, wo}, std::move(out), false);
  Tensor weights = base.weights, bias = base.bias;
  tape.record({x, offsets, weights, bias}, result,
              [x, offsets, weights, bias, n, c_in, c_out, h, w, kk, ho, wo, spatial, patch, coord, build_cols](
                  std::span<const double> gy) mutable {
                auto xd = x.data();
                auto od = offsets.data();
                auto wd = weights.data();
                if (bias.requires_grad()) {
                  auto gb = bias.grad_mut();
                  for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t co = 0; co < c_out; ++co) {
                      const double* row = gy.data() + (s * c_out + co) * spatial;
                      for (std::size_t i = 0; i < spatial; ++i) gb[co] += row[i];
                    }
                }
                std::vector<double> cols(patch * spatial), dcols(patch * spatial);
                const bool need_x = x.requires_grad(), need_off = offsets.requires_grad();
                std::span<double> gx = need_x ? x.grad_mut() : std::span<double>{};
                std::span<double> goff = need_off ? offsets.grad_mut() : std::span<double>{};
                for (std::size_t s = 0; s < n; ++s) {
                  std::span<const double> gys = gy.subspan(s * c_out * spatial, c_out * spatial);
                  if (weights.requires_grad()) {
                    build_cols(xd, od, s, cols);
                    detail::gemm_nt(gys, cols, weights.grad_mut(), c_out, spatial, patch, true);
                  }
                  if (!need_x && !need_off) continue;
                  detail::gemm_tn(wd, gys, dcols, patch, c_out, spatial, false);
                  for (std::size_t t = 0; t < kk; ++t)
                    for (std::size_t i = 0; i < ho; ++i)
                      for (std::size_t j = 0; j < wo; ++j) {
                        const auto [y, xx] = coord(od, s, t, i, j);
                        const std::size_t p = i * wo + j;
                        double acc_y = 0.0, acc_x = 0.0;
                        for (std::size_t ch = 0; ch < c_in; ++ch) {
                          const double gcol = dcols[(ch * kk + t) * spatial + p];
                          if (need_off) {
                            const BilinearPoint bp = bilinear_point(xd.data() + (s * c_in + ch) * h * w, h, w, y, xx);
                            acc_y += gcol * bp.d_dy;
                            acc_x += gcol * bp.d_dx;
                          }
                          if (need_x) bilinear_scatter(gx.data() + (s * c_in + ch) * h * w, h, w, y, xx, gcol);
                        }
                        if (need_off) {
                          goff[((s * 2 * kk) + 2 * t) * spatial + p] += acc_y;
                          goff[((s * 2 * kk) + 2 * t + 1) * spatial + p] += acc_x;
                        }
                      }
                }
              });
  return result;
}

Tensor deformable_conv2d_forward(Tape& tape, const Tensor& x, const DeformableConv2D& p) {
  const std::size_t taps = p.base.geometry.kernel.first * p.base.geometry.kernel.second;
  if (p.offset_predictor.c_out != 2 * taps) {
    throw std::invalid_argument("offset predictor must emit 2*kh*kw = " + std::to_string(2 * taps) + " channels");
  }
  const auto& a = p.offset_predictor.geometry;
  const auto& b = p.base.geometry;
  if (a.kernel != b.kernel || a.stride != b.stride || a.padding != b.padding || a.dilation != b.dilation) {
    throw std::invalid_argument("offset predictor geometry must match the base layer");
  }
  Tensor offsets = conv2d_forward(tape, x, p.offset_predictor);
  return deformable_conv2d_with_offsets(tape, x, offsets, p.base);
}

double init_bound(std::size_t fan_in, int q) {
  double factorial = 1.0;
  for (int i = 2; i <= q; ++i) factorial *= i;
  return std::sqrt(1.0 / static_cast<double>(fan_in)) / factorial;
}

namespace {

void init_banks(Tensor& weights, Tensor& bias, std::size_t fan_in, int q_order, std::mt19937_64& rng) {
  auto wd = weights.mutable_data();
  const std::size_t bank = wd.size() / static_cast<std::size_t>(q_order);
  for (int q = 1; q <= q_order; ++q) {
    const double bound = init_bound(fan_in, q);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < bank; ++i) wd[(q - 1) * bank + i] = dist(rng);
  }
  auto bd = bias.mutable_data();
  std::fill(bd.begin(), bd.end(), 0.0);
}

}  // namespace

void init_operational_weights(OperationalConv2D& p, std::mt19937_64& rng) {
  init_banks(p.weights, p.bias, p.c_in * p.geometry.kernel.first * p.geometry.kernel.second, p.q_order, rng);
}

void init_operational_weights(OperationalConv1D& p, std::mt19937_64& rng) {
  init_banks(p.weights, p.bias, p.c_in * p.geometry.kernel, p.q_order, rng);
}

void init_operational_weights(DeformableConv2D& p, std::mt19937_64& rng) {
  init_operational_weights(p.base, rng);
  for (double& v : p.offset_predictor.weights.mutable_data()) v = 0.0;
  for (double& v : p.offset_predictor.bias.mutable_data()) v = 0.0;
}

}  // namespace sonn
