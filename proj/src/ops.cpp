#include "sonn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sonn {
namespace {

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  return std::equal(small.begin(), small.end(), large.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Tensor make_output(Shape shape, std::vector<double> data) {
  return Tensor::from_op(std::move(shape), std::move(data), false);
}

Tensor binary(Tape& tape, ElementwiseKind kind, const Tensor& a, const Tensor& b) {
  const bool a_long = is_suffix(b.shape(), a.shape());
  const bool b_long = !a_long && is_suffix(a.shape(), b.shape());
  if (!a_long && !b_long) {
    throw std::invalid_argument("shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape out_shape = a_long ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[i % na];
    const double y = bd[i % nb];
    switch (kind) {
      case ElementwiseKind::kAdd: out[i] = x + y; break;
      case ElementwiseKind::kSub: out[i] = x - y; break;
      case ElementwiseKind::kMul: out[i] = x * y; break;
      default: throw std::logic_error("unary kind passed to binary elementwise");
    }
  }
  Tensor result = make_output(out_shape, std::move(out));
  tape.record({a, b}, result, [a, b, kind, n, na, nb](std::span<const double> g) mutable {
    auto ad = a.data();
    auto bd = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i % na] += kind == ElementwiseKind::kMul ? g[i] * bd[i % nb] : g[i];
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == ElementwiseKind::kSub) d = -d;
        if (kind == ElementwiseKind::kMul) d *= ad[i % na];
        gb[i % nb] += d;
      }
    }
  });
  return result;
}

Tensor unary(Tape& tape, ElementwiseKind kind, const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    out[i] = kind == ElementwiseKind::kTanh ? std::tanh(ad[i]) : std::max(ad[i], 0.0);
  }
  Tensor result = make_output(a.shape(), std::move(out));
  tape.record({a}, result, [a, result, kind](std::span<const double> g) mutable {
    auto ga = a.grad_mut();
    auto x = a.data();
    auto y = result.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (kind == ElementwiseKind::kTanh) {
        ga[i] += g[i] * (1.0 - y[i] * y[i]);
      } else if (x[i] > 0.0) {
        ga[i] += g[i];
      }
    }
  });
  return result;
}

}  // namespace

Tensor elementwise(Tape& tape, ElementwiseKind kind, const Tensor& a, const std::optional<Tensor>& b) {
  const bool is_binary = kind == ElementwiseKind::kAdd || kind == ElementwiseKind::kSub || kind == ElementwiseKind::kMul;
  if (is_binary) {
    if (!b) throw std::invalid_argument("binary elementwise op requires a second operand");
    return binary(tape, kind, a, *b);
  }
  return unary(tape, kind, a);
}

Tensor elementwise_pow(Tape& tape, const Tensor& x, int q) {
  if (q < 1) throw std::invalid_argument("elementwise_pow needs q >= 1, got " + std::to_string(q));
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = std::pow(xd[i], q);
  Tensor result = make_output(x.shape(), std::move(out));
  tape.record({x}, result, [x, q](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * q * std::pow(xd[i], q - 1);
  });
  return result;
}

Tensor affine(Tape& tape, const Tensor& x, double alpha, double beta) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = alpha * xd[i] + beta;
  Tensor result = make_output(x.shape(), std::move(out));
  tape.record({x}, result, [x, alpha](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
  });
  return result;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = make_output({1}, {s});
  tape.record({x}, result, [x](std::span<const double> g) mutable {
    for (double& v : x.grad_mut()) v += g[0];
  });
  return result;
}

Tensor mean(Tape& tape, const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  return affine(tape, sum(tape, x), 1.0 / n, 0.0);
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xd = x.data();
  Tensor result = make_output(std::move(shape), std::vector<double>(xd.begin(), xd.end()));
  tape.record({x}, result, [x](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return result;
}

Tensor log_softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw std::invalid_argument("log_softmax axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < len; ++k) s += std::exp(xd[base + k * inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = xd[base + k * inner] - lse;
    }
  }
  Tensor result = make_output(shape, std::move(out));
  tape.record({x}, result, [x, result, outer, inner, len](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    auto y = result.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double gs = 0.0;
        for (std::size_t k = 0; k < len; ++k) gs += g[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += g[i] - std::exp(y[i]) * gs;
        }
      }
    }
  });
  return result;
}

Tensor to_time_major(Tape& tape, const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("to_time_major expects [N,C,T], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t k = 0; k < t; ++k) out[(k * n + i) * c + j] = xd[(i * c + j) * t + k];
  Tensor result = make_output({t, n, c}, std::move(out));
  tape.record({x}, result, [x, n, c, t](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t k = 0; k < t; ++k) gx[(i * c + j) * t + k] += g[(k * n + i) * c + j];
  });
  return result;
}

BatchNorm::BatchNorm(std::size_t channels) {
  if (channels == 0) return;
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::full({channels}, 1.0);
}

Tensor batch_norm(Tape& tape, const Tensor& x, BatchNorm& bn, bool training) {
  if (x.rank() < 2 || x.dim(1) != bn.channels()) {
    throw std::invalid_argument("batch_norm channel mismatch: input " + shape_str(x.shape()) + ", params " +
                                std::to_string(bn.channels()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t count = n * inner;
  auto xd = x.data();
  auto gamma = bn.gamma.data();
  auto beta = bn.beta.data();

  std::vector<double> mu(c), inv_std(c);
  if (training) {
    auto rm = bn.running_mean.mutable_data();
    auto rv = bn.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < inner; ++k) s += xd[(i * c + ch) * inner + k];
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < inner; ++k) {
          const double d = xd[(i * c + ch) * inner + k] - m;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + bn.eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      rm[ch] = (1.0 - bn.momentum) * rm[ch] + bn.momentum * m;
      rv[ch] = (1.0 - bn.momentum) * rv[ch] + bn.momentum * unbiased;
    }
  } else {
    auto rm = bn.running_mean.data();
    auto rv = bn.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + bn.eps);
    }
  }

  std::vector<double> xhat(xd.size()), out(xd.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t idx = (i * c + ch) * inner + k;
        xhat[idx] = (xd[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }
  Tensor result = make_output(x.shape(), std::move(out));
  Tensor g_t = bn.gamma, b_t = bn.beta;
  tape.record({x, g_t, b_t}, result,
              [x, g_t, b_t, xhat = std::move(xhat), inv_std, n, c, inner, count, training](
                  std::span<const double> g) mutable {
                auto gamma = g_t.data();
                std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t k = 0; k < inner; ++k) {
                      const std::size_t idx = (i * c + ch) * inner + k;
                      sum_g[ch] += g[idx];
                      sum_gx[ch] += g[idx] * xhat[idx];
                    }
                if (g_t.requires_grad()) {
                  auto gg = g_t.grad_mut();
                  for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                }
                if (b_t.requires_grad()) {
                  auto gb = b_t.grad_mut();
                  for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                }
                if (!x.requires_grad()) return;
                auto gx = x.grad_mut();
                const double m = static_cast<double>(count);
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t k = 0; k < inner; ++k) {
                      const std::size_t idx = (i * c + ch) * inner + k;
                      if (training) {
                        gx[idx] += gamma[ch] * inv_std[ch] *
                                   (g[idx] - sum_g[ch] / m - xhat[idx] * sum_gx[ch] / m);
                      } else {
                        gx[idx] += gamma[ch] * inv_std[ch] * g[idx];
                      }
                    }
              });
  return result;
}

Tensor max_pool2d(Tape& tape, const Tensor& x, std::pair<std::size_t, std::size_t> window,
                  std::pair<std::size_t, std::size_t> stride) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d expects [N,C,H,W], got " + shape_str(x.shape()));
  const auto [wh, ww] = window;
  const auto [sh, sw] = stride;
  if (wh == 0 || ww == 0 || sh == 0 || sw == 0) throw std::invalid_argument("max_pool2d window and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (wh > h || ww > w) {
    throw std::invalid_argument("max_pool2d window " + std::to_string(wh) + "x" + std::to_string(ww) +
                                " larger than input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - wh) / sh + 1, wo = (w - ww) / sw + 1;
  auto xd = x.data();
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t in_base = plane * h * w;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = in_base + (i * sh) * w + j * sw;
        for (std::size_t a = 0; a < wh; ++a)
          for (std::size_t b = 0; b < ww; ++b) {
            const std::size_t idx = in_base + (i * sh + a) * w + (j * sw + b);
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (plane * ho + i) * wo + j;
        out[o] = xd[best];
        argmax[o] = best;
      }
  }
  Tensor result = make_output({n, c, ho, wo}, std::move(out));
  tape.record({x}, result, [x, argmax = std::move(argmax)](std::span<const double> g) mutable {
    auto gx = x.grad_mut();
    for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
  });
  return result;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_grad needs eps > 0");
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  auto pd = probe.mutable_data();
  std::vector<double> grad(pd.size());
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double orig = pd[i];
    pd[i] = orig + eps;
    const double fp = f(probe);
    pd[i] = orig - eps;
    const double fm = f(probe);
    pd[i] = orig;
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return Tensor::from_op(x.shape(), std::move(grad), false);
}

}  // namespace sonn
