#include "sonn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "sonn/ctc.hpp"
#include "sonn/layers.hpp"
#include "sonn/ops.hpp"

namespace sonn::gradcheck {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i], floor);
    if (!(e <= worst)) worst = std::isnan(e) ? INFINITY : e;
  }
  return worst;
}

bool Report::passed() const {
  return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed(); });
}

void Report::merge(const Report& other) {
  for (const auto& c : other.components) {
    auto it = std::find_if(components.begin(), components.end(), [&](const auto& mine) { return mine.name == c.name; });
    if (it == components.end()) {
      components.push_back(c);
    } else {
      it->max_rel_error = std::max(it->max_rel_error, c.max_rel_error);
    }
  }
}

double check_leaf(const std::function<Tensor(Tape&)>& loss, Tensor leaf, double eps, Fault fault) {
  leaf.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  if (fault == Fault::kFlipSign) {
    for (double& g : analytic) g = -g;
  }
  std::vector<double> numeric(leaf.numel());
  auto values = leaf.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    Tape up;
    const double plus = loss(up).item();
    values[i] = saved - eps;
    Tape down;
    const double minus = loss(down).item();
    values[i] = saved;
    numeric[i] = (plus - minus) / (2.0 * eps);
  }
  return max_relative_error(analytic, numeric);
}

namespace {

Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// sum(y * r) with a fixed random projection r so every output element matters.
Tensor project(Tape& tape, const Tensor& y, const Tensor& r) { return sum(tape, mul(tape, y, r)); }

class Suite {
 public:
  Suite(std::uint64_t seed, const SuiteOptions& opt) : rng_(seed), opt_(opt) {}

  void add(const std::string& name, double tol, const std::function<Tensor(Tape&)>& loss, const Tensor& leaf) {
    report_.components.push_back({name, check_leaf(loss, leaf, opt_.eps, opt_.fault), tol});
  }

  std::size_t pick(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }

  void operational(int q) {
    Conv2DGeometry g;
    g.kernel = {pick(2, 3), 3};
    g.stride = {pick(1, 2), pick(1, 2)};
    g.padding = {pick(0, 1), pick(0, 1)};
    g.dilation = {1, pick(1, 2)};
    OperationalConv2D p(pick(1, 2), pick(1, 3), q, g);
    p.weights = uniform(p.weights.shape(), -0.5, 0.5, rng_, true);
    p.bias = uniform(p.bias.shape(), -0.5, 0.5, rng_, true);
    const Tensor x = uniform({2, p.c_in, pick(5, 6), pick(5, 7)}, -1.0, 1.0, rng_, true);
    Tensor r;
    {
      Tape probe;
      const Tensor y = selfonn_conv2d_forward(probe, x, p);
      r = uniform(y.shape(), -1.0, 1.0, rng_, false);
    }
    const auto loss = [&](Tape& t) { return project(t, selfonn_conv2d_forward(t, x, p), r); };
    const std::string tag = "operational2d Q=" + std::to_string(q);
    add(tag + " input", opt_.tolerance, loss, x);
    add(tag + " weights", opt_.tolerance, loss, p.weights);
    add(tag + " bias", opt_.tolerance, loss, p.bias);

    Conv1DGeometry g1;
    g1.kernel = pick(2, 3);
    g1.stride = pick(1, 2);
    g1.padding = pick(0, 1);
    OperationalConv1D p1(pick(1, 2), pick(1, 3), q, g1);
    p1.weights = uniform(p1.weights.shape(), -0.5, 0.5, rng_, true);
    p1.bias = uniform(p1.bias.shape(), -0.5, 0.5, rng_, true);
    const Tensor x1 = uniform({2, p1.c_in, pick(5, 8)}, -1.0, 1.0, rng_, true);
    Tensor r1;
    {
      Tape probe;
      r1 = uniform(selfonn_conv1d_forward(probe, x1, p1).shape(), -1.0, 1.0, rng_, false);
    }
    const auto loss1 = [&](Tape& t) { return project(t, selfonn_conv1d_forward(t, x1, p1), r1); };
    const std::string tag1 = "operational1d Q=" + std::to_string(q);
    add(tag1 + " input", opt_.tolerance, loss1, x1);
    add(tag1 + " weights", opt_.tolerance, loss1, p1.weights);
  }

  void deformable() {
    DeformableConv2D p(pick(1, 2), pick(1, 2));
    p.base.weights = uniform(p.base.weights.shape(), -0.5, 0.5, rng_, true);
    p.base.bias = uniform(p.base.bias.shape(), -0.5, 0.5, rng_, true);
    const std::size_t h = pick(4, 6), w = pick(4, 6);
    const Tensor x = uniform({2, p.base.c_in, h, w}, -1.0, 1.0, rng_, true);
    const auto [ho, wo] = conv2d_output_size(p.base.geometry, h, w);
    const std::size_t taps = p.base.geometry.kernel.first * p.base.geometry.kernel.second;

    // Explicit offsets with fractional parts in [0.2, 0.8] keep every sample
    // point clear of the bilinear kinks.
    std::uniform_real_distribution<double> frac(0.2, 0.8);
    std::vector<double> ov(2 * 2 * taps * ho * wo);
    for (double& v : ov) v = static_cast<double>(static_cast<int>(pick(0, 2)) - 1) + frac(rng_);
    const Tensor offsets({2, 2 * taps, ho, wo}, std::move(ov), true);
    const Tensor r = uniform({2, p.base.c_out, ho, wo}, -1.0, 1.0, rng_, false);
    const auto loss = [&](Tape& t) { return project(t, deformable_conv2d_with_offsets(t, x, offsets, p.base), r); };
    add("deformable input", opt_.tolerance, loss, x);
    add("deformable weights", opt_.tolerance, loss, p.base.weights);
    add("deformable bias", opt_.tolerance, loss, p.base.bias);
    add("deformable offsets", opt_.offset_tolerance, loss, offsets);

    p.offset_predictor.weights = uniform(p.offset_predictor.weights.shape(), -0.4, 0.4, rng_, true);
    p.offset_predictor.bias = uniform(p.offset_predictor.bias.shape(), 0.2, 0.8, rng_, true);
    const auto full = [&](Tape& t) { return project(t, deformable_conv2d_forward(t, x, p), r); };
    add("deformable offset-predictor weights", opt_.offset_tolerance, full, p.offset_predictor.weights);
  }

  void primitives() {
    const std::size_t c = pick(1, 3);
    BatchNorm bn(c);
    bn.gamma = uniform({c}, 0.5, 1.5, rng_, true);
    bn.beta = uniform({c}, -0.5, 0.5, rng_, true);
    const Tensor x = uniform({pick(2, 3), c, pick(2, 4), pick(2, 4)}, -2.0, 2.0, rng_, true);
    const Tensor r = uniform(x.shape(), -1.0, 1.0, rng_, false);
    const auto loss = [&](Tape& t) { return project(t, batch_norm(t, x, bn, true), r); };
    add("batch_norm input", opt_.tolerance, loss, x);
    add("batch_norm gamma", opt_.tolerance, loss, bn.gamma);
    add("batch_norm beta", opt_.tolerance, loss, bn.beta);

    const Tensor xp = uniform({2, c, 4, pick(4, 6)}, -1.0, 1.0, rng_, true);
    Tensor rp;
    {
      Tape probe;
      rp = uniform(max_pool2d(probe, xp, {2, 2}, {2, 2}).shape(), -1.0, 1.0, rng_, false);
    }
    add("max_pool2d input", opt_.tolerance, [&](Tape& t) { return project(t, max_pool2d(t, xp, {2, 2}, {2, 2}), rp); },
        xp);

    const Tensor xs = uniform({pick(2, 4), pick(2, 5), pick(2, 5)}, -3.0, 3.0, rng_, true);
    const std::size_t axis = pick(0, 2);
    const Tensor rs = uniform(xs.shape(), -1.0, 1.0, rng_, false);
    add("log_softmax input", opt_.tolerance, [&](Tape& t) { return project(t, log_softmax(t, xs, axis), rs); }, xs);
  }

  void ctc() {
    const std::size_t k = pick(3, 6), n = pick(1, 3);
    std::vector<ctc::LabelSeq> targets;
    std::size_t need = 1;
    for (std::size_t i = 0; i < n; ++i) {
      ctc::LabelSeq y{{}, k};
      const std::size_t len = pick(1, 4);
      for (std::size_t j = 0; j < len; ++j) y.labels.push_back(static_cast<int>(pick(1, k - 1)));
      need = std::max(need, ctc::required_frames(y));
      targets.push_back(std::move(y));
    }
    const std::size_t frames = need + pick(0, 4);
    const Tensor logits = uniform({frames, n, k}, -2.0, 2.0, rng_, true);
    const auto loss = [&](Tape& t) { return ctc::ctc_loss_batch(t, log_softmax(t, logits, 2), targets); };
    add("ctc logits", opt_.tolerance, loss, logits);

    // Closed-form logit gradient of a single sequence.
    const Tensor single = uniform({frames, k}, -2.0, 2.0, rng_, false);
    const auto nll = [&](const Tensor& z) {
      Tape t;
      const Tensor lp = log_softmax(t, z, 1);
      return ctc::ctc_loss(ctc::FrameLogProbs{lp.data(), frames, k}, targets.front()).loss;
    };
    std::vector<double> analytic;
    {
      Tape t;
      const Tensor lp = log_softmax(t, single, 1);
      analytic = ctc::ctc_loss(ctc::FrameLogProbs{lp.data(), frames, k}, targets.front()).grad_logits;
    }
    if (opt_.fault == Fault::kFlipSign) {
      for (double& g : analytic) g = -g;
    }
    const Tensor numeric = finite_difference_grad(nll, single, opt_.eps);
    report_.components.push_back({"ctc closed-form logits", max_relative_error(analytic, numeric.data()), opt_.tolerance});
  }

  Report take() { return std::move(report_); }

 private:
  std::mt19937_64 rng_;
  const SuiteOptions& opt_;
  Report report_;
};

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<double> grad_or_zero(const Tensor& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  return {t.grad().begin(), t.grad().end()};
}

}  // namespace

double q1_equivalence(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  Conv2DGeometry g;
  g.kernel = {pick(1, 3), pick(1, 3)};
  g.stride = {pick(1, 2), pick(1, 2)};
  g.padding = {pick(0, 1), pick(0, 1)};
  g.dilation = {pick(1, 2), 1};
  OperationalConv2D p(pick(1, 3), pick(1, 3), 1, g);
  p.weights = uniform(p.weights.shape(), -1.0, 1.0, rng, true);
  p.bias = uniform(p.bias.shape(), -1.0, 1.0, rng, true);
  const std::size_t n = 2, h = pick(5, 7), w = pick(5, 7);
  const Tensor x = uniform({n, p.c_in, h, w}, -1.0, 1.0, rng, true);
  const auto [ho, wo] = conv2d_output_size(g, h, w);
  const Tensor r = uniform({n, p.c_out, ho, wo}, -1.0, 1.0, rng, false);

  Tape tape;
  const Tensor y = selfonn_conv2d_forward(tape, x, p);
  tape.backward(project(tape, y, r));

  const auto [kh, kw] = g.kernel;
  std::vector<double> ref(n * p.c_out * ho * wo), gx(x.numel(), 0.0), gw(p.weights.numel(), 0.0), gb(p.c_out, 0.0);
  const auto xv = x.data();
  const auto wv = p.weights.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < p.c_out; ++o) {
      for (std::size_t i = 0; i < ho; ++i) {
        for (std::size_t j = 0; j < wo; ++j) {
          const std::size_t oi = ((b * p.c_out + o) * ho + i) * wo + j;
          double acc = p.bias.data()[o];
          const double ro = r.data()[oi];
          gb[o] += ro;
          for (std::size_t c = 0; c < p.c_in; ++c) {
            for (std::size_t a = 0; a < kh; ++a) {
              for (std::size_t e = 0; e < kw; ++e) {
                const long yy = static_cast<long>(i * g.stride.first + a * g.dilation.first) - static_cast<long>(g.padding.first);
                const long xx = static_cast<long>(j * g.stride.second + e * g.dilation.second) - static_cast<long>(g.padding.second);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                const std::size_t xi = ((b * p.c_in + c) * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx);
                const std::size_t wi = ((o * p.c_in + c) * kh + a) * kw + e;
                acc += wv[wi] * xv[xi];
                gw[wi] += ro * xv[xi];
                gx[xi] += ro * wv[wi];
              }
            }
          }
          ref[oi] = acc;
        }
      }
    }
  }
  return std::max({max_abs_diff(y.data(), ref), max_abs_diff(grad_or_zero(x), gx),
                   max_abs_diff(grad_or_zero(p.weights), gw), max_abs_diff(grad_or_zero(p.bias), gb)});
}

double zero_offset_equivalence(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  DeformableConv2D d(pick(1, 3), pick(1, 3));
  init_operational_weights(d, rng);
  d.base.bias = uniform(d.base.bias.shape(), -1.0, 1.0, rng, true);
  OperationalConv2D plain(d.base.c_in, d.base.c_out, 1, d.base.geometry);
  plain.weights = d.base.weights.clone();
  plain.weights.set_requires_grad(true);
  plain.bias = d.base.bias.clone();
  plain.bias.set_requires_grad(true);
  const Tensor x = uniform({2, d.base.c_in, pick(4, 7), pick(4, 7)}, -1.0, 1.0, rng, true);
  Tensor x2 = x.clone();
  x2.set_requires_grad(true);

  Tape t1;
  const Tensor y1 = deformable_conv2d_forward(t1, x, d);
  const Tensor r = uniform(y1.shape(), -1.0, 1.0, rng, false);
  t1.backward(project(t1, y1, r));
  Tape t2;
  const Tensor y2 = conv2d_forward(t2, x2, plain);
  t2.backward(project(t2, y2, r));
  return std::max({max_abs_diff(y1.data(), y2.data()), max_abs_diff(grad_or_zero(x), grad_or_zero(x2)),
                   max_abs_diff(grad_or_zero(d.base.weights), grad_or_zero(plain.weights)),
                   max_abs_diff(grad_or_zero(d.base.bias), grad_or_zero(plain.bias))});
}

Report run_suite(std::uint64_t seed, const SuiteOptions& options) {
  Suite suite(seed, options);
  if (options.operational) {
    for (int q : options.q_orders) suite.operational(q);
  }
  if (options.deformable) suite.deformable();
  if (options.primitives) suite.primitives();
  if (options.ctc) suite.ctc();
  return suite.take();
}

}  // namespace sonn::gradcheck
