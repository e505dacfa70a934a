#include <cmath>
#include <random>

#include "doctest.h"
#include "sonn/ctc.hpp"
#include "sonn/gradcheck.hpp"
#include "sonn/ops.hpp"

using namespace sonn;
using namespace sonn::ctc;

namespace {

std::vector<double> log_rows(const std::vector<std::vector<double>>& probs) {
  std::vector<double> out;
  for (const auto& row : probs)
    for (double p : row) out.push_back(std::log(p));
  return out;
}

std::vector<double> random_log_probs(std::size_t t, std::size_t k, std::mt19937_64& rng, double spread = 2.0) {
  std::uniform_real_distribution<double> d(-spread, spread);
  std::vector<double> out(t * k);
  for (std::size_t i = 0; i < t; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, out[i * k + j] = d(rng));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(out[i * k + j] - m);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] -= m + std::log(s);
  }
  return out;
}

LabelSeq random_labels(std::size_t max_len, std::size_t k, std::mt19937_64& rng) {
  LabelSeq y{{}, k};
  const std::size_t len = std::uniform_int_distribution<std::size_t>(0, max_len)(rng);
  for (std::size_t i = 0; i < len; ++i) y.labels.push_back(int(std::uniform_int_distribution<std::size_t>(1, k - 1)(rng)));
  return y;
}

}  // namespace

TEST_CASE("augment_labels") {
  // h, e, n as labels 1, 2, 3.
  CHECK(augment_labels(LabelSeq{{1, 2, 3}, 4}).labels == std::vector<int>{0, 1, 0, 2, 0, 3, 0});
  CHECK(augment_labels(LabelSeq{{}, 4}).labels == std::vector<int>{0});
  CHECK(augment_labels(LabelSeq{{1, 1}, 4}).labels == std::vector<int>{0, 1, 0, 1, 0});
}

TEST_CASE("label validation and required frames") {
  CHECK_THROWS_AS(LabelSeq({{0, 1}, 3}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(LabelSeq({{3}, 3}).validate(), std::invalid_argument);
  CHECK(required_frames(LabelSeq{{1, 2, 3}, 4}) == 3);
  CHECK(required_frames(LabelSeq{{1, 1, 2, 2}, 4}) == 6);
  CHECK(required_frames(LabelSeq{{}, 4}) == 0);
}

TEST_CASE("ctc_loss examples") {
  const std::vector<double> one = log_rows({{0.2, 0.7, 0.1}});
  CHECK(ctc_loss({one, 1, 3}, LabelSeq{{1}, 3}).loss == doctest::Approx(-std::log(0.7)).epsilon(1e-14));
  CHECK(ctc_loss({one, 1, 3}, LabelSeq{{1}, 3}).loss == doctest::Approx(0.356675).epsilon(1e-6));

  const std::vector<double> uniform(6, std::log(1.0 / 3.0));
  CHECK(ctc_loss({uniform, 2, 3}, LabelSeq{{}, 3}).loss == doctest::Approx(-std::log(1.0 / 9.0)).epsilon(1e-14));

  CHECK_THROWS_AS(ctc_loss({one, 1, 3}, LabelSeq{{1, 2}, 3}), std::invalid_argument);
  CHECK_THROWS_AS(ctc_loss({one, 1, 3}, LabelSeq{{1}, 4}), std::invalid_argument);
  CHECK_THROWS_AS(ctc_loss({one, 1, 3}, LabelSeq{{5}, 3}), std::invalid_argument);
}

TEST_CASE("ctc_loss matches an independent reference") {
  // Reference values from a third-party CTC implementation (blank 0, sum).
  const double logits[5][4] = {{0.1, 0.5, -0.3, 0.2},
                               {0.4, -0.2, 0.9, 0.0},
                               {-0.5, 0.3, 0.1, 0.6},
                               {0.2, 0.2, -0.1, -0.4},
                               {0.7, -0.6, 0.3, 0.1}};
  std::vector<double> lp;
  for (const auto& row : logits) {
    double s = 0.0;
    for (double v : row) s += std::exp(v);
    for (double v : row) lp.push_back(v - std::log(s));
  }
  CHECK(std::abs(ctc_loss({lp, 5, 4}, LabelSeq{{1, 2}, 4}).loss - 3.21246278387796) <= 1e-12);
  CHECK(std::abs(ctc_loss({lp, 5, 4}, LabelSeq{{3, 3}, 4}).loss - 4.380493874363403) <= 1e-12);
}

TEST_CASE("brute_force_ctc examples") {
  const std::vector<double> one = log_rows({{0.2, 0.7, 0.1}});
  CHECK(brute_force_ctc({one, 1, 3}, LabelSeq{{1}, 3}) == doctest::Approx(-std::log(0.7)));
  const std::vector<std::vector<double>> p = {{0.3, 0.5, 0.2}, {0.6, 0.1, 0.3}};
  const std::vector<double> two = log_rows(p);
  const double expected = -std::log(p[0][1] * p[1][1] + p[0][1] * p[1][0] + p[0][0] * p[1][1]);
  CHECK(brute_force_ctc({two, 2, 3}, LabelSeq{{1}, 3}) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::isinf(brute_force_ctc({one, 1, 3}, LabelSeq{{1, 2}, 3})));
}

TEST_CASE("ctc_loss equals path enumeration and alpha/beta agree") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const LabelSeq y = random_labels(3, k, rng);
    if (required_frames(y) > t) continue;
    const std::vector<double> lp = random_log_probs(t, k, rng);
    const CtcResult r = ctc_loss({lp, t, k}, y);
    CHECK(std::abs(r.loss - brute_force_ctc({lp, t, k}, y)) <= 1e-9);
    CHECK(std::abs(r.tables.log_likelihood_alpha - r.tables.log_likelihood_beta) <= 1e-9);
    for (double a : r.tables.alpha) CHECK(a <= 1e-12);
    for (double b : r.tables.beta) CHECK(b <= 1e-12);
  }
}

TEST_CASE("ctc gradients") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 4, t = 6;
    LabelSeq y = random_labels(3, k, rng);
    if (required_frames(y) > t) continue;
    const std::vector<double> lp = random_log_probs(t, k, rng);
    const CtcResult r = ctc_loss({lp, t, k}, y);
    // Posterior occupancy per frame sums to one.
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0.0, g = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        s += r.grad_log_probs[i * k + j];
        g += r.grad_logits[i * k + j];
      }
      CHECK(s == doctest::Approx(-1.0).epsilon(1e-12));
      CHECK(std::abs(g) <= 1e-12);
    }
    // d loss / d log_probs by finite differences on the unnormalized input.
    const Tensor x({t, k}, lp);
    const Tensor fd = finite_difference_grad([&](const Tensor& v) { return ctc_loss({v.data(), t, k}, y).loss; }, x, 1e-6);
    CHECK(gradcheck::max_relative_error(r.grad_log_probs, fd.data()) <= 1e-4);
  }
  gradcheck::SuiteOptions opt;
  opt.operational = opt.deformable = opt.primitives = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(gradcheck::run_suite(seed, opt).passed());
}

TEST_CASE("raising consistent-label probability never increases a single-path loss") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 4;
    LabelSeq y{{1, 2, 3}, k};
    const std::size_t t = required_frames(y);
    std::vector<double> lp = random_log_probs(t, k, rng);
    const double before = ctc_loss({lp, t, k}, y).loss;
    const std::size_t frame = std::uniform_int_distribution<std::size_t>(0, t - 1)(rng);
    const int label = y.labels[frame];
    std::vector<double> probs(k);
    for (std::size_t j = 0; j < k; ++j) probs[j] = std::exp(lp[frame * k + j]);
    probs[std::size_t(label)] += 0.3;
    double s = 0.0;
    for (double p : probs) s += p;
    for (std::size_t j = 0; j < k; ++j) lp[frame * k + j] = std::log(probs[j] / s);
    CHECK(ctc_loss({lp, t, k}, y).loss <= before + 1e-12);
  }
}

TEST_CASE("log-domain stability at T=500, K=100") {
  std::mt19937_64 rng(3);
  const std::size_t t = 500, k = 100;
  const std::vector<double> lp = random_log_probs(t, k, rng, 30.0);
  LabelSeq y{{}, k};
  for (int i = 0; i < 120; ++i) y.labels.push_back(1 + i % 99);
  const CtcResult r = ctc_loss({lp, t, k}, y);
  CHECK(std::isfinite(r.loss));
  CHECK(all_finite(r.grad_logits));
  CHECK(all_finite(r.grad_log_probs));
}

TEST_CASE("greedy_decode") {
  const auto frames = [](std::vector<int> argmax, std::size_t k) {
    std::vector<double> lp(argmax.size() * k, std::log(0.1));
    for (std::size_t i = 0; i < argmax.size(); ++i) lp[i * k + std::size_t(argmax[i])] = std::log(0.7);
    return lp;
  };
  const auto decode = [&](std::vector<int> argmax) {
    const std::vector<double> lp = frames(argmax, 4);
    return greedy_decode({lp, argmax.size(), 4}).labels;
  };
  CHECK(decode({1, 1, 0, 2}) == std::vector<int>{1, 2});
  CHECK(decode({0, 0, 0}).empty());
  CHECK(decode({1, 0, 1}) == std::vector<int>{1, 1});
  const std::vector<double> tie(4, std::log(0.25));
  CHECK(greedy_decode({tie, 1, 4}).labels.empty());
}

TEST_CASE("batch loss node averages and backpropagates softmax minus posterior") {
  std::mt19937_64 rng(13);
  const std::size_t t = 6, n = 3, k = 4;
  std::vector<double> z(t * n * k);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : z) v = d(rng);
  Tensor logits({t, n, k}, z, true);
  const std::vector<LabelSeq> ys = {{{1, 2}, k}, {{3}, k}, {{1, 1, 2}, k}};
  Tape tape;
  const Tensor lp = log_softmax(tape, logits, 2);
  const Tensor loss = ctc_loss_batch(tape, lp, ys);
  double expected = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> rows;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < k; ++j) rows.push_back(lp.at((i * n + b) * k + j));
    const CtcResult r = ctc_loss({rows, t, k}, ys[b]);
    expected += r.loss / double(n);
  }
  CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-14));
  tape.backward(loss);
  CHECK(gradcheck::check_leaf([&](Tape& tp) { return ctc_loss_batch(tp, log_softmax(tp, logits, 2), ys); }, logits) <=
        1e-4);
  CHECK_THROWS(ctc_loss_batch(tape, lp, {ys[0]}));
}
