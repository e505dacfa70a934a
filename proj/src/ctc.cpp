#include "sonn/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sonn::ctc {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(std::min(a, b) - mx));
}

void check_shape(const FrameLogProbs& lp) {
  if (lp.frames == 0 || lp.classes == 0 || lp.values.size() != lp.frames * lp.classes) {
    throw std::invalid_argument("log-probability view does not match T x K = " + std::to_string(lp.frames) + " x " +
                                std::to_string(lp.classes));
  }
}

}  // namespace

void LabelSeq::validate() const {
  for (int label : labels) {
    if (label == kBlank) throw std::invalid_argument("target contains the blank label");
    if (label < 0 || static_cast<std::size_t>(label) >= alphabet_size) {
      throw std::invalid_argument("label " + std::to_string(label) + " out of range for alphabet size " +
                                  std::to_string(alphabet_size));
    }
  }
}

AugmentedSeq augment_labels(const LabelSeq& y) {
  AugmentedSeq out;
  out.labels.reserve(2 * y.size() + 1);
  out.labels.push_back(kBlank);
  for (int label : y.labels) {
    out.labels.push_back(label);
    out.labels.push_back(kBlank);
  }
  return out;
}

std::size_t required_frames(const LabelSeq& y) {
  std::size_t frames = y.size();
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y.labels[i] == y.labels[i - 1]) ++frames;
  }
  return frames;
}

CtcTables forward_backward(const FrameLogProbs& lp, const AugmentedSeq& target) {
  check_shape(lp);
  const std::size_t t_len = lp.frames;
  const std::size_t s_len = target.labels.size();
  const auto& z = target.labels;
  CtcTables tab;
  tab.frames = t_len;
  tab.states = s_len;
  tab.alpha.assign(t_len * s_len, kNegInf);
  tab.beta.assign(t_len * s_len, kNegInf);

  // A state may be entered from s-2 when it is a label that differs from the
  // label two states back (skipping the blank in between).
  auto can_skip = [&](std::size_t s) { return s >= 2 && z[s] != kBlank && z[s] != z[s - 2]; };

  tab.alpha[0] = lp.at(0, static_cast<std::size_t>(z[0]));
  if (s_len > 1) tab.alpha[1] = lp.at(0, static_cast<std::size_t>(z[1]));
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = tab.alpha[(t - 1) * s_len + s];
      if (s >= 1) acc = log_add(acc, tab.alpha[(t - 1) * s_len + s - 1]);
      if (can_skip(s)) acc = log_add(acc, tab.alpha[(t - 1) * s_len + s - 2]);
      tab.alpha[t * s_len + s] = acc == kNegInf ? kNegInf : acc + lp.at(t, static_cast<std::size_t>(z[s]));
    }
  }

  // beta_t(s) includes the emission at frame t, so alpha * beta double counts
  // it; posteriors divide it back out (the log-domain form of dividing by
  // q_t(z_s)).
  const std::size_t last = t_len - 1;
  tab.beta[last * s_len + s_len - 1] = lp.at(last, static_cast<std::size_t>(z[s_len - 1]));
  if (s_len > 1) tab.beta[last * s_len + s_len - 2] = lp.at(last, static_cast<std::size_t>(z[s_len - 2]));
  for (std::size_t t = last; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = tab.beta[(t + 1) * s_len + s];
      if (s + 1 < s_len) acc = log_add(acc, tab.beta[(t + 1) * s_len + s + 1]);
      if (s + 2 < s_len && can_skip(s + 2)) acc = log_add(acc, tab.beta[(t + 1) * s_len + s + 2]);
      tab.beta[t * s_len + s] = acc == kNegInf ? kNegInf : acc + lp.at(t, static_cast<std::size_t>(z[s]));
    }
  }

  tab.log_likelihood_alpha = tab.alpha[last * s_len + s_len - 1];
  if (s_len > 1) tab.log_likelihood_alpha = log_add(tab.log_likelihood_alpha, tab.alpha[last * s_len + s_len - 2]);
  tab.log_likelihood_beta = tab.beta[0];
  if (s_len > 1) tab.log_likelihood_beta = log_add(tab.log_likelihood_beta, tab.beta[1]);
  return tab;
}

CtcResult ctc_loss(const FrameLogProbs& lp, const LabelSeq& y) {
  check_shape(lp);
  if (y.alphabet_size != lp.classes) {
    throw std::invalid_argument("target alphabet size " + std::to_string(y.alphabet_size) +
                                " does not match K = " + std::to_string(lp.classes));
  }
  y.validate();
  const std::size_t need = required_frames(y);
  if (need > lp.frames) {
    throw std::invalid_argument("target needs " + std::to_string(need) + " frames but only " +
                                std::to_string(lp.frames) + " are available");
  }
  const AugmentedSeq aug = augment_labels(y);
  CtcResult res;
  res.tables = forward_backward(lp, aug);
  const double ll = res.tables.log_likelihood_alpha;
  if (ll == kNegInf) throw std::invalid_argument("target has zero probability under the given frames");
  res.loss = -ll;

  const std::size_t t_len = lp.frames, k_len = lp.classes, s_len = aug.labels.size();
  std::vector<double> log_post(t_len * k_len, kNegInf);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      const double a = res.tables.alpha[t * s_len + s];
      const double b = res.tables.beta[t * s_len + s];
      if (a == kNegInf || b == kNegInf) continue;
      const auto k = static_cast<std::size_t>(aug.labels[s]);
      log_post[t * k_len + k] = log_add(log_post[t * k_len + k], a + b - lp.at(t, k));
    }
  }
  res.grad_log_probs.resize(t_len * k_len);
  res.grad_logits.resize(t_len * k_len);
  for (std::size_t i = 0; i < t_len * k_len; ++i) {
    const double post = log_post[i] == kNegInf ? 0.0 : std::exp(log_post[i] - ll);
    res.grad_log_probs[i] = -post;
    res.grad_logits[i] = std::exp(lp.values[i]) - post;
  }
  return res;
}

double brute_force_ctc(const FrameLogProbs& lp, const LabelSeq& y) {
  check_shape(lp);
  const double paths = std::pow(static_cast<double>(lp.classes), static_cast<double>(lp.frames));
  if (paths > 1e7) throw std::invalid_argument("brute-force CTC instance too large (K^T > 1e7)");
  const std::size_t total = static_cast<std::size_t>(paths);
  std::vector<std::size_t> path(lp.frames, 0);
  std::vector<int> collapsed;
  double prob = 0.0;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rest = idx;
    for (std::size_t t = lp.frames; t-- > 0;) {
      path[t] = rest % lp.classes;
      rest /= lp.classes;
    }
    collapsed.clear();
    int prev = -1;
    for (std::size_t t = 0; t < lp.frames; ++t) {
      const int label = static_cast<int>(path[t]);
      if (label != prev && label != kBlank) collapsed.push_back(label);
      prev = label;
    }
    if (collapsed != y.labels) continue;
    double logp = 0.0;
    for (std::size_t t = 0; t < lp.frames; ++t) logp += lp.at(t, path[t]);
    prob += std::exp(logp);
  }
  if (prob == 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(prob);
}

LabelSeq greedy_decode(const FrameLogProbs& lp) {
  check_shape(lp);
  LabelSeq out;
  out.alphabet_size = lp.classes;
  int prev = -1;
  for (std::size_t t = 0; t < lp.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < lp.classes; ++k) {
      if (lp.at(t, k) > lp.at(t, best)) best = k;
    }
    const int label = static_cast<int>(best);
    if (label != prev && label != kBlank) out.labels.push_back(label);
    prev = label;
  }
  return out;
}

Tensor ctc_loss_batch(Tape& tape, const Tensor& log_probs, const std::vector<LabelSeq>& targets) {
  if (log_probs.rank() != 3) {
    throw std::invalid_argument("ctc_loss_batch expects [T,N,K], got " + shape_str(log_probs.shape()));
  }
  const std::size_t t_len = log_probs.dim(0), n = log_probs.dim(1), k_len = log_probs.dim(2);
  if (targets.size() != n) {
    throw std::invalid_argument("batch has " + std::to_string(n) + " samples but " + std::to_string(targets.size()) +
                                " targets");
  }
  auto lpd = log_probs.data();
  std::vector<double> frame(t_len * k_len);
  std::vector<double> grad(log_probs.numel(), 0.0);
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = 0; k < k_len; ++k) frame[t * k_len + k] = lpd[(t * n + i) * k_len + k];
    const CtcResult r = ctc_loss(FrameLogProbs{frame, t_len, k_len}, targets[i]);
    total += r.loss;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = 0; k < k_len; ++k) grad[(t * n + i) * k_len + k] = scale * r.grad_log_probs[t * k_len + k];
  }
  Tensor loss = Tensor::from_op({1}, {total * scale}, false);
  tape.record({log_probs}, loss, [log_probs, grad = std::move(grad)](std::span<const double> g) mutable {
    auto gl = log_probs.grad_mut();
    for (std::size_t i = 0; i < grad.size(); ++i) gl[i] += g[0] * grad[i];
  });
  return loss;
}

}  // namespace sonn::ctc
