#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sonn/tape.hpp"
#include "sonn/tensor.hpp"

namespace sonn::ctc {

/// Label 0 is reserved for the blank symbol.
inline constexpr int kBlank = 0;

/// Target label sequence over an alphabet of `alphabet_size` classes,
/// blank included.
struct LabelSeq {
  std::vector<int> labels;
  std::size_t alphabet_size = 0;

  /// Throws std::invalid_argument on blank or out-of-range labels.
  void validate() const;
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelSeq&) const = default;
};

/// Target with blanks at both ends and between every label: 2U+1 entries.
struct AugmentedSeq {
  std::vector<int> labels;
};

AugmentedSeq augment_labels(const LabelSeq& y);

/// Minimum number of frames able to emit `y`: one per label plus one blank
/// between each pair of equal neighbors.
std::size_t required_frames(const LabelSeq& y);

/// Row-major [T, K] view of per-frame log-probabilities.
struct FrameLogProbs {
  std::span<const double> values;
  std::size_t frames = 0;
  std::size_t classes = 0;

  double at(std::size_t t, std::size_t k) const { return values[t * classes + k]; }
};

/// Log-domain forward/backward lattices over the augmented target.
struct CtcTables {
  std::size_t frames = 0;
  std::size_t states = 0;         // 2U + 1
  std::vector<double> alpha;      // [T, S]
  std::vector<double> beta;       // [T, S]
  double log_likelihood_alpha = 0.0;
  double log_likelihood_beta = 0.0;

  double alpha_at(std::size_t t, std::size_t s) const { return alpha[t * states + s]; }
  double beta_at(std::size_t t, std::size_t s) const { return beta[t * states + s]; }
};

struct CtcResult {
  double loss = 0.0;
  /// d loss / d log_probs: minus the posterior occupancy of each class.
  std::vector<double> grad_log_probs;
  /// d loss / d logits when log_probs = log_softmax(logits): softmax minus
  /// posterior occupancy.
  std::vector<double> grad_logits;
  CtcTables tables;
};

CtcTables forward_backward(const FrameLogProbs& log_probs, const AugmentedSeq& target);

/// Negative log-likelihood of `y` with its gradients.
/// Throws std::invalid_argument when labels are out of range or `y` needs more
/// frames than available.
CtcResult ctc_loss(const FrameLogProbs& log_probs, const LabelSeq& y);

/// Reference loss by enumerating every path in K^T. Returns +inf when no path
/// collapses to `y`. Throws when K^T exceeds 1e7.
double brute_force_ctc(const FrameLogProbs& log_probs, const LabelSeq& y);

/// Best-path decoding: per-frame argmax (lowest index on ties), merge
/// repeats, drop blanks.
LabelSeq greedy_decode(const FrameLogProbs& log_probs);

/// Mean CTC loss of a batch of time-major log-probabilities [T, N, K]
/// recorded on the tape.
Tensor ctc_loss_batch(Tape& tape, const Tensor& log_probs, const std::vector<LabelSeq>& targets);

}  // namespace sonn::ctc
