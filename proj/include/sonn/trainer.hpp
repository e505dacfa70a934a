#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sonn/checkpoint.hpp"
#include "sonn/data.hpp"
#include "sonn/model.hpp"

namespace sonn::train {

enum class Schedule { kConstant, kWarmupCosine };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 12;
  std::size_t epochs = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  std::optional<double> grad_clip;   // global-norm clip
  Schedule schedule = Schedule::kConstant;
  std::optional<double> early_stop_cer;  // stop once validation CER <= this
  std::size_t threads = 1;               // evaluation fan-out

  /// Throws ConfigError on lr < 0, batch_size 0 or invalid Adam constants.
  void validate() const;
};

/// Adam state for a model's parameters plus best-model bookkeeping.
struct TrainState {
  std::vector<Tensor> params;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t skipped_batches = 0;
  double best_cer = std::numeric_limits<double>::infinity();
  double best_wer = std::numeric_limits<double>::infinity();

  static TrainState for_model(const Model& model);
  OptimizerSnapshot snapshot() const;
  /// Throws std::invalid_argument when moment shapes do not match.
  void restore(const OptimizerSnapshot& snap);
};

/// Learning rate for 0-based `step` out of `total_steps`: constant, or 5%
/// linear warmup followed by cosine decay to zero.
double learning_rate_at(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps);

/// One bias-corrected Adam update of state.params from `grads` (one buffer
/// per parameter, same order), after optional global-norm clipping. A batch
/// with any non-finite gradient is skipped: parameters and moments stay put,
/// skipped_batches is incremented and false is returned. The step counter
/// advances on every applied update.
bool adam_step(TrainState& state, const std::vector<std::vector<double>>& grads, const TrainConfig& cfg, double lr);

/// Gradients currently held by the parameters (zeros where none).
std::vector<std::vector<double>> collect_grads(const std::vector<Tensor>& params);

struct EvalItem {
  std::string path;
  std::string reference;
  std::string hypothesis;
  double cer = 0.0;
  double wer = 0.0;
};

struct EvalResult {
  double cer = 0.0;
  double wer = 0.0;
  std::vector<EvalItem> items;
};

/// Greedy-decodes every sample in eval mode and scores it. Side-effect free
/// on the model; `threads` > 1 splits samples across worker threads.
EvalResult evaluate(Model& model, const std::vector<data::LineSample>& samples, const data::Alphabet& alphabet,
                    std::size_t threads = 1);

/// Right-pads images to the widest one with background (1.0): [N, 1, H, W].
Tensor stack_batch(const std::vector<const data::LineSample*>& samples);

/// Mean per-sample CTC loss without updating anything (eval-mode BN).
double mean_ctc_loss(Model& model, const std::vector<data::LineSample>& samples);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_cer = 0.0;
  double val_wer = 0.0;
  double wall_seconds = 0.0;
};

/// "epoch<TAB>train_loss<TAB>val_CER<TAB>val_WER<TAB>wall_seconds".
std::string format_log_line(const EpochLog& row);

struct TrainHooks {
  std::function<void(const EpochLog&, const Model&, const TrainState&)> on_epoch;
  std::function<void(const std::string&)> on_warning;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochLog> log;
  std::vector<std::uint8_t> best_cer_checkpoint;
  std::vector<std::uint8_t> best_wer_checkpoint;
  std::size_t skipped_samples = 0;
};

/// Runs epochs state.epoch+1 .. cfg.epochs: seeded shuffle, width-bucketed
/// batches, mean CTC loss, Adam, then validation CER/WER. Keeps the best-CER
/// and best-WER models as serialized checkpoints; each stays empty when no
/// epoch of this call improved on the (possibly resumed) best. Samples whose frame count
/// cannot carry their labels are skipped; throws when none remain.
TrainResult train(Model& model, const data::Dataset& dataset, const TrainConfig& cfg, const TrainHooks& hooks = {},
                  const std::optional<OptimizerSnapshot>& resume = std::nullopt);

}  // namespace sonn::train
