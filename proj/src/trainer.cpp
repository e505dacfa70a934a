#include "sonn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <thread>

#include "sonn/ctc.hpp"
#include "sonn/metrics.hpp"

namespace sonn::train {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (early_stop_cer && !(*early_stop_cer >= 0.0)) throw ConfigError("early_stop_cer must be >= 0");
  if (threads == 0) throw ConfigError("threads must be positive");
}

TrainState TrainState::for_model(const Model& model) {
  TrainState s;
  s.params = model.parameters();
  for (const Tensor& p : s.params) {
    s.first_moment.emplace_back(p.numel(), 0.0);
    s.second_moment.emplace_back(p.numel(), 0.0);
  }
  return s;
}

OptimizerSnapshot TrainState::snapshot() const {
  OptimizerSnapshot snap;
  snap.step = step;
  snap.epoch = epoch;
  snap.skipped_batches = skipped_batches;
  snap.best_cer = best_cer;
  snap.best_wer = best_wer;
  for (std::size_t i = 0; i < params.size(); ++i) {
    snap.first_moment.emplace_back(params[i].shape(), first_moment[i]);
    snap.second_moment.emplace_back(params[i].shape(), second_moment[i]);
  }
  return snap;
}

void TrainState::restore(const OptimizerSnapshot& snap) {
  if (snap.first_moment.size() != params.size() || snap.second_moment.size() != params.size()) {
    throw std::invalid_argument("optimizer snapshot does not match the model's parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (snap.first_moment[i].shape() != params[i].shape() || snap.second_moment[i].shape() != params[i].shape()) {
      throw std::invalid_argument("optimizer moment shape mismatch at parameter " + std::to_string(i));
    }
    auto m = snap.first_moment[i].data();
    auto v = snap.second_moment[i].data();
    first_moment[i].assign(m.begin(), m.end());
    second_moment[i].assign(v.begin(), v.end());
  }
  step = snap.step;
  epoch = snap.epoch;
  skipped_batches = snap.skipped_batches;
  best_cer = snap.best_cer;
  best_wer = snap.best_wer;
}

double learning_rate_at(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
  if (cfg.schedule == Schedule::kConstant || total_steps == 0) return cfg.learning_rate;
  const std::uint64_t warmup = std::max<std::uint64_t>(1, total_steps / 20);
  if (step < warmup) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<std::uint64_t>(1, total_steps - warmup)));
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::vector<std::vector<double>> collect_grads(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      auto g = p.grad();
      out.emplace_back(g.begin(), g.end());
    } else {
      out.emplace_back(p.numel(), 0.0);
    }
  }
  return out;
}

bool adam_step(TrainState& state, const std::vector<std::vector<double>>& grads, const TrainConfig& cfg, double lr) {
  if (grads.size() != state.params.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != state.params[i].numel()) throw std::invalid_argument("adam_step: gradient size mismatch");
    if (!all_finite(grads[i])) {
      ++state.skipped_batches;
      return false;
    }
    for (double g : grads[i]) sq_norm += g * g;
  }
  double scale = 1.0;
  if (cfg.grad_clip) {
    const double norm = std::sqrt(sq_norm);
    if (norm > *cfg.grad_clip) scale = *cfg.grad_clip / norm;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto w = state.params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j] * scale;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.epsilon);
    }
  }
  return true;
}

Tensor stack_batch(const std::vector<const data::LineSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const std::size_t h = samples.front()->image.dim(1);
  std::size_t w = 0;
  for (const auto* s : samples) {
    if (s->image.dim(1) != h) throw std::invalid_argument("stack_batch: images differ in height");
    w = std::max(w, s->image.dim(2));
  }
  std::vector<double> out(samples.size() * h * w, 1.0);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto src = samples[n]->image.data();
    const std::size_t sw = samples[n]->image.dim(2);
    for (std::size_t y = 0; y < h; ++y) {
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(y * sw), src.begin() + static_cast<std::ptrdiff_t>((y + 1) * sw),
                out.begin() + static_cast<std::ptrdiff_t>((n * h + y) * w));
    }
  }
  return Tensor({samples.size(), 1, h, w}, std::move(out));
}

namespace {

ctc::FrameLogProbs frames_of(const Tensor& out) {
  // out is [T, 1, K]
  return ctc::FrameLogProbs{out.data(), out.dim(0), out.dim(2)};
}

Tensor single_input(const data::LineSample& s) {
  const auto& shape = s.image.shape();
  return Tensor({1, shape[0], shape[1], shape[2]}, std::vector<double>(s.image.data().begin(), s.image.data().end()));
}

EvalItem evaluate_one(Model& model, const data::LineSample& s, const data::Alphabet& alphabet) {
  Tape tape;
  const Tensor out = model.forward(tape, single_input(s), false);
  ctc::LabelSeq decoded = ctc::greedy_decode(frames_of(out));
  decoded.alphabet_size = alphabet.size();
  EvalItem item;
  item.path = s.path;
  item.reference = s.transcript;
  item.hypothesis = alphabet.decode(decoded);
  item.cer = metrics::cer(item.reference, item.hypothesis);
  item.wer = metrics::wer(item.reference, item.hypothesis);
  return item;
}

}  // namespace

EvalResult evaluate(Model& model, const std::vector<data::LineSample>& samples, const data::Alphabet& alphabet,
                    std::size_t threads) {
  EvalResult result;
  result.items.resize(samples.size());
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) result.items[i] = evaluate_one(model, samples[i], alphabet);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < samples.size(); i += threads) {
            result.items[i] = evaluate_one(model, samples[i], alphabet);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  if (samples.empty()) return result;
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(samples.size());
  for (const auto& item : result.items) pairs.emplace_back(item.reference, item.hypothesis);
  const metrics::CorpusRates rates = metrics::corpus_error_rates(pairs);
  result.cer = rates.cer;
  result.wer = rates.wer;
  return result;
}

double mean_ctc_loss(Model& model, const std::vector<data::LineSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("mean_ctc_loss: no samples");
  double total = 0.0;
  for (const auto& s : samples) {
    Tape tape;
    const Tensor out = model.forward(tape, single_input(s), false);
    total += ctc::ctc_loss(frames_of(out), s.labels).loss;
  }
  return total / static_cast<double>(samples.size());
}

std::string format_log_line(const EpochLog& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.3f", row.epoch, row.train_loss, row.val_cer, row.val_wer,
                row.wall_seconds);
  return buf;
}

namespace {

/// Seeded shuffle, stable sort by width, chunk into batches, shuffle batch order.
std::vector<std::vector<const data::LineSample*>> make_batches(const std::vector<const data::LineSample*>& pool,
                                                               std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<const data::LineSample*> order = pool;
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->image.dim(2) < b->image.dim(2); });
  std::vector<std::vector<const data::LineSample*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace

TrainResult train(Model& model, const data::Dataset& dataset, const TrainConfig& cfg, const TrainHooks& hooks,
                  const std::optional<OptimizerSnapshot>& resume) {
  cfg.validate();
  const auto warn = [&](const std::string& msg) {
    if (hooks.on_warning) hooks.on_warning(msg);
  };

  TrainResult result;
  result.state = TrainState::for_model(model);
  TrainState& state = result.state;
  if (resume) state.restore(*resume);

  std::vector<const data::LineSample*> pool;
  for (const auto& s : dataset.train) {
    if (s.labels.alphabet_size != model.config().alphabet_size) {
      throw std::invalid_argument("training sample alphabet size " + std::to_string(s.labels.alphabet_size) +
                                  " does not match model alphabet size " +
                                  std::to_string(model.config().alphabet_size));
    }
    if (model.output_frames(s.image.dim(2)) < ctc::required_frames(s.labels)) {
      ++result.skipped_samples;
      warn("skipping sample '" + s.transcript + "': too few frames for its label sequence");
      continue;
    }
    pool.push_back(&s);
  }
  if (pool.empty()) throw std::invalid_argument("no trainable samples");

  const std::size_t batches_per_epoch = (pool.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = batches_per_epoch * cfg.epochs;

  for (std::size_t epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    // Per-epoch stream so a resumed run replays the same batch order.
    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const auto& batch : make_batches(pool, cfg.batch_size, rng)) {
      for (Tensor& p : state.params) p.zero_grad();
      Tape tape;
      const Tensor images = stack_batch(batch);
      const Tensor log_probs = model.forward(tape, images, true);
      std::vector<ctc::LabelSeq> targets;
      for (const auto* s : batch) targets.push_back(s->labels);
      const Tensor loss = ctc::ctc_loss_batch(tape, log_probs, targets);
      const double lv = loss.item();
      tape.backward(loss);
      const double lr = learning_rate_at(cfg, state.step + state.skipped_batches, total_steps);
      if (adam_step(state, collect_grads(state.params), cfg, lr) && std::isfinite(lv)) {
        loss_sum += lv * static_cast<double>(batch.size());
        loss_count += batch.size();
      } else {
        warn("epoch " + std::to_string(epoch) + ": skipped batch with non-finite loss or gradient");
      }
    }
    state.epoch = epoch;

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : std::nan("");
    if (!dataset.val.empty()) {
      const EvalResult ev = evaluate(model, dataset.val, dataset.alphabet, cfg.threads);
      row.val_cer = ev.cer;
      row.val_wer = ev.wer;
    } else {
      row.val_cer = row.val_wer = std::nan("");
    }
    if (row.val_cer < state.best_cer) {
      state.best_cer = row.val_cer;
      result.best_cer_checkpoint = serialize_checkpoint(model);
    }
    if (row.val_wer < state.best_wer) {
      state.best_wer = row.val_wer;
      result.best_wer_checkpoint = serialize_checkpoint(model);
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row, model, state);
    if (cfg.early_stop_cer && row.val_cer <= *cfg.early_stop_cer) break;
  }
  return result;
}

}  // namespace sonn::train
