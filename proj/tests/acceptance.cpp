// One PASS/FAIL line per acceptance criterion; exits 1 if any line fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cli_runner.hpp"
#include "json.hpp"
#include "sonn/ctc.hpp"
#include "sonn/gradcheck.hpp"
#include "sonn/metrics.hpp"
#include "sonn/model.hpp"
#include "sonn/trainer.hpp"

using namespace sonn;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- CTC

std::vector<double> random_log_probs(std::size_t t, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.01, 1.0);
  std::vector<double> out(t * k);
  for (std::size_t i = 0; i < t; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += out[i * k + j] = d(rng);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = std::log(out[i * k + j] / s);
  }
  return out;
}

void ctc_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1000);
  double worst = 0.0;
  std::size_t done = 0;
  while (done < 1000) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    ctc::LabelSeq y{{}, k};
    const std::size_t len = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    for (std::size_t i = 0; i < len; ++i) y.labels.push_back(std::uniform_int_distribution<int>(1, int(k) - 1)(rng));
    if (ctc::required_frames(y) > t) continue;
    const std::vector<double> lp = random_log_probs(t, k, rng);
    worst = std::max(worst, std::abs(ctc::ctc_loss({lp, t, k}, y).loss - ctc::brute_force_ctc({lp, t, k}, y)));
    ++done;
  }
  const double secs = seconds_since(t0);
  report(worst <= 1e-9 && secs < 60.0, "CTC oracle equivalence",
         "1000 instances, max |loss - enumeration| = " + fmt("%.3e", worst) + " (tol 1e-9), " + fmt("%.2f", secs) + " s");
}

// ---------------------------------------------------------------- gradients

void gradient_suites() {
  const auto t0 = std::chrono::steady_clock::now();
  gradcheck::Report all;
  const std::uint64_t seeds = 20;
  for (std::uint64_t s = 1; s <= seeds; ++s) all.merge(gradcheck::run_suite(s));
  const double secs = seconds_since(t0);
  std::string worst_name;
  double worst_ratio = 0.0;
  for (const auto& c : all.components) {
    const double ratio = c.max_rel_error / c.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_name = c.name + " " + fmt("%.3e", c.max_rel_error) + " (tol " + fmt("%.0e", c.tolerance) + ")";
    }
  }
  report(all.passed() && secs < 300.0, "Gradient suites",
         std::to_string(all.components.size()) + " components x " + std::to_string(seeds) + " seeds, worst " + worst_name +
             ", " + fmt("%.1f", secs) + " s");
}

void degeneracy() {
  double q1 = 0.0, zero = 0.0;
  for (std::uint64_t s = 1; s <= 20; ++s) {
    q1 = std::max(q1, gradcheck::q1_equivalence(s));
    zero = std::max(zero, gradcheck::zero_offset_equivalence(s));
  }
  report(q1 <= 1e-12 && zero <= 1e-10, "Degeneracy",
         "Self-ONN Q=1 vs convolution max abs diff " + fmt("%.3e", q1) + " (tol 1e-12); zero-offset deformable " +
             fmt("%.3e", zero) + " (tol 1e-10); 20 seeds");
}

// ---------------------------------------------------------------- metrics

std::vector<std::string> all_strings(std::size_t max_len) {
  std::vector<std::string> out{""}, frontier{""};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::string> next;
    for (const auto& s : frontier)
      for (char c : std::string("abc")) next.push_back(s + c);
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

/// Edit distance by the textbook recursion, memoized on suffix positions.
std::size_t recursive_distance(const std::string& a, const std::string& b) {
  std::vector<int> memo((a.size() + 1) * (b.size() + 1), -1);
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size()) return int(b.size() - j);
    if (j == b.size()) return int(a.size() - i);
    int& m = memo[i * (b.size() + 1) + j];
    if (m >= 0) return m;
    return m = std::min({go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1)});
  };
  return std::size_t(go(0, 0));
}

std::vector<double> independent_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double below = 0.0, equal = 0.0;
    for (double w : v) {
      if (w < v[i]) below += 1.0;
      if (w == v[i]) equal += 1.0;
    }
    r[i] = below + (equal + 1.0) / 2.0;
  }
  return r;
}

double enumerated_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d, mags;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] - a[i] != 0.0) d.push_back(b[i] - a[i]);
  if (d.empty()) return 1.0;
  for (double v : d) mags.push_back(std::abs(v));
  const std::vector<double> ranks = independent_ranks(mags);
  double observed = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) observed += ranks[i];
  std::size_t le = 0, ge = 0;
  const std::size_t n = d.size();
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) w += ranks[i];
    if (w <= observed + 1e-9) ++le;
    if (w >= observed - 1e-9) ++ge;
  }
  const double total = std::ldexp(1.0, int(n));
  return std::min(1.0, 2.0 * std::min(double(le), double(ge)) / total);
}

void metrics_oracle() {
  const std::vector<std::string> strings = all_strings(6);
  std::size_t pairs = 0, mismatches = 0;
  for (const auto& a : strings) {
    for (const auto& b : strings) {
      ++pairs;
      if (metrics::levenshtein_of(a, b).distance != recursive_distance(a, b)) ++mismatches;
    }
  }
  const std::string ref = "if one walked slowly, between road and";
  const std::string hyp = "if are walked slanely, between Noad and";
  const std::size_t cd = metrics::char_edits(ref, hyp).distance, wd = metrics::word_edits(ref, hyp).distance;

  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> level(0, 8);
  std::size_t fixtures = 0;
  double worst_p = 0.0;
  for (std::size_t n = 1; n <= 10; ++n) {
    for (int rep = 0; rep < 30; ++rep) {
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = level(rng) / 8.0;
        b[i] = level(rng) / 8.0;
      }
      const metrics::WilcoxonResult r = metrics::wilcoxon_signed_rank({a, b});
      worst_p = std::max(worst_p, std::abs(r.p_two_tailed - enumerated_p(a, b)));
      ++fixtures;
    }
  }
  report(mismatches == 0 && cd == 6 && wd == 3 && worst_p <= 1e-12, "Metrics oracle",
         std::to_string(pairs) + " string pairs (len <= 6, 3 symbols), " + std::to_string(mismatches) +
             " mismatches; reference pair CER distance " + std::to_string(cd) + ", WER distance " + std::to_string(wd) +
             "; Wilcoxon exact p vs enumeration over " + std::to_string(fixtures) + " fixtures (n <= 10), max diff " +
             fmt("%.1e", worst_p));
}

// ---------------------------------------------------------------- parameters

std::size_t hand_count(const ModelConfig& cfg) {
  std::size_t total = 0, channels = 1;
  for (const BackboneGroup& group : cfg.backbone_groups) {
    for (std::size_t b = 0; b < group.num_blocks; ++b) {
      std::size_t in = channels;
      for (const LayerSpec& s : group.layers) {
        total += std::size_t(s.q_order) * s.filters * in * 9 + s.filters + 2 * s.filters;
        if (s.kind == LayerKind::kDeformable) total += 18 * in * 9 + 18;
        in = s.filters;
      }
      const std::size_t out = group.layers[0].filters;
      if (channels != out) total += out * channels + out;
      channels = out;
    }
  }
  for (std::size_t i = 0; i < cfg.head_layers.size(); ++i) {
    const LayerSpec& s = cfg.head_layers[i];
    total += std::size_t(s.q_order) * s.filters * channels * 3 + s.filters;
    if (i + 1 < cfg.head_layers.size()) total += 2 * s.filters;
    channels = s.filters;
  }
  return total;
}

void parameter_counting() {
  bool layer_ok = true;
  for (int q = 1; q <= 9; ++q) {
    const OperationalConv2D conv(4, 6, 1), onn(4, 6, q);
    layer_ok = layer_ok && onn.parameter_count() == std::size_t(q) * conv.weights.numel() + onn.bias.numel();
  }
  layer_ok = layer_ok && OperationalConv2D(1, 8, 1).parameter_count() == 80 &&
             OperationalConv2D(1, 8, 3).parameter_count() == 224;

  bool model_ok = true;
  std::vector<ModelConfig> configs = {desk_conv_config(11), desk_selfonn_config(11, 3, 9),
                                      full_size_config(80, LayerKind::kConv, 1)};
  ModelConfig deform = desk_conv_config(11);
  deform.backbone_groups[0].layers[1].kind = LayerKind::kDeformable;
  configs.push_back(deform);
  for (const ModelConfig& c : configs) model_ok = model_ok && Model(c, 1).count_parameters() == hand_count(c);

  // Same shape with Q cycling 3, 5, 7 over successive layers.
  const ModelConfig conv = full_size_config(80, LayerKind::kConv, 1);
  ModelConfig onn = full_size_config(80, LayerKind::kSelfOnn, 3);
  int next_q = 0;
  const auto cycle = [&](LayerSpec& s) { s.q_order = 3 + 2 * (next_q++ % 3); };
  for (BackboneGroup& g : onn.backbone_groups)
    for (LayerSpec& s : g.layers) cycle(s);
  for (LayerSpec& s : onn.head_layers) cycle(s);
  const double conv_n = double(hand_count(conv)), onn_n = double(hand_count(onn));
  const double ratio = onn_n / conv_n, published_ratio = 29943056.0 / 6890768.0;
  const bool trend_ok = onn_n > conv_n && ratio >= 3.0 && ratio <= 7.0;
  report(layer_ok && model_ok && trend_ok, "Parameter counting",
         std::string("layer Q x conv + bias ") + (layer_ok ? "ok" : "WRONG") + "; hand oracle on " +
             std::to_string(configs.size()) + " models " + (model_ok ? "ok" : "WRONG") + "; full-size conv " +
             fmt("%.0f", conv_n) + " vs Self-ONN(3,5,7) " + fmt("%.0f", onn_n) + ", ratio " + fmt("%.2f", ratio) +
             " (published ratio " + fmt("%.2f", published_ratio) + ")");
}

// ---------------------------------------------------------------- training

data::Dataset desk_dataset(std::uint64_t seed, const ModelConfig& model) {
  data::SynthOptions opt;
  opt.count = 500;
  opt.min_length = 3;
  opt.max_length = 8;
  opt.seed = seed;
  opt.height = model.input_height;
  opt.pool_factor = Model(model, 0).min_width();
  return data::generate_dataset(opt, data::Alphabet::from_utf8("abcdefghij"));
}

double best_of(const train::TrainResult& r) {
  double best = 1e9;
  for (const auto& row : r.log) best = std::min(best, row.val_cer);
  return best;
}

void desk_end_to_end() {
  const ModelConfig cfg = desk_conv_config(11);
  const data::Dataset d = desk_dataset(1, cfg);
  Model model(cfg, 1);
  train::TrainConfig tc;  // defaults: lr 1e-3, batch 12, 50 epochs
  const auto t0 = std::chrono::steady_clock::now();
  const train::TrainResult r = train::train(model, d, tc);
  const double secs = seconds_since(t0);
  const double best = best_of(r);
  std::size_t first_under = 0;
  for (const auto& row : r.log) {
    if (row.val_cer <= 0.10) {
      first_under = row.epoch;
      break;
    }
  }

  // Overfit: ten samples memorized.
  data::Dataset tiny = d;
  tiny.train.resize(10);
  tiny.val = tiny.train;
  Model small(cfg, 2);
  train::TrainConfig oc;
  oc.epochs = 200;
  oc.batch_size = 2;
  oc.early_stop_cer = 0.0;
  const train::TrainResult ro = train::train(small, tiny, oc);
  const double overfit_cer = train::evaluate(small, tiny.train, tiny.alphabet).cer;

  report(best <= 0.10 && secs <= 900.0 && overfit_cer == 0.0, "Desk-scale end-to-end",
         "500 lines, best val CER " + fmt("%.4f", best) + " (<= 0.10 first at epoch " + std::to_string(first_under) +
             "), 50 epochs in " + fmt("%.1f", secs) + " s (<= 900); overfit 10 samples train CER " +
             fmt("%.4f", overfit_cer) + " after " + std::to_string(ro.log.size()) + " epochs");
}

void directional() {
  const ModelConfig conv = desk_conv_config(11);
  const ModelConfig onn = desk_selfonn_config(11, 3, 9);
  std::vector<double> conv_cer, onn_cer;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    train::TrainConfig tc;
    tc.seed = seed;
    tc.early_stop_cer = 0.0;  // best CER cannot improve past zero
    const data::Dataset d = desk_dataset(100 + seed, conv);
    Model a(conv, seed), b(onn, seed);
    conv_cer.push_back(best_of(train::train(a, d, tc)));
    train::TrainConfig to = tc;
    to.grad_clip = 5.0;
    onn_cer.push_back(best_of(train::train(b, d, to)));
    detail += " seed " + std::to_string(seed) + ": conv " + fmt("%.4f", conv_cer.back()) + ", Self-ONN " +
              fmt("%.4f", onn_cer.back()) + ";";
  }
  std::sort(conv_cer.begin(), conv_cer.end());
  std::sort(onn_cer.begin(), onn_cer.end());
  const std::size_t conv_params = Model(conv, 0).count_parameters(), onn_params = Model(onn, 0).count_parameters();
  report(onn_cer[1] <= conv_cer[1], "Directional Self-ONN vs conv",
         "median best val CER Self-ONN " + fmt("%.4f", onn_cer[1]) + " vs conv " + fmt("%.4f", conv_cer[1]) + " (params " +
             std::to_string(onn_params) + " vs " + std::to_string(conv_params) + ");" + detail);
}

/// Number of frame-level paths that collapse to `y` in `t` frames.
double count_alignments(const ctc::LabelSeq& y, std::size_t t) {
  std::vector<int> ext{0};
  for (int l : y.labels) {
    ext.push_back(l);
    ext.push_back(0);
  }
  const std::size_t s = ext.size();
  std::vector<double> cur(s, 0.0), next(s);
  cur[0] = 1.0;
  if (s > 1) cur[1] = 1.0;
  for (std::size_t f = 1; f < t; ++f) {
    for (std::size_t i = 0; i < s; ++i) {
      double v = cur[i];
      if (i >= 1) v += cur[i - 1];
      if (i >= 2 && ext[i] != 0 && ext[i] != ext[i - 2]) v += cur[i - 2];
      next[i] = v;
    }
    std::swap(cur, next);
  }
  return cur[s - 1] + (s > 1 ? cur[s - 2] : 0.0);
}

void untrained_loss() {
  const ModelConfig cfg = desk_conv_config(11);
  const data::Dataset d = desk_dataset(1, cfg);
  Model model(cfg, 1);
  // Zero output layer: every frame is exactly uniform.
  HeadLayer& out = model.head().back();
  for (double& w : out.op.weights.mutable_data()) w = 0.0;
  for (double& b : out.op.bias.mutable_data()) b = 0.0;

  const double lnk = std::log(double(cfg.alphabet_size));
  double tlnk_sum = 0.0, exact_worst = 0.0;
  for (const auto& s : d.train) {
    const std::size_t t = model.output_frames(s.image.dim(2));
    tlnk_sum += double(t) * lnk;
    Tape tape;
    const Tensor lp = model.forward(tape, reshape(tape, s.image, {1, 1, s.image.dim(1), s.image.dim(2)}), false);
    const double loss = ctc::ctc_loss({lp.data(), t, cfg.alphabet_size}, s.labels).loss;
    exact_worst = std::max(exact_worst, std::abs(loss - (double(t) * lnk - std::log(count_alignments(s.labels, t)))));
  }
  const double n = double(d.train.size());
  const double mean_loss = train::mean_ctc_loss(model, d.train), mean_tlnk = tlnk_sum / n;
  const double rel = std::abs(mean_loss - mean_tlnk) / mean_tlnk;
  report(rel <= 0.05, "Untrained-loss sanity",
         "mean epoch-0 loss " + fmt("%.4f", mean_loss) + " vs mean T*ln(K) " + fmt("%.4f", mean_tlnk) + ", off by " +
             fmt("%.1f", 100.0 * rel) + "% (tol 5%)");
  report(exact_worst <= 1e-9, "Untrained-loss exact value",
         "per-sample loss equals T*ln(K) - ln(#alignments), max abs diff " + fmt("%.2e", exact_worst));
}

// ---------------------------------------------------------------- reproducibility

std::string strip_last_column(const std::string& text) {
  std::string out;
  for (const std::string& line : sonn::testing::lines_of(text)) out += line.substr(0, line.rfind('\t')) + "\n";
  return out;
}

void reproducibility() {
  sonn::testing::ScratchDir dir("acceptance_repro");
  const nlohmann::json cfg = {
      {"model", {{"preset", "desk_selfonn"}}},
      {"train", {{"epochs", 3}, {"seed", 7}, {"checkpoint_every", 1}}},
      {"data", {{"synth", {{"count", 120}, {"alphabet", "abcdefghij"}, {"seed", 7}}}}}};
  std::ofstream(dir.path / "run.json") << cfg.dump(2);
  bool ran = true;
  for (const char* name : {"a", "b"}) {
    const auto r = sonn::testing::run_cli(
        {"train", "--config", (dir.path / "run.json").string(), "--out", (dir.path / name).string(), "--threads", "1"},
        dir.path / (std::string("log_") + name));
    ran = ran && r.exit_code == 0;
  }
  bool ckpt_same = ran;
  for (const char* f : {"last.ckpt", "best_cer.ckpt", "best_wer.ckpt", "config.resolved"}) {
    const std::string a = sonn::testing::slurp(dir.path / "a" / f), b = sonn::testing::slurp(dir.path / "b" / f);
    ckpt_same = ckpt_same && !a.empty() && a == b;
  }
  const std::string la = sonn::testing::slurp(dir.path / "a" / "log.tsv"), lb = sonn::testing::slurp(dir.path / "b" / "log.tsv");
  const bool logs_same = ran && !la.empty() && strip_last_column(la) == strip_last_column(lb);
  report(ckpt_same && logs_same, "Reproducibility",
         std::string("two CLI train runs, --threads 1: checkpoints ") + (ckpt_same ? "byte-identical" : "DIFFER") +
             ", logs " + (logs_same ? "identical" : "DIFFER") + " apart from the wall_seconds column" +
             (la == lb ? "" : " (which differs, as wall time does)"));
}

}  // namespace

int main() {
  ctc_oracle();
  gradient_suites();
  degeneracy();
  metrics_oracle();
  parameter_counting();
  untrained_loss();
  reproducibility();
  desk_end_to_end();
  directional();
  std::printf("%d criterion line(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
