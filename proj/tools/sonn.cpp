#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sonn/checkpoint.hpp"
#include "sonn/data.hpp"
#include "sonn/gradcheck.hpp"
#include "sonn/metrics.hpp"
#include "sonn/model.hpp"
#include "sonn/run_config.hpp"
#include "sonn/trainer.hpp"

namespace fs = std::filesystem;
using namespace sonn;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Bad invocation or configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  fs::path out;
  std::size_t n = 0;
  std::string alphabet_file;
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::uint64_t seed = 1;
  std::size_t height = 32;
};

int cmd_synth(const SynthArgs& a) {
  if (a.n == 0) throw UsageError("--n must be at least 1");
  if (a.min_len == 0 || a.min_len > a.max_len) throw UsageError("need 1 <= --min-len <= --max-len");
  const data::Alphabet alphabet =
      a.alphabet_file.empty() ? data::Alphabet::from_utf8("abcdefghij") : data::Alphabet::read(a.alphabet_file);
  data::SynthOptions o;
  o.count = a.n;
  o.min_length = a.min_len;
  o.max_length = a.max_len;
  o.seed = a.seed;
  o.height = a.height;
  data::Dataset ds = data::generate_dataset(o, alphabet);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw std::runtime_error("cannot create " + a.out.string() + ": " + ec.message());
  data::write_dataset(ds, a.out);
  std::cout << "train " << ds.train.size() << "\nval " << ds.val.size() << "\ntest " << ds.test.size() << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  fs::path config;
  fs::path out;
  std::optional<fs::path> resume;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

constexpr const char* kLogHeader = "epoch\ttrain_loss\tval_CER\tval_WER\twall_seconds\n";

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  data::Alphabet alphabet;
  ModelConfig model_cfg;
  try {
    rc = RunConfig::load(a.config);
    if (a.seed) rc.train.seed = *a.seed;
    rc.train.threads = a.threads;
    alphabet = rc.alphabet();
    model_cfg = rc.model_config(alphabet.size());
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  train::TrainConfig tcfg = rc.train_config(model_cfg);

  std::optional<OptimizerSnapshot> snapshot;
  std::optional<Model> model;
  if (a.resume) {
    LoadedCheckpoint ck = load_checkpoint(*a.resume);
    if (!(ck.model.config() == model_cfg)) throw UsageError("resume checkpoint was trained with a different model config");
    if (!ck.state) throw UsageError("resume checkpoint carries no optimizer state (use last.ckpt)");
    snapshot = std::move(ck.state);
    model.emplace(std::move(ck.model));
  } else {
    model.emplace(model_cfg, tcfg.seed);
  }
  const data::Dataset dataset = rc.load_dataset(model_cfg);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw std::runtime_error("cannot create run directory " + a.out.string() + ": " + ec.message());
  {
    std::ofstream cfg_out(a.out / "config.resolved");
    cfg_out << rc.resolved(model_cfg).dump(2) << "\n";
    if (!cfg_out) throw std::runtime_error("cannot write config.resolved");
  }
  const fs::path log_path = a.out / "log.tsv";
  std::ofstream log(log_path, a.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (!a.resume || fs::file_size(log_path) == 0) log << kLogHeader;
  log.flush();

  train::TrainHooks hooks;
  hooks.on_warning = [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };
  hooks.on_epoch = [&](const train::EpochLog& row, const Model& m, const train::TrainState& st) {
    const std::string line = train::format_log_line(row);
    log << line << "\n";
    log.flush();
    std::cout << line << "\n" << std::flush;
    if (tcfg.checkpoint_every && row.epoch % tcfg.checkpoint_every == 0) {
      const OptimizerSnapshot snap = st.snapshot();
      save_checkpoint(a.out / "last.ckpt", m, &snap);
    }
  };

  train::TrainResult result = train::train(*model, dataset, tcfg, hooks, snapshot);

  const OptimizerSnapshot snap = result.state.snapshot();
  save_checkpoint(a.out / "last.ckpt", *model, &snap);
  const auto write_best = [&](const char* name, const std::vector<std::uint8_t>& bytes) {
    if (!bytes.empty()) {
      write_bytes(a.out / name, bytes);
    } else if (!fs::exists(a.out / name)) {
      save_checkpoint(a.out / name, *model);
    }
  };
  write_best("best_cer.ckpt", result.best_cer_checkpoint);
  write_best("best_wer.ckpt", result.best_wer_checkpoint);

  std::cout << "best val CER " << fmt("%.6f", result.state.best_cer) << ", best val WER "
            << fmt("%.6f", result.state.best_wer) << ", steps " << result.state.step << ", skipped batches "
            << result.state.skipped_batches << ", skipped samples " << result.skipped_samples << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  fs::path checkpoint;
  fs::path manifest;
  std::optional<fs::path> per_item;
  bool raw = false;
  std::size_t threads = 1;
};

int cmd_eval(const EvalArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const data::Manifest manifest = data::load_manifest(a.manifest);
  if (manifest.alphabet.size() != ck.model.config().alphabet_size) {
    throw std::runtime_error("manifest alphabet has " + std::to_string(manifest.alphabet.size()) +
                             " classes, checkpoint expects " + std::to_string(ck.model.config().alphabet_size));
  }
  const std::vector<data::LineSample> samples = data::load_samples(manifest, ck.model.config().input_height);
  const train::EvalResult r = train::evaluate(ck.model, samples, manifest.alphabet, a.threads);
  if (a.raw) {
    std::cout << "CER\t" << fmt("%.6f", r.cer) << "\nWER\t" << fmt("%.6f", r.wer) << "\n";
  } else {
    std::cout << "CER\t" << fmt("%.3f", 100.0 * r.cer) << "\nWER\t" << fmt("%.3f", 100.0 * r.wer) << "\n";
  }
  if (a.per_item) {
    std::ofstream os(*a.per_item);
    if (!os) throw std::runtime_error("cannot write " + a.per_item->string());
    os << "path\tcer\twer\n";
    for (const auto& item : r.items) {
      os << item.path << "\t" << fmt("%.17g", item.cer) << "\t" << fmt("%.17g", item.wer) << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------- compare

struct PerItem {
  std::vector<std::string> paths;
  std::vector<double> cer;
  std::vector<double> wer;
};

PerItem read_per_item(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path.string());
  PerItem out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("path\t", 0) == 0) continue;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string p, c, w;
    if (!std::getline(fields, p, '\t') || !std::getline(fields, c, '\t') || !std::getline(fields, w, '\t')) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected path<TAB>cer<TAB>wer");
    }
    try {
      out.cer.push_back(std::stod(c));
      out.wer.push_back(std::stod(w));
    } catch (const std::exception&) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": non-numeric error rate");
    }
    out.paths.push_back(p);
  }
  if (out.paths.empty()) throw UsageError(path.string() + " holds no items");
  return out;
}

int cmd_compare(const fs::path& a_path, const fs::path& b_path) {
  const PerItem a = read_per_item(a_path);
  const PerItem b = read_per_item(b_path);
  if (a.paths != b.paths) throw UsageError("item sets differ (same paths in the same order required)");
  const metrics::WilcoxonResult c = metrics::wilcoxon_signed_rank({a.cer, b.cer});
  const metrics::WilcoxonResult w = metrics::wilcoxon_signed_rank({a.wer, b.wer});
  std::printf("%-24s%12s%12s\n", "", "CER", "WER");
  std::printf("%-24s%12.3f%12.3f\n", "Z", c.z, w.z);
  std::printf("%-24s%12.3f%12.3f\n", "Asymp. Sig. (2-tailed)", c.p_two_tailed, w.p_two_tailed);
  std::printf("%-24s%12zu%12zu\n", "non-zero pairs", c.nonzero, w.nonzero);
  std::printf("%-24s%12s%12s\n", "p method", c.exact ? "exact" : "normal", w.exact ? "exact" : "normal");
  return 0;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::optional<fs::path> config;
  std::uint64_t seed = 1;
  std::size_t seeds = 20;
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  gradcheck::SuiteOptions opt;
  std::size_t seeds = a.seeds;
  if (a.config) {
    std::ifstream is(*a.config);
    if (!is) throw UsageError("cannot open " + a.config->string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
      for (const auto& [key, v] : j.items()) {
        if (key == "q_orders") {
          opt.q_orders = v.get<std::vector<int>>();
        } else if (key == "seeds") {
          seeds = v.get<std::size_t>();
        } else if (key == "eps") {
          opt.eps = v.get<double>();
        } else if (key == "tolerance") {
          opt.tolerance = v.get<double>();
        } else if (key == "offset_tolerance") {
          opt.offset_tolerance = v.get<double>();
        } else if (key == "deformable") {
          opt.deformable = v.get<bool>();
        } else if (key == "primitives") {
          opt.primitives = v.get<bool>();
        } else if (key == "ctc") {
          opt.ctc = v.get<bool>();
        } else {
          throw UsageError("unknown gradcheck key '" + key + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("bad gradcheck config: ") + e.what());
    }
    for (int q : opt.q_orders) {
      if (q < 1) throw UsageError("q_orders must be >= 1");
    }
  }
  if (seeds == 0) throw UsageError("need at least one seed");
  if (a.inject_fault) opt.fault = gradcheck::Fault::kFlipSign;

  gradcheck::Report report;
  double q1 = 0.0, zero_offset = 0.0;
  for (std::uint64_t s = a.seed; s < a.seed + seeds; ++s) {
    report.merge(gradcheck::run_suite(s, opt));
    q1 = std::max(q1, gradcheck::q1_equivalence(s));
    zero_offset = std::max(zero_offset, gradcheck::zero_offset_equivalence(s));
  }
  report.components.push_back({"Q=1 vs direct convolution (abs)", q1, 1e-12});
  report.components.push_back({"zero-offset deformable vs convolution (abs)", zero_offset, 1e-10});

  std::printf("%-46s%14s%12s  %s\n", "component", "max error", "tolerance", "status");
  for (const auto& c : report.components) {
    std::printf("%-46s%14.3e%12.0e  %s\n", c.name.c_str(), c.max_rel_error, c.tolerance, c.passed() ? "ok" : "FAIL");
  }
  std::printf("%zu seeds starting at %llu: %s\n", seeds, static_cast<unsigned long long>(a.seed),
              report.passed() ? "PASS" : "FAIL");
  return report.passed() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-ONN handwriting recognition toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render a synthetic line dataset to disk");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--n", synth.n, "Number of lines")->required();
  s->add_option("--alphabet", synth.alphabet_file, "Alphabet file, one character per line (default a-j)");
  s->add_option("--min-len", synth.min_len, "Shortest text")->capture_default_str();
  s->add_option("--max-len", synth.max_len, "Longest text")->capture_default_str();
  s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  s->add_option("--height", synth.height, "Image height in pixels")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model from a run config");
  t->add_option("--config", tr.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--resume", tr.resume, "Continue from a last.ckpt")->check(CLI::ExistingFile);
  t->add_option("--seed", tr.seed, "Override train.seed");
  t->add_option("--threads", tr.threads, "Evaluation worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a manifest");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", ev.manifest, "Manifest TSV")->required()->check(CLI::ExistingFile);
  e->add_option("--per-item", ev.per_item, "Write per-item path/cer/wer TSV");
  e->add_flag("--raw", ev.raw, "Print ratios instead of percentages");
  e->add_option("--threads", ev.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  fs::path cmp_a, cmp_b;
  auto* c = app.add_subcommand("compare", "Wilcoxon signed-rank test on two per-item files");
  c->add_option("--a", cmp_a, "Per-item TSV of system A")->required();
  c->add_option("--b", cmp_b, "Per-item TSV of system B")->required();

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  g->add_option("--config", gc.config, "Suite settings (JSON)")->check(CLI::ExistingFile);
  g->add_option("--seed", gc.seed, "First seed")->capture_default_str();
  g->add_option("--seeds", gc.seeds, "Number of seeds")->capture_default_str();
  g->add_flag("--inject-fault", gc.inject_fault, "Flip the sign of analytic gradients (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_compare(cmp_a, cmp_b);
    if (*g) return cmd_gradcheck(gc);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
