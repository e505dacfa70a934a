#include "sonn/run_config.hpp"

#include <fstream>
#include <set>

namespace sonn {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <typename T>
std::optional<T> get_optional(const json& j, const char* key, std::optional<T> fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (j[key].is_null()) return std::nullopt;
  return get_or<T>(j, key, T{}, where);
}

LayerKind kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::kConv;
  if (s == "self_onn") return LayerKind::kSelfOnn;
  if (s == "deformable") return LayerKind::kDeformable;
  throw ConfigError("unknown layer kind '" + s + "'");
}

bool has_self_onn(const ModelConfig& cfg) {
  for (const auto& g : cfg.backbone_groups) {
    for (const auto& l : g.layers) {
      if (l.kind == LayerKind::kSelfOnn) return true;
    }
  }
  for (const auto& l : cfg.head_layers) {
    if (l.kind == LayerKind::kSelfOnn) return true;
  }
  return false;
}

}  // namespace

RunConfig RunConfig::parse(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"model", "train", "data"}, "config");
  RunConfig rc;

  rc.model_section = j.contains("model") ? j["model"] : json{{"preset", "desk_conv"}};
  if (!rc.model_section.is_object()) throw ConfigError("model section must be an object");
  if (rc.model_section.contains("preset")) {
    const std::string preset = get_or<std::string>(rc.model_section, "preset", "", "model");
    if (preset == "desk_conv") {
      reject_unknown(rc.model_section, {"preset"}, "model");
    } else if (preset == "desk_selfonn") {
      reject_unknown(rc.model_section, {"preset", "q_order", "base_filters"}, "model");
    } else if (preset == "full_size") {
      reject_unknown(rc.model_section, {"preset", "kind", "q_order"}, "model");
    } else {
      throw ConfigError("unknown model preset '" + preset + "'");
    }
  }

  const json jt = j.contains("train") ? j["train"] : json::object();
  reject_unknown(jt,
                 {"learning_rate", "batch_size", "epochs", "beta1", "beta2", "epsilon", "seed", "checkpoint_every",
                  "grad_clip", "schedule", "early_stop_cer"},
                 "train");
  train::TrainConfig& t = rc.train;
  t.learning_rate = get_or<double>(jt, "learning_rate", t.learning_rate, "train");
  t.batch_size = get_or<std::size_t>(jt, "batch_size", t.batch_size, "train");
  t.epochs = get_or<std::size_t>(jt, "epochs", t.epochs, "train");
  t.beta1 = get_or<double>(jt, "beta1", t.beta1, "train");
  t.beta2 = get_or<double>(jt, "beta2", t.beta2, "train");
  t.epsilon = get_or<double>(jt, "epsilon", t.epsilon, "train");
  t.seed = get_or<std::uint64_t>(jt, "seed", t.seed, "train");
  t.checkpoint_every = get_or<std::size_t>(jt, "checkpoint_every", t.checkpoint_every, "train");
  // Present (number or null) overrides the model-dependent default.
  if (jt.contains("grad_clip")) {
    rc.grad_clip_explicit = true;
    t.grad_clip = get_optional<double>(jt, "grad_clip", std::nullopt, "train");
  }
  const std::string schedule = get_or<std::string>(jt, "schedule", "constant", "train");
  if (schedule == "constant") {
    t.schedule = train::Schedule::kConstant;
  } else if (schedule == "warmup_cosine") {
    t.schedule = train::Schedule::kWarmupCosine;
  } else {
    throw ConfigError("unknown schedule '" + schedule + "'");
  }
  t.early_stop_cer = get_optional<double>(jt, "early_stop_cer", std::nullopt, "train");

  if (!j.contains("data")) throw ConfigError("config needs a 'data' section");
  const json& jd = j["data"];
  reject_unknown(jd, {"train", "val", "synth"}, "data");
  if (jd.contains("synth")) {
    if (jd.contains("train") || jd.contains("val")) throw ConfigError("data takes either 'synth' or manifests, not both");
    const json& js = jd["synth"];
    reject_unknown(js,
                   {"count", "alphabet", "min_length", "max_length", "seed", "height", "scale", "slant_deg", "jitter",
                    "noise"},
                   "data.synth");
    data::SynthOptions o;
    o.count = get_or<std::size_t>(js, "count", o.count, "data.synth");
    o.min_length = get_or<std::size_t>(js, "min_length", o.min_length, "data.synth");
    o.max_length = get_or<std::size_t>(js, "max_length", o.max_length, "data.synth");
    o.seed = get_or<std::uint64_t>(js, "seed", o.seed, "data.synth");
    o.height = get_or<std::size_t>(js, "height", 0, "data.synth");
    o.style.scale = get_or<double>(js, "scale", o.style.scale, "data.synth");
    o.style.slant_deg = get_or<double>(js, "slant_deg", o.style.slant_deg, "data.synth");
    o.style.jitter = get_or<double>(js, "jitter", o.style.jitter, "data.synth");
    o.style.noise = get_or<double>(js, "noise", o.style.noise, "data.synth");
    if (o.count == 0) throw ConfigError("data.synth.count must be positive");
    rc.data.synth_alphabet = get_or<std::string>(js, "alphabet", "abcdefghij", "data.synth");
    rc.data.synth = o;
  } else {
    if (!jd.contains("train") || !jd.contains("val")) throw ConfigError("data needs 'train' and 'val' manifests");
    rc.data.train_manifest = base_dir / get_or<std::string>(jd, "train", "", "data");
    rc.data.val_manifest = base_dir / get_or<std::string>(jd, "val", "", "data");
  }
  t.validate();
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse(j, path.parent_path());
}

ModelConfig RunConfig::model_config(std::size_t alphabet_size) const {
  const json& m = model_section;
  ModelConfig cfg;
  if (m.contains("preset")) {
    const std::string preset = m["preset"].get<std::string>();
    if (preset == "desk_conv") {
      cfg = desk_conv_config(alphabet_size);
    } else if (preset == "desk_selfonn") {
      cfg = desk_selfonn_config(alphabet_size, get_or<int>(m, "q_order", 3, "model"),
                                get_or<std::size_t>(m, "base_filters", 9, "model"));
    } else {
      cfg = full_size_config(alphabet_size, kind_from_string(get_or<std::string>(m, "kind", "self_onn", "model")),
                                get_or<int>(m, "q_order", 3, "model"));
    }
  } else {
    json full = m;
    if (!full.contains("alphabet_size")) full["alphabet_size"] = alphabet_size;
    cfg = model_config_from_json(full);
    if (cfg.alphabet_size != alphabet_size) {
      throw ConfigError("model alphabet_size " + std::to_string(cfg.alphabet_size) + " does not match the data (" +
                        std::to_string(alphabet_size) + ")");
    }
  }
  cfg.validate();
  return cfg;
}

train::TrainConfig RunConfig::train_config(const ModelConfig& model) const {
  train::TrainConfig t = train;
  if (!grad_clip_explicit) t.grad_clip = has_self_onn(model) ? std::optional<double>(5.0) : std::nullopt;
  return t;
}

data::Alphabet RunConfig::alphabet() const {
  if (data.synth) return data::Alphabet::from_utf8(data.synth_alphabet);
  return data::load_manifest(*data.train_manifest).alphabet;
}

data::Dataset RunConfig::load_dataset(const ModelConfig& model) const {
  const std::size_t input_height = model.input_height;
  if (data.synth) {
    data::SynthOptions o = *data.synth;
    o.pool_factor = 1;
    for (const auto& g : model.backbone_groups) {
      if (g.pool_after) o.pool_factor *= 2;
    }
    if (o.height == 0) o.height = input_height;
    if (o.height != input_height) throw ConfigError("data.synth.height differs from the model's input_height");
    return data::generate_dataset(o, data::Alphabet::from_utf8(data.synth_alphabet));
  }
  const data::Manifest tm = data::load_manifest(*data.train_manifest);
  const data::Manifest vm = data::load_manifest(*data.val_manifest);
  if (tm.alphabet.characters() != vm.alphabet.characters()) {
    throw data::DataError("train and val manifests use different alphabets");
  }
  data::Dataset ds;
  ds.alphabet = tm.alphabet;
  ds.train = data::load_samples(tm, input_height);
  ds.val = data::load_samples(vm, input_height);
  return ds;
}

json RunConfig::resolved(const ModelConfig& model) const {
  const train::TrainConfig t = train_config(model);
  json jt{{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"grad_clip", t.grad_clip ? json(*t.grad_clip) : json(nullptr)},
          {"schedule", t.schedule == train::Schedule::kConstant ? "constant" : "warmup_cosine"},
          {"early_stop_cer", t.early_stop_cer ? json(*t.early_stop_cer) : json(nullptr)}};
  json jd;
  if (data.synth) {
    const data::SynthOptions& o = *data.synth;
    jd["synth"] = json{{"count", o.count},
                       {"alphabet", data.synth_alphabet},
                       {"min_length", o.min_length},
                       {"max_length", o.max_length},
                       {"seed", o.seed},
                       {"height", o.height == 0 ? model.input_height : o.height},
                       {"scale", o.style.scale},
                       {"slant_deg", o.style.slant_deg},
                       {"jitter", o.style.jitter},
                       {"noise", o.style.noise}};
  } else {
    jd["train"] = std::filesystem::absolute(*data.train_manifest).lexically_normal().string();
    jd["val"] = std::filesystem::absolute(*data.val_manifest).lexically_normal().string();
  }
  return json{{"model", to_json(model)}, {"train", jt}, {"data", jd}};
}

}  // namespace sonn
