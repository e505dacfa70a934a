#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "sonn/data.hpp"
#include "sonn/model.hpp"
#include "sonn/trainer.hpp"

namespace sonn {

/// Where training data comes from: either on-disk manifests or a synthetic
/// corpus generated in memory.
struct DataSource {
  std::optional<std::filesystem::path> train_manifest;
  std::optional<std::filesystem::path> val_manifest;
  std::optional<data::SynthOptions> synth;
  std::string synth_alphabet;  // UTF-8, used with `synth`
};

/// Parsed run configuration. JSON with three sections:
///
///   "model": {"preset": "desk_conv"}
///            {"preset": "desk_selfonn", "q_order": 3, "base_filters": 9}
///            {"preset": "full_size", "kind": "self_onn", "q_order": 3}
///            or a full model description (backbone_groups, head_layers, ...)
///   "train": learning_rate, batch_size, epochs, beta1, beta2, epsilon, seed,
///            checkpoint_every, grad_clip (number or null), schedule
///            ("constant" | "warmup_cosine"), early_stop_cer (number or null)
///   "data":  {"train": path, "val": path} relative to the config file, or
///            {"synth": {"count", "alphabet", "min_length", "max_length",
///                       "seed", "height", "scale", "slant_deg", "jitter",
///                       "noise"}}
///
/// Unknown keys anywhere raise ConfigError. grad_clip defaults to 5.0 when
/// the model contains a Self-ONN layer and to none otherwise.
struct RunConfig {
  nlohmann::json model_section;
  train::TrainConfig train;
  DataSource data;
  bool grad_clip_explicit = false;

  static RunConfig parse(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);

  data::Alphabet alphabet() const;

  /// Loads or generates the dataset at the model's input height; synthetic
  /// samples are kept feasible for the model's horizontal pooling.
  data::Dataset load_dataset(const ModelConfig& model) const;

  /// Expands the model section for a given alphabet size.
  ModelConfig model_config(std::size_t alphabet_size) const;

  /// Train settings with the model-dependent grad_clip default applied.
  train::TrainConfig train_config(const ModelConfig& model) const;

  /// Fully expanded configuration: explicit model, every train default and
  /// absolute data paths. Parsing it yields the same run.
  nlohmann::json resolved(const ModelConfig& model) const;
};

}  // namespace sonn
