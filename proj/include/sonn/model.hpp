#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sonn/layers.hpp"
#include "sonn/ops.hpp"
#include "sonn/tape.hpp"
#include "sonn/tensor.hpp"

namespace sonn {

enum class LayerKind { kConv, kSelfOnn, kDeformable };
enum class Activation { kRelu, kTanh };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  int q_order = 1;
  std::size_t filters = 16;
  Activation activation = Activation::kRelu;

  bool operator==(const LayerSpec&) const = default;
};

struct BackboneGroup {
  std::size_t num_blocks = 1;
  std::array<LayerSpec, 2> layers;
  bool pool_after = true;

  bool operator==(const BackboneGroup&) const = default;
};

/// Declarative backbone + head description. Group g's layers carry
/// base_filters * 2^g filters; the last head layer emits alphabet_size
/// (blank included) channels.
struct ModelConfig {
  std::vector<BackboneGroup> backbone_groups;
  std::size_t base_filters = 16;
  std::vector<LayerSpec> head_layers;
  std::size_t alphabet_size = 0;
  std::size_t input_height = 32;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(LayerKind kind);
std::string to_string(Activation act);

nlohmann::json to_json(const ModelConfig& cfg);
/// Rejects unknown keys with ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Two groups of one conv/ReLU block each, 16 base filters, a 64-filter
/// hidden head layer and the output layer.
ModelConfig desk_conv_config(std::size_t alphabet_size);
/// desk_conv_config with every backbone layer a Self-ONN (tanh) layer of the
/// given order and `base_filters` filters; the head stays convolutional, so
/// the operational layers sit at the start of the network.
ModelConfig desk_selfonn_config(std::size_t alphabet_size, int q_order, std::size_t base_filters);
/// Seven backbone blocks (2+2+3) with a nine-layer head; every layer uses
/// `kind` at order `q_order` (1 unless kind is Self-ONN).
ModelConfig full_size_config(std::size_t alphabet_size, LayerKind kind, int q_order);

/// One backbone layer with its batch norm.
struct BackboneLayer {
  LayerSpec spec;
  std::variant<OperationalConv2D, DeformableConv2D> op;
  BatchNorm bn;
  bool squash_input = false;  // tanh before the layer (Self-ONN on unbounded input)
};

/// layer -> BN -> act -> layer -> BN, plus skip, then act.
struct ResBlock {
  BackboneLayer first;
  BackboneLayer second;
  std::optional<OperationalConv2D> projection;  // 1x1, present when channels change
};

struct HeadLayer {
  LayerSpec spec;
  OperationalConv1D op;
  std::optional<BatchNorm> bn;  // absent on the output layer
  bool squash_input = false;
};

class Model {
 public:
  /// Validates `cfg` and initializes deterministically from `seed`.
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// images: [N, 1, H, W] in [0, 1] (0 = ink). Returns [T, N, K]
  /// log-probabilities. Throws when H differs from the configured height or W
  /// cannot survive the pooling chain.
  Tensor forward(Tape& tape, const Tensor& images, bool training);

  /// Trainable tensors in declaration order.
  std::vector<Tensor> parameters() const;
  /// Batch-norm running statistics in declaration order.
  std::vector<Tensor> buffers() const;
  std::size_t count_parameters() const;

  /// Frames produced for an input of the given width; 0 if it is too narrow.
  std::size_t output_frames(std::size_t width) const;
  /// Smallest width giving at least one frame.
  std::size_t min_width() const;

  const std::vector<std::vector<ResBlock>>& groups() const { return groups_; }
  std::vector<HeadLayer>& head() { return head_; }

 private:
  ModelConfig cfg_;
  std::vector<std::vector<ResBlock>> groups_;
  std::vector<HeadLayer> head_;
};

}  // namespace sonn
