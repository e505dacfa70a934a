#include "sonn/model.hpp"

#include <random>
#include <set>
#include <stdexcept>

namespace sonn {
namespace {

using nlohmann::json;

LayerKind kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::kConv;
  if (s == "self_onn") return LayerKind::kSelfOnn;
  if (s == "deformable") return LayerKind::kDeformable;
  throw ConfigError("unknown layer kind '" + s + "' (expected conv, self_onn or deformable)");
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + s + "' (expected relu or tanh)");
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

json layer_to_json(const LayerSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"q_order", s.q_order},
              {"filters", s.filters},
              {"activation", to_string(s.activation)}};
}

LayerSpec layer_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"kind", "q_order", "filters", "activation"}, where);
  LayerSpec s;
  s.kind = kind_from_string(get_or<std::string>(j, "kind", "conv"));
  s.q_order = get_or<int>(j, "q_order", 1);
  if (!j.contains("filters")) throw ConfigError(where + " needs 'filters'");
  s.filters = get_or<std::size_t>(j, "filters", 0);
  const std::string default_act = s.kind == LayerKind::kSelfOnn ? "tanh" : "relu";
  s.activation = activation_from_string(get_or<std::string>(j, "activation", default_act));
  return s;
}

void validate_layer(const LayerSpec& s, const std::string& where) {
  if (s.q_order < 1) throw ConfigError(where + ": q_order must be >= 1");
  if (s.filters == 0) throw ConfigError(where + ": filters must be positive");
  if ((s.kind == LayerKind::kConv || s.kind == LayerKind::kDeformable) && s.q_order != 1) {
    throw ConfigError(where + ": conv and deformable layers must have q_order 1");
  }
  if (s.kind == LayerKind::kSelfOnn && s.activation != Activation::kTanh) {
    throw ConfigError(where + ": self_onn layers must use tanh activation");
  }
}

Tensor apply_activation(Tape& tape, const Tensor& x, Activation act) {
  return act == Activation::kTanh ? tanh(tape, x) : relu(tape, x);
}

BackboneLayer make_backbone_layer(const LayerSpec& spec, std::size_t c_in, bool input_bounded, std::mt19937_64& rng) {
  BackboneLayer layer;
  layer.spec = spec;
  layer.bn = BatchNorm(spec.filters);
  layer.squash_input = spec.kind == LayerKind::kSelfOnn && !input_bounded;
  if (spec.kind == LayerKind::kDeformable) {
    DeformableConv2D d(c_in, spec.filters);
    init_operational_weights(d, rng);
    layer.op = std::move(d);
  } else {
    OperationalConv2D c(c_in, spec.filters, spec.q_order);
    init_operational_weights(c, rng);
    layer.op = std::move(c);
  }
  return layer;
}

Tensor run_backbone_layer(Tape& tape, BackboneLayer& layer, const Tensor& x, bool training) {
  Tensor in = layer.squash_input ? tanh(tape, x) : x;
  Tensor out = std::visit(
      [&](const auto& op) -> Tensor {
        using T = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<T, DeformableConv2D>) {
          return deformable_conv2d_forward(tape, in, op);
        } else {
          return selfonn_conv2d_forward(tape, in, op);
        }
      },
      layer.op);
  return batch_norm(tape, out, layer.bn, training);
}

void append_layer_params(const BackboneLayer& layer, std::vector<Tensor>& out) {
  std::visit(
      [&](const auto& op) {
        using T = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<T, DeformableConv2D>) {
          out.push_back(op.base.weights);
          out.push_back(op.base.bias);
          out.push_back(op.offset_predictor.weights);
          out.push_back(op.offset_predictor.bias);
        } else {
          out.push_back(op.weights);
          out.push_back(op.bias);
        }
      },
      layer.op);
  out.push_back(layer.bn.gamma);
  out.push_back(layer.bn.beta);
}

LayerSpec conv(std::size_t filters) { return LayerSpec{LayerKind::kConv, 1, filters, Activation::kRelu}; }

LayerSpec spec_for(LayerKind kind, int q, std::size_t filters) {
  if (kind == LayerKind::kSelfOnn) return LayerSpec{kind, q, filters, Activation::kTanh};
  return LayerSpec{kind, 1, filters, Activation::kRelu};
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kSelfOnn: return "self_onn";
    case LayerKind::kDeformable: return "deformable";
  }
  return "?";
}

std::string to_string(Activation act) { return act == Activation::kTanh ? "tanh" : "relu"; }

void ModelConfig::validate() const {
  if (backbone_groups.empty()) throw ConfigError("model needs at least one backbone group");
  if (head_layers.empty()) throw ConfigError("model needs at least one head layer");
  if (alphabet_size < 2) throw ConfigError("alphabet_size must be >= 2 (blank plus one label)");
  if (base_filters == 0) throw ConfigError("base_filters must be positive");
  std::size_t height = input_height;
  for (std::size_t g = 0; g < backbone_groups.size(); ++g) {
    const BackboneGroup& group = backbone_groups[g];
    const std::string where = "backbone group " + std::to_string(g);
    if (group.num_blocks == 0) throw ConfigError(where + ": num_blocks must be positive");
    const std::size_t expected = base_filters << g;
    for (std::size_t l = 0; l < 2; ++l) {
      validate_layer(group.layers[l], where + " layer " + std::to_string(l));
      if (group.layers[l].filters != expected) {
        throw ConfigError(where + ": filters must double across successive groups (expected " +
                          std::to_string(expected) + ", got " + std::to_string(group.layers[l].filters) + ")");
      }
    }
    if (group.pool_after) height /= 2;
  }
  if (height == 0) throw ConfigError("input_height too small for the pooling chain");
  for (std::size_t i = 0; i < head_layers.size(); ++i) {
    const std::string where = "head layer " + std::to_string(i);
    validate_layer(head_layers[i], where);
    if (head_layers[i].kind == LayerKind::kDeformable) throw ConfigError(where + ": deformable layers are 2D only");
  }
  if (head_layers.back().filters != alphabet_size) {
    throw ConfigError("head's final output channel count must equal alphabet_size (" + std::to_string(alphabet_size) +
                      "), got " + std::to_string(head_layers.back().filters));
  }
}

json to_json(const ModelConfig& cfg) {
  json groups = json::array();
  for (const BackboneGroup& g : cfg.backbone_groups) {
    groups.push_back(json{{"num_blocks", g.num_blocks},
                          {"layers", json::array({layer_to_json(g.layers[0]), layer_to_json(g.layers[1])})},
                          {"pool_after", g.pool_after}});
  }
  json head = json::array();
  for (const LayerSpec& s : cfg.head_layers) head.push_back(layer_to_json(s));
  return json{{"backbone_groups", groups},
              {"base_filters", cfg.base_filters},
              {"head_layers", head},
              {"alphabet_size", cfg.alphabet_size},
              {"input_height", cfg.input_height}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"backbone_groups", "base_filters", "head_layers", "alphabet_size", "input_height"}, "model");
  ModelConfig cfg;
  cfg.base_filters = get_or<std::size_t>(j, "base_filters", cfg.base_filters);
  cfg.alphabet_size = get_or<std::size_t>(j, "alphabet_size", 0);
  cfg.input_height = get_or<std::size_t>(j, "input_height", cfg.input_height);
  if (!j.contains("backbone_groups") || !j["backbone_groups"].is_array()) {
    throw ConfigError("model needs a 'backbone_groups' array");
  }
  for (std::size_t g = 0; g < j["backbone_groups"].size(); ++g) {
    const json& jg = j["backbone_groups"][g];
    const std::string where = "backbone_groups[" + std::to_string(g) + "]";
    reject_unknown(jg, {"num_blocks", "layers", "pool_after"}, where);
    BackboneGroup group;
    group.num_blocks = get_or<std::size_t>(jg, "num_blocks", 1);
    group.pool_after = get_or<bool>(jg, "pool_after", true);
    if (!jg.contains("layers") || !jg["layers"].is_array() || jg["layers"].size() != 2) {
      throw ConfigError(where + " needs exactly two 'layers'");
    }
    for (std::size_t l = 0; l < 2; ++l) {
      group.layers[l] = layer_from_json(jg["layers"][l], where + ".layers[" + std::to_string(l) + "]");
    }
    cfg.backbone_groups.push_back(group);
  }
  if (!j.contains("head_layers") || !j["head_layers"].is_array()) throw ConfigError("model needs a 'head_layers' array");
  for (std::size_t i = 0; i < j["head_layers"].size(); ++i) {
    cfg.head_layers.push_back(layer_from_json(j["head_layers"][i], "head_layers[" + std::to_string(i) + "]"));
  }
  return cfg;
}

ModelConfig desk_conv_config(std::size_t alphabet_size) {
  ModelConfig cfg;
  cfg.base_filters = 16;
  cfg.input_height = 32;
  cfg.alphabet_size = alphabet_size;
  cfg.backbone_groups = {BackboneGroup{1, {conv(16), conv(16)}, true}, BackboneGroup{1, {conv(32), conv(32)}, true}};
  cfg.head_layers = {conv(64), conv(alphabet_size)};
  return cfg;
}

ModelConfig desk_selfonn_config(std::size_t alphabet_size, int q_order, std::size_t base_filters) {
  ModelConfig cfg = desk_conv_config(alphabet_size);
  cfg.base_filters = base_filters;
  for (std::size_t g = 0; g < cfg.backbone_groups.size(); ++g) {
    for (LayerSpec& s : cfg.backbone_groups[g].layers) s = spec_for(LayerKind::kSelfOnn, q_order, base_filters << g);
  }
  return cfg;
}

ModelConfig full_size_config(std::size_t alphabet_size, LayerKind kind, int q_order) {
  ModelConfig cfg;
  cfg.base_filters = 64;
  cfg.input_height = 64;
  cfg.alphabet_size = alphabet_size;
  const std::array<std::size_t, 3> blocks{2, 2, 3};
  for (std::size_t g = 0; g < blocks.size(); ++g) {
    const LayerSpec s = spec_for(kind, q_order, cfg.base_filters << g);
    cfg.backbone_groups.push_back(BackboneGroup{blocks[g], {s, s}, true});
  }
  const LayerKind head_kind = kind == LayerKind::kDeformable ? LayerKind::kConv : kind;
  for (int i = 0; i < 8; ++i) cfg.head_layers.push_back(spec_for(head_kind, q_order, 256));
  cfg.head_layers.push_back(spec_for(head_kind, q_order, alphabet_size));
  return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::size_t channels = 1;
  bool bounded = true;  // the input image is mapped into [-1, 1]
  for (const BackboneGroup& group : cfg_.backbone_groups) {
    std::vector<ResBlock> blocks;
    for (std::size_t b = 0; b < group.num_blocks; ++b) {
      ResBlock block;
      const std::size_t out = group.layers[0].filters;
      block.first = make_backbone_layer(group.layers[0], channels, bounded, rng);
      const bool mid_bounded = group.layers[0].activation == Activation::kTanh;
      block.second = make_backbone_layer(group.layers[1], out, mid_bounded, rng);
      if (channels != out) {
        OperationalConv2D proj(channels, out, 1, Conv2DGeometry{{1, 1}, {1, 1}, {0, 0}, {1, 1}});
        init_operational_weights(proj, rng);
        block.projection = std::move(proj);
      }
      bounded = group.layers[1].activation == Activation::kTanh;
      channels = out;
      blocks.push_back(std::move(block));
    }
    groups_.push_back(std::move(blocks));
  }
  for (std::size_t i = 0; i < cfg_.head_layers.size(); ++i) {
    const LayerSpec& spec = cfg_.head_layers[i];
    HeadLayer layer{spec, OperationalConv1D(channels, spec.filters, spec.q_order), std::nullopt, false};
    init_operational_weights(layer.op, rng);
    layer.squash_input = spec.kind == LayerKind::kSelfOnn && !bounded;
    const bool is_output = i + 1 == cfg_.head_layers.size();
    if (!is_output) layer.bn = BatchNorm(spec.filters);
    bounded = !is_output && spec.activation == Activation::kTanh;
    channels = spec.filters;
    head_.push_back(std::move(layer));
  }
}

std::size_t Model::output_frames(std::size_t width) const {
  std::size_t w = width;
  for (const BackboneGroup& g : cfg_.backbone_groups) {
    if (g.pool_after) {
      if (w < 2) return 0;
      w /= 2;
    }
  }
  return w;
}

std::size_t Model::min_width() const {
  std::size_t w = 1;
  for (const BackboneGroup& g : cfg_.backbone_groups) {
    if (g.pool_after) w *= 2;
  }
  return w;
}

Tensor Model::forward(Tape& tape, const Tensor& images, bool training) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw std::invalid_argument("model input must be [N,1,H,W], got " + shape_str(images.shape()));
  }
  if (images.dim(2) != cfg_.input_height) {
    throw std::invalid_argument("image height " + std::to_string(images.dim(2)) + " differs from configured " +
                                std::to_string(cfg_.input_height));
  }
  if (output_frames(images.dim(3)) == 0) {
    throw std::invalid_argument("image width " + std::to_string(images.dim(3)) + " too small for the pooling chain (min " +
                                std::to_string(min_width()) + ")");
  }
  Tensor x = affine(tape, images, 2.0, -1.0);
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    const BackboneGroup& spec = cfg_.backbone_groups[g];
    for (ResBlock& block : groups_[g]) {
      Tensor h = run_backbone_layer(tape, block.first, x, training);
      h = apply_activation(tape, h, block.first.spec.activation);
      h = run_backbone_layer(tape, block.second, h, training);
      Tensor skip = block.projection ? conv2d_forward(tape, x, *block.projection) : x;
      x = apply_activation(tape, add(tape, h, skip), block.second.spec.activation);
    }
    if (spec.pool_after) x = max_pool2d(tape, x, {2, 2}, {2, 2});
  }
  // Collapse the remaining height; width becomes time.
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  x = max_pool2d(tape, x, {h, 1}, {1, 1});
  x = reshape(tape, x, {n, c, w});
  for (HeadLayer& layer : head_) {
    Tensor in = layer.squash_input ? tanh(tape, x) : x;
    x = selfonn_conv1d_forward(tape, in, layer.op);
    if (layer.bn) {
      x = batch_norm(tape, x, *layer.bn, training);
      x = apply_activation(tape, x, layer.spec.activation);
    }
  }
  x = log_softmax(tape, x, 1);
  return to_time_major(tape, x);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& group : groups_) {
    for (const ResBlock& block : group) {
      append_layer_params(block.first, out);
      append_layer_params(block.second, out);
      if (block.projection) {
        out.push_back(block.projection->weights);
        out.push_back(block.projection->bias);
      }
    }
  }
  for (const HeadLayer& layer : head_) {
    out.push_back(layer.op.weights);
    out.push_back(layer.op.bias);
    if (layer.bn) {
      out.push_back(layer.bn->gamma);
      out.push_back(layer.bn->beta);
    }
  }
  return out;
}

std::vector<Tensor> Model::buffers() const {
  std::vector<Tensor> out;
  for (const auto& group : groups_) {
    for (const ResBlock& block : group) {
      for (const BackboneLayer* layer : {&block.first, &block.second}) {
        out.push_back(layer->bn.running_mean);
        out.push_back(layer->bn.running_var);
      }
    }
  }
  for (const HeadLayer& layer : head_) {
    if (layer.bn) {
      out.push_back(layer.bn->running_mean);
      out.push_back(layer.bn->running_var);
    }
  }
  return out;
}

std::size_t Model::count_parameters() const {
  std::size_t total = 0;
  for (const Tensor& t : parameters()) total += t.numel();
  return total;
}

}  // namespace sonn
