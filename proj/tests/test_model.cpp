#include <cmath>
#include <random>

#include "doctest.h"
#include "sonn/checkpoint.hpp"
#include "sonn/ctc.hpp"
#include "sonn/model.hpp"

using namespace sonn;

namespace {

Tensor random_images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n * h * w);
  for (double& x : v) x = d(rng);
  return Tensor({n, 1, h, w}, v);
}

/// Sum of weights + bias over every layer, plus gamma/beta of every batch norm.
std::size_t hand_count(const ModelConfig& cfg) {
  std::size_t total = 0, channels = 1;
  for (std::size_t g = 0; g < cfg.backbone_groups.size(); ++g) {
    const BackboneGroup& group = cfg.backbone_groups[g];
    for (std::size_t b = 0; b < group.num_blocks; ++b) {
      const std::size_t out = group.layers[0].filters;
      std::size_t in = channels;
      for (const LayerSpec& s : group.layers) {
        std::size_t layer = std::size_t(s.q_order) * s.filters * in * 9 + s.filters;
        if (s.kind == LayerKind::kDeformable) layer += 18 * in * 9 + 18;
        total += layer + 2 * s.filters;
        in = s.filters;
      }
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

ModelConfig all_tanh(ModelConfig cfg, LayerKind kind) {
  for (BackboneGroup& g : cfg.backbone_groups)
    for (LayerSpec& s : g.layers) s = LayerSpec{kind, 1, s.filters, Activation::kTanh};
  for (LayerSpec& s : cfg.head_layers) s = LayerSpec{kind, 1, s.filters, Activation::kTanh};
  return cfg;
}

ModelConfig minimal_config() {
  ModelConfig cfg;
  cfg.base_filters = 8;
  cfg.input_height = 8;
  cfg.alphabet_size = 3;
  cfg.backbone_groups = {BackboneGroup{1, {LayerSpec{LayerKind::kConv, 1, 8}, LayerSpec{LayerKind::kConv, 1, 8}}, true}};
  cfg.head_layers = {LayerSpec{LayerKind::kConv, 1, 3}};
  return cfg;
}

}  // namespace

TEST_CASE("single-layer parameter counts") {
  CHECK(OperationalConv2D(1, 8, 1).parameter_count() == 80);
  CHECK(OperationalConv2D(1, 8, 3).parameter_count() == 224);
  for (int q = 1; q <= 9; ++q) {
    const OperationalConv2D c(5, 7, q);
    CHECK(c.parameter_count() == std::size_t(q) * 7 * 5 * 9 + 7);
  }
  CHECK(DeformableConv2D(2, 4).parameter_count() == (4 * 2 * 9 + 4) + (18 * 2 * 9 + 18));
}

TEST_CASE("full-model counts match the hand oracle") {
  const ModelConfig conv = desk_conv_config(11);
  CHECK(Model(conv, 1).count_parameters() == 25595);
  CHECK(Model(conv, 1).count_parameters() == hand_count(conv));
  for (int q : {1, 3, 5}) {
    const ModelConfig s = desk_selfonn_config(11, q, 9);
    CHECK(Model(s, 2).count_parameters() == hand_count(s));
  }
  ModelConfig deform = desk_conv_config(5);
  deform.backbone_groups[0].layers[1].kind = LayerKind::kDeformable;
  deform.backbone_groups[1].num_blocks = 2;
  CHECK(Model(deform, 3).count_parameters() == hand_count(deform));
}

TEST_CASE("Self-ONN model of the same shape has proportionally more parameters") {
  const std::size_t conv = hand_count(full_size_config(80, LayerKind::kConv, 1));
  const std::size_t q3 = hand_count(full_size_config(80, LayerKind::kSelfOnn, 3));
  CHECK(Model(full_size_config(80, LayerKind::kConv, 1), 1).count_parameters() == conv);
  CHECK(q3 > conv);
  const double ratio = double(q3) / double(conv);
  CHECK(ratio > 2.9);
  CHECK(ratio < 3.0);
}

TEST_CASE("config validation names the violated invariant") {
  ModelConfig cfg = desk_conv_config(5);
  cfg.backbone_groups[1].layers[0].filters = 16;
  CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("double"), ConfigError);

  cfg = desk_conv_config(5);
  cfg.head_layers.back().filters = 6;
  CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("alphabet_size"), ConfigError);

  cfg = desk_conv_config(5);
  cfg.backbone_groups[0].layers[0].q_order = 3;
  CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("q_order"), ConfigError);

  cfg = desk_selfonn_config(5, 3, 8);
  cfg.backbone_groups[0].layers[0].activation = Activation::kRelu;
  CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("tanh"), ConfigError);

  cfg = desk_conv_config(5);
  cfg.head_layers[0].kind = LayerKind::kDeformable;
  CHECK_THROWS_AS(Model(cfg, 1), ConfigError);

  cfg = desk_conv_config(5);
  cfg.input_height = 2;
  CHECK_THROWS_AS(Model(cfg, 1), ConfigError);
}

TEST_CASE("config JSON round-trip and unknown keys") {
  const ModelConfig cfg = full_size_config(12, LayerKind::kSelfOnn, 5);
  CHECK(model_config_from_json(to_json(cfg)) == cfg);
  nlohmann::json j = to_json(cfg);
  j["dropout"] = 0.1;
  CHECK_THROWS_WITH_AS(model_config_from_json(j), doctest::Contains("dropout"), ConfigError);
  j = to_json(cfg);
  j["head_layers"][0]["kind"] = "lstm";
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
}

TEST_CASE("full-size config has seven backbone blocks and nine head layers") {
  const ModelConfig cfg = full_size_config(30, LayerKind::kConv, 1);
  std::size_t blocks = 0;
  for (const BackboneGroup& g : cfg.backbone_groups) blocks += g.num_blocks;
  CHECK(blocks == 7);
  CHECK(cfg.head_layers.size() == 9);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("minimal model builds and runs") {
  Model model(minimal_config(), 4);
  Tape tape;
  const Tensor out = model.forward(tape, random_images(2, 8, 10, 1), false);
  CHECK(out.shape() == Shape{5, 2, 3});
}

TEST_CASE("forward shapes, frame count and normalization") {
  ModelConfig cfg = desk_conv_config(7);
  cfg.backbone_groups.push_back(BackboneGroup{1, {LayerSpec{LayerKind::kConv, 1, 64}, LayerSpec{LayerKind::kConv, 1, 64}}, true});
  Model model(cfg, 5);
  CHECK(model.output_frames(128) == 16);
  CHECK(model.min_width() == 8);
  Tape tape;
  const Tensor out = model.forward(tape, random_images(2, 32, 128, 2), true);
  CHECK(out.shape() == Shape{16, 2, 7});
  for (std::size_t f = 0; f < 16 * 2; ++f) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) s += std::exp(out.at(f * 7 + k));
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  CHECK_THROWS_WITH(model.forward(tape, random_images(1, 32, 7, 3), false), doctest::Contains("too small"));
  CHECK_THROWS_WITH(model.forward(tape, random_images(1, 16, 64, 3), false), doctest::Contains("height"));
}

TEST_CASE("constant input gives identical frames in eval mode") {
  Model model(desk_conv_config(6), 6);
  Tape tape;
  const Tensor out = model.forward(tape, Tensor::full({1, 1, 32, 64}, 0.0), false);
  const std::size_t t = out.dim(0), k = out.dim(2);
  // Border frames see zero padding; the rest must agree exactly.
  for (std::size_t f = 5; f + 5 < t; ++f)
    for (std::size_t j = 0; j < k; ++j) CHECK(out.at(f * k + j) == doctest::Approx(out.at(5 * k + j)).epsilon(1e-12));
}

TEST_CASE("shifting by one pooling unit shifts interior frames") {
  Model model(desk_selfonn_config(6, 3, 8), 7);
  const std::size_t h = 32, w = 96, unit = model.min_width();
  const Tensor base = random_images(1, h, w, 9);
  std::vector<double> shifted(h * w, 1.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = unit; c < w; ++c) shifted[r * w + c] = base.at(r * w + c - unit);
  Tape tape;
  const Tensor a = model.forward(tape, base, false);
  const Tensor b = model.forward(tape, Tensor({1, 1, h, w}, shifted), false);
  const std::size_t t = a.dim(0), k = a.dim(2);
  double worst = 0.0;
  for (std::size_t f = 5; f + 6 < t; ++f)
    for (std::size_t j = 0; j < k; ++j) worst = std::max(worst, std::abs(a.at(f * k + j) - b.at((f + 1) * k + j)));
  CHECK(worst <= 1e-12);
}

TEST_CASE("conv and Q=1 Self-ONN models are identical") {
  const ModelConfig conv = all_tanh(desk_conv_config(6), LayerKind::kConv);
  const ModelConfig onn = all_tanh(desk_conv_config(6), LayerKind::kSelfOnn);
  Model a(conv, 11), b(onn, 11);
  CHECK(a.count_parameters() == b.count_parameters());
  const Tensor x = random_images(2, 32, 40, 12);
  Tape ta, tb;
  const Tensor ya = a.forward(ta, x, true), yb = b.forward(tb, x, true);
  double worst = 0.0;
  for (std::size_t i = 0; i < ya.numel(); ++i) worst = std::max(worst, std::abs(ya.at(i) - yb.at(i)));
  CHECK(worst <= 1e-10);
}

TEST_CASE("loss gradient reaches every parameter of a tanh-only model") {
  ModelConfig cfg = all_tanh(desk_selfonn_config(5, 3, 8), LayerKind::kSelfOnn);
  for (LayerSpec& s : cfg.backbone_groups[0].layers) s.q_order = 3;
  Model model(cfg, 13);
  Tape tape;
  const Tensor lp = model.forward(tape, random_images(3, 32, 48, 14), true);
  const std::vector<ctc::LabelSeq> ys = {{{1, 2, 3}, 5}, {{4}, 5}, {{2, 2, 1, 4}, 5}};
  const Tensor loss = ctc::ctc_loss_batch(tape, lp, ys);
  tape.backward(loss);
  std::size_t index = 0;
  for (const Tensor& p : model.parameters()) {
    INFO("parameter " << index++);
    REQUIRE(p.has_grad());
    double norm = 0.0;
    for (double g : p.grad()) norm += g * g;
    CHECK(norm > 0.0);
    for (double g : p.grad()) CHECK(std::isfinite(g));
  }
}

TEST_CASE("build and forward are bit-reproducible") {
  const ModelConfig cfg = desk_selfonn_config(6, 5, 8);
  Model a(cfg, 21), b(cfg, 21), c(cfg, 22);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
    differs = differs || !std::equal(pa[i].data().begin(), pa[i].data().end(), pc[i].data().begin());
  }
  CHECK(differs);
  const Tensor x = random_images(2, 32, 32, 3);
  Tape ta, tb;
  const Tensor ya = a.forward(ta, x, true), yb = b.forward(tb, x, true);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ModelConfig cfg = desk_conv_config(6);
  cfg.backbone_groups[1].layers[0].kind = LayerKind::kDeformable;
  Model model(cfg, 31);
  Tape warm;
  model.forward(warm, random_images(2, 32, 24, 4), true);  // moves running stats

  OptimizerSnapshot state;
  state.step = 17;
  state.epoch = 3;
  state.skipped_batches = 1;
  state.best_cer = 0.25;
  state.best_wer = 0.5;
  for (const Tensor& p : model.parameters()) {
    state.first_moment.push_back(Tensor::full(p.shape(), 0.125));
    state.second_moment.push_back(Tensor::full(p.shape(), 0.0625));
  }
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(model, &state);
  LoadedCheckpoint loaded = deserialize_checkpoint(bytes);
  CHECK(loaded.model.config() == cfg);
  CHECK(serialize_checkpoint(loaded.model, &*loaded.state) == bytes);
  REQUIRE(loaded.state);
  CHECK(loaded.state->step == 17);
  CHECK(loaded.state->best_wer == 0.5);

  const Tensor x = random_images(1, 32, 24, 5);
  Tape ta, tb;
  const Tensor ya = model.forward(ta, x, false), yb = loaded.model.forward(tb, x, false);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));

  CHECK_FALSE(deserialize_checkpoint(serialize_checkpoint(model)).state.has_value());
}

TEST_CASE("corrupt checkpoints are rejected") {
  Model model(minimal_config(), 1);
  const std::vector<std::uint8_t> good = serialize_checkpoint(model);
  CHECK(std::string(good.begin(), good.begin() + 8) == "SONNCKPT");

  auto bad = good;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("magic"), CheckpointError);

  bad = good;
  bad[8] = 99;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("version"), CheckpointError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    CHECK_THROWS_AS(deserialize_checkpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + long(cut))),
                    CheckpointError);
  }

  bad = good;
  bad.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(bad), CheckpointError);

  CHECK_THROWS_AS(read_bytes("/nonexistent/model.ckpt"), CheckpointError);
}
