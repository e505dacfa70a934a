#include "sonn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace sonn {
namespace {

constexpr char kMagic[8] = {'S', 'O', 'N', 'N', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) u64(e);
    for (double v : t.data()) f64(v);
  }
  void tensors(const std::vector<Tensor>& ts) {
    u32(static_cast<std::uint32_t>(ts.size()));
    for (const Tensor& t : ts) tensor(t);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  /// Reads a tensor into `dst`, which must already have the stored shape.
  void tensor_into(Tensor& dst) {
    const std::uint32_t rank = u32();
    Shape shape(rank);
    for (auto& e : shape) e = u64();
    if (shape != dst.shape()) {
      throw CheckpointError("tensor shape " + shape_str(shape) + " does not match model " + shape_str(dst.shape()));
    }
    auto d = dst.mutable_data();
    for (double& v : d) v = f64();
  }
  void tensors_into(std::vector<Tensor>& dst) {
    const std::uint32_t count = u32();
    if (count != dst.size()) {
      throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                            std::to_string(dst.size()));
    }
    for (Tensor& t : dst) tensor_into(t);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<Tensor> weights_and_buffers(const Model& model) {
  std::vector<Tensor> all = model.parameters();
  for (const Tensor& b : model.buffers()) all.push_back(b);
  return all;
}

std::vector<Tensor> zeros_like(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const Tensor& t : ts) out.push_back(Tensor::zeros(t.shape()));
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const OptimizerSnapshot* state) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const std::string config = to_json(model.config()).dump();
  w.u64(config.size());
  w.raw(config.data(), config.size());
  w.tensors(weights_and_buffers(model));
  w.u8(state ? 1 : 0);
  if (state) {
    w.u64(state->step);
    w.u64(state->epoch);
    w.u64(state->skipped_batches);
    w.f64(state->best_cer);
    w.f64(state->best_wer);
    w.tensors(state->first_moment);
    w.tensors(state->second_moment);
  }
  return w.take();
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t len = r.u64();
  const std::uint8_t* text = r.take(len);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(std::string(reinterpret_cast<const char*>(text), len)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt model config: ") + e.what());
  }
  LoadedCheckpoint out{Model(cfg, 0), std::nullopt};
  std::vector<Tensor> slots = weights_and_buffers(out.model);
  r.tensors_into(slots);
  if (r.u8()) {
    OptimizerSnapshot s;
    s.step = r.u64();
    s.epoch = r.u64();
    s.skipped_batches = r.u64();
    s.best_cer = r.f64();
    s.best_wer = r.f64();
    const std::vector<Tensor> params = out.model.parameters();
    s.first_moment = zeros_like(params);
    s.second_moment = zeros_like(params);
    r.tensors_into(s.first_moment);
    r.tensors_into(s.second_moment);
    out.state = std::move(s);
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed for " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void copy_weights(const Model& src, Model& dst) {
  if (!(src.config() == dst.config())) throw std::invalid_argument("copy_weights needs identical model configs");
  std::vector<Tensor> from = weights_and_buffers(src);
  std::vector<Tensor> to = weights_and_buffers(dst);
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto s = from[i].data();
    auto d = to[i].mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace sonn
