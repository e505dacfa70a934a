#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sonn/model.hpp"
#include "sonn/tensor.hpp"

namespace sonn {

/// Binary checkpoint layout (all integers and floats little-endian):
///
///   "SONNCKPT"                      8-byte magic
///   u32 version                     kCheckpointVersion
///   u64 length, bytes               model config as JSON text
///   u32 count, tensors...           parameters then batch-norm buffers,
///                                   in Model::parameters()/buffers() order
///   u8 has_state                    1 when optimizer state follows
///   [u64 step, u64 epoch, u64 skipped_batches,
///    f64 best_cer, f64 best_wer,
///    u32 count, first-moment tensors, u32 count, second-moment tensors]
///
/// A tensor is u32 rank, rank x u64 extents, then f64 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t skipped_batches = 0;
  double best_cer = 0.0;
  double best_wer = 0.0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const OptimizerSnapshot* state = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::optional<OptimizerSnapshot> state;
};

/// Throws CheckpointError on bad magic, unsupported version, truncation or a
/// tensor layout that does not match the embedded config.
LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const OptimizerSnapshot* state = nullptr) {
  write_bytes(path, serialize_checkpoint(model, state));
}
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_bytes(path));
}

/// Copies parameter and buffer values from `src` into `dst` (same config).
void copy_weights(const Model& src, Model& dst);

}  // namespace sonn
