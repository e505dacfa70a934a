#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sonn/ctc.hpp"
#include "sonn/tensor.hpp"

namespace sonn::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered character set. Label 0 is the CTC blank; character i (0-based)
/// gets label i + 1.
class Alphabet {
 public:
  Alphabet() = default;
  /// Throws DataError on an empty set or duplicate characters.
  explicit Alphabet(std::u32string characters);
  static Alphabet from_utf8(std::string_view characters);

  /// One character per line, line i (1-based) => label i.
  static Alphabet read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  /// Class count including blank.
  std::size_t size() const { return chars_.size() + 1; }
  const std::u32string& characters() const { return chars_; }

  /// Throws DataError naming the first character outside the alphabet.
  ctc::LabelSeq encode(std::string_view text) const;
  std::string decode(const ctc::LabelSeq& labels) const;
  bool contains(char32_t ch) const { return index_.count(ch) != 0; }

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, int> index_;
};

/// Per-character distortion of the renderer. `jitter` in [0, 1] scales the
/// glyph size jitter (+-15%) and baseline jitter (+-2 px); `slant_deg` is
/// the largest shear angle; `noise` is the additive Gaussian sigma.
struct RenderStyle {
  double scale = 2.0;
  double slant_deg = 10.0;
  double jitter = 1.0;
  double noise = 0.05;

  static RenderStyle clean() { return RenderStyle{2.0, 0.0, 0.0, 0.0}; }
};

struct LineSample {
  Tensor image;  // [1, H, W] in [0, 1]; 0 = ink, 1 = background
  std::string transcript;
  ctc::LabelSeq labels;
  std::string path;  // manifest-relative image path, empty for in-memory samples
};

/// Canvas width for `length` characters: 2 * margin + length * advance.
std::size_t rendered_width(std::size_t length, const RenderStyle& style);

/// Rasterizes `text` left to right on a `height`-pixel canvas.
/// Throws DataError listing characters without a glyph or outside `alphabet`.
LineSample render_line(std::string_view text, const RenderStyle& style, std::uint64_t seed, const Alphabet& alphabet,
                       std::size_t height = 32);

struct SynthOptions {
  std::size_t count = 100;
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  std::uint64_t seed = 1;
  std::size_t height = 32;
  RenderStyle style;
  /// Horizontal downsampling of the target model; samples whose frame count
  /// W / pool_factor cannot carry their labels are redrawn.
  std::size_t pool_factor = 4;
};

struct Dataset {
  Alphabet alphabet;
  std::vector<LineSample> train;
  std::vector<LineSample> val;
  std::vector<LineSample> test;
};

/// Split sizes for n samples: val = test = floor(n / 10), train = the rest.
struct SplitSizes {
  std::size_t train, val, test;
};
SplitSizes split_sizes(std::size_t n);

/// Uniformly random texts over the alphabet, split by index into
/// train/val/test. Throws DataError when count is zero or the length range
/// is inverted.
Dataset generate_dataset(const SynthOptions& options, const Alphabet& alphabet);

/// 8-bit grayscale raster.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage to_gray(const Tensor& image);
/// Bilinear resize to `height` rows, width round(W * height / H), values
/// scaled to [0, 1]. Returns [1, height, W'].
Tensor resize_to_height(const GrayImage& image, std::size_t height);

struct ManifestEntry {
  std::string image_path;
  std::string transcript;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  Alphabet alphabet;
};

/// Parses `path` (TSV "image<TAB>transcript", LF, no header) and the
/// `alphabet.txt` beside it. Errors carry the offending line number.
Manifest load_manifest(const std::filesystem::path& path);
std::vector<LineSample> load_samples(const Manifest& manifest, std::size_t height);

/// Writes images/NNNNNN.pgm, train.tsv, val.tsv, test.tsv and alphabet.txt
/// under `dir`; assigns each sample its relative path.
void write_dataset(Dataset& dataset, const std::filesystem::path& dir);

}  // namespace sonn::data
