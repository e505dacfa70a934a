#include "sonn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "sonn/font.hpp"
#include "sonn/metrics.hpp"

namespace sonn::data {
namespace {

std::string utf8(char32_t ch) { return metrics::codepoints_to_utf8(std::u32string(1, ch)); }

std::u32string decode_utf8(std::string_view text) {
  try {
    return metrics::utf8_to_codepoints(text);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

Alphabet::Alphabet(std::u32string characters) : chars_(std::move(characters)) {
  if (chars_.empty()) throw DataError("alphabet is empty");
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    if (!index_.emplace(chars_[i], static_cast<int>(i + 1)).second) {
      throw DataError("duplicate alphabet character '" + utf8(chars_[i]) + "'");
    }
  }
}

Alphabet Alphabet::from_utf8(std::string_view characters) { return Alphabet(decode_utf8(characters)); }

Alphabet Alphabet::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open alphabet file " + path.string());
  std::u32string chars;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::u32string cps = decode_utf8(line);
    if (cps.size() != 1) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected exactly one character per line");
    }
    chars.push_back(cps[0]);
  }
  return Alphabet(std::move(chars));
}

void Alphabet::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write alphabet file " + path.string());
  for (char32_t ch : chars_) os << utf8(ch) << '\n';
}

ctc::LabelSeq Alphabet::encode(std::string_view text) const {
  ctc::LabelSeq out;
  out.alphabet_size = size();
  for (char32_t ch : decode_utf8(text)) {
    auto it = index_.find(ch);
    if (it == index_.end()) throw DataError("character '" + utf8(ch) + "' is not in the alphabet");
    out.labels.push_back(it->second);
  }
  return out;
}

std::string Alphabet::decode(const ctc::LabelSeq& labels) const {
  std::u32string out;
  for (int label : labels.labels) {
    if (label <= 0 || static_cast<std::size_t>(label) > chars_.size()) {
      throw DataError("label " + std::to_string(label) + " has no character");
    }
    out.push_back(chars_[static_cast<std::size_t>(label - 1)]);
  }
  return metrics::codepoints_to_utf8(out);
}

std::size_t rendered_width(std::size_t length, const RenderStyle& style) {
  const auto advance = static_cast<std::size_t>(std::lround(6.0 * style.scale));
  const auto margin = static_cast<std::size_t>(std::lround(2.0 * style.scale));
  return 2 * margin + length * advance;
}

LineSample render_line(std::string_view text, const RenderStyle& style, std::uint64_t seed, const Alphabet& alphabet,
                       std::size_t height) {
  const std::u32string cps = decode_utf8(text);
  std::string missing;
  for (char32_t ch : cps) {
    if (!font::find_glyph(ch) || !alphabet.contains(ch)) {
      if (missing.find(utf8(ch)) == std::string::npos) missing += utf8(ch);
    }
  }
  if (!missing.empty()) throw DataError("unsupported characters: \"" + missing + "\"");
  if (!(style.scale > 0.0)) throw DataError("render scale must be positive");

  const std::size_t width = rendered_width(cps.size(), style);
  const double advance = static_cast<double>(std::lround(6.0 * style.scale));
  const double margin = static_cast<double>(std::lround(2.0 * style.scale));
  const double top = (static_cast<double>(height) - 7.0 * style.scale) / 2.0;
  std::vector<double> pixels(height * width, 1.0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  for (std::size_t i = 0; i < cps.size(); ++i) {
    const double scale_jitter = unit(rng), baseline_jitter = unit(rng), slant_draw = unit(rng);
    const font::Glyph& glyph = *font::find_glyph(cps[i]);
    const double s = style.scale * (1.0 + 0.15 * style.jitter * scale_jitter);
    const double shear = std::tan(style.slant_deg * slant_draw * std::numbers::pi / 180.0);
    const double left = margin + static_cast<double>(i) * advance;
    const double cx = left + 2.5 * style.scale;
    const double cy = top + 3.5 * style.scale + 2.0 * style.jitter * baseline_jitter;
    const double reach = 2.0 * style.scale;
    const auto c0 = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(left - reach)));
    const auto c1 = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(width), std::ceil(left + advance + reach)));
    for (std::size_t r = 0; r < height; ++r) {
      const double py = static_cast<double>(r) + 0.5;
      const double v = (py - cy) / s + 3.5;
      if (v < 0.0 || v >= 7.0) continue;
      for (std::ptrdiff_t c = c0; c < c1; ++c) {
        const double px = static_cast<double>(c) + 0.5;
        const double u = (px - cx - shear * (cy - py)) / s + 2.5;
        if (u < 0.0 || u >= 5.0) continue;
        if (font::ink(glyph, static_cast<std::size_t>(v), static_cast<std::size_t>(u))) pixels[r * width + c] = 0.0;
      }
    }
  }
  if (style.noise > 0.0) {
    std::normal_distribution<double> gauss(0.0, style.noise);
    for (double& p : pixels) p += gauss(rng);
  }
  for (double& p : pixels) p = quantize(p);

  LineSample out;
  out.image = Tensor({1, height, width}, std::move(pixels));
  out.transcript = std::string(text);
  out.labels = alphabet.encode(text);
  return out;
}

SplitSizes split_sizes(std::size_t n) {
  const std::size_t tenth = n / 10;
  return SplitSizes{n - 2 * tenth, tenth, tenth};
}

Dataset generate_dataset(const SynthOptions& options, const Alphabet& alphabet) {
  if (options.count == 0) throw DataError("dataset size must be at least 1");
  if (options.min_length == 0 || options.min_length > options.max_length) {
    throw DataError("text length range must satisfy 1 <= min <= max");
  }
  Dataset out;
  out.alphabet = alphabet;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> length(options.min_length, options.max_length);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.characters().size() - 1);
  const SplitSizes split = split_sizes(options.count);
  for (std::size_t i = 0; i < options.count; ++i) {
    LineSample sample;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 100) throw DataError("could not draw a CTC-feasible sample; widen the render scale");
      std::u32string text;
      const std::size_t len = length(rng);
      for (std::size_t k = 0; k < len; ++k) text.push_back(alphabet.characters()[pick(rng)]);
      const std::uint64_t render_seed = rng();
      sample = render_line(metrics::codepoints_to_utf8(text), options.style, render_seed, alphabet, options.height);
      const std::size_t frames = sample.image.dim(2) / std::max<std::size_t>(options.pool_factor, 1);
      if (frames >= ctc::required_frames(sample.labels)) break;
    }
    if (i < split.train) out.train.push_back(std::move(sample));
    else if (i < split.train + split.val) out.val.push_back(std::move(sample));
    else out.test.push_back(std::move(sample));
  }
  return out;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path.string());
  auto token = [&]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  if (token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (img.width == 0 || img.height == 0) throw DataError(path.string() + ": empty image");
  img.pixels.resize(img.width * img.height);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError(path.string() + ": truncated pixel data");
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write image " + path.string());
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

GrayImage to_gray(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw DataError("expected a [1,H,W] image, got " + shape_str(image.shape()));
  GrayImage g;
  g.height = image.dim(1);
  g.width = image.dim(2);
  g.pixels.reserve(image.numel());
  for (double v : image.data()) g.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return g;
}

Tensor resize_to_height(const GrayImage& image, std::size_t height) {
  if (height == 0) throw DataError("target height must be positive");
  const double ratio = static_cast<double>(height) / static_cast<double>(image.height);
  const std::size_t width = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(image.width * ratio)));
  std::vector<double> out(height * width);
  if (height == image.height && width == image.width) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.pixels[i] / 255.0;
    return Tensor({1, height, width}, std::move(out));
  }
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  auto px = [&](std::size_t r, std::size_t c) { return image.pixels[r * image.width + c] / 255.0; };
  for (std::size_t r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double ly = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double lx = x - static_cast<double>(x0);
      out[r * width + c] = (1 - ly) * ((1 - lx) * px(y0, x0) + lx * px(y0, x1)) +
                           ly * ((1 - lx) * px(y1, x0) + lx * px(y1, x1));
    }
  }
  return Tensor({1, height, width}, std::move(out));
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  m.alphabet = Alphabet::read(m.root / "alphabet.txt");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError(where + "expected 'image<TAB>transcript'");
    }
    ManifestEntry e{line.substr(0, tab), line.substr(tab + 1)};
    if (!std::filesystem::exists(m.root / e.image_path)) throw DataError(where + "image " + e.image_path + " not found");
    try {
      m.alphabet.encode(e.transcript);
    } catch (const DataError& err) {
      throw DataError(where + err.what());
    }
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError(path.string() + ": manifest has no entries");
  return m;
}

std::vector<LineSample> load_samples(const Manifest& manifest, std::size_t height) {
  std::vector<LineSample> out;
  out.reserve(manifest.entries.size());
  for (const ManifestEntry& e : manifest.entries) {
    LineSample s;
    s.image = resize_to_height(read_pgm(manifest.root / e.image_path), height);
    s.transcript = e.transcript;
    s.labels = manifest.alphabet.encode(e.transcript);
    s.path = e.image_path;
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());
  dataset.alphabet.write(dir / "alphabet.txt");
  std::size_t index = 0;
  auto emit = [&](std::vector<LineSample>& split, const char* name) {
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / name).string());
    for (LineSample& s : split) {
      std::ostringstream rel;
      rel << "images/" << std::setw(6) << std::setfill('0') << index++ << ".pgm";
      s.path = rel.str();
      write_pgm(dir / s.path, to_gray(s.image));
      os << s.path << '\t' << s.transcript << '\n';
    }
  };
  emit(dataset.train, "train.tsv");
  emit(dataset.val, "val.tsv");
  emit(dataset.test, "test.tsv");
}

}  // namespace sonn::data
