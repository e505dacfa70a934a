#include "sonn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sonn::metrics {

std::u32string utf8_to_codepoints(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      len = 1;
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      len = 2;
      cp = lead & 0x1F;
    } else if ((lead & 0xF0) == 0xE0) {
      len = 3;
      cp = lead & 0x0F;
    } else if ((lead & 0xF8) == 0xF0) {
      len = 4;
      cp = lead & 0x07;
    } else {
      throw std::invalid_argument("malformed UTF-8 at byte " + std::to_string(i));
    }
    if (i + len > text.size()) throw std::invalid_argument("truncated UTF-8 sequence at byte " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const auto cont = static_cast<unsigned char>(text[i + k]);
      if ((cont & 0xC0) != 0x80) throw std::invalid_argument("malformed UTF-8 at byte " + std::to_string(i + k));
      cp = (cp << 6) | (cont & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string codepoints_to_utf8(std::u32string_view text) {
  std::string out;
  for (char32_t cp : text) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

namespace {

bool is_space(char32_t c) {
  switch (c) {
    case U' ': case U'\t': case U'\n': case U'\r': case U'\v': case U'\f':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

double rate(std::size_t errors, std::size_t length) {
  if (length == 0) return errors == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(errors) / static_cast<double>(length);
}

}  // namespace

std::vector<std::u32string> split_words(std::u32string_view text) {
  std::vector<std::u32string> words;
  std::u32string current;
  for (char32_t c : text) {
    if (is_space(c)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

EditResult char_edits(std::string_view reference, std::string_view hypothesis) {
  return levenshtein_of(utf8_to_codepoints(reference), utf8_to_codepoints(hypothesis));
}

EditResult word_edits(std::string_view reference, std::string_view hypothesis) {
  return levenshtein_of(split_words(utf8_to_codepoints(reference)), split_words(utf8_to_codepoints(hypothesis)));
}

double cer(std::string_view reference, std::string_view hypothesis) {
  const EditResult r = char_edits(reference, hypothesis);
  return rate(r.distance, r.counts.reference_length);
}

double wer(std::string_view reference, std::string_view hypothesis) {
  const EditResult r = word_edits(reference, hypothesis);
  return rate(r.distance, r.counts.reference_length);
}

CorpusRates corpus_error_rates(const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_error_rates needs at least one pair");
  CorpusRates out;
  std::size_t char_err = 0, char_len = 0, word_err = 0, word_len = 0;
  for (const auto& [ref, hyp] : pairs) {
    ItemRates item;
    const EditResult c = char_edits(ref, hyp);
    const EditResult w = word_edits(ref, hyp);
    item.chars = c.counts;
    item.words = w.counts;
    item.cer = rate(c.distance, c.counts.reference_length);
    item.wer = rate(w.distance, w.counts.reference_length);
    char_err += c.distance;
    char_len += c.counts.reference_length;
    word_err += w.distance;
    word_len += w.counts.reference_length;
    out.per_item.push_back(item);
  }
  out.cer = rate(char_err, char_len);
  out.wer = rate(word_err, word_len);
  return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

WilcoxonResult wilcoxon_signed_rank(const PairedErrorSample& sample) {
  if (sample.error_a.size() != sample.error_b.size()) {
    throw std::invalid_argument("paired samples differ in length");
  }
  std::vector<double> diffs;
  for (std::size_t i = 0; i < sample.error_a.size(); ++i) {
    const double d = sample.error_b[i] - sample.error_a[i];
    if (d != 0.0) diffs.push_back(d);
  }
  WilcoxonResult res;
  res.nonzero = diffs.size();
  if (diffs.empty()) return res;

  std::vector<double> magnitudes(diffs.size());
  std::transform(diffs.begin(), diffs.end(), magnitudes.begin(), [](double d) { return std::abs(d); });
  const std::vector<double> ranks = average_ranks(magnitudes);
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (diffs[i] > 0.0) res.w_plus += ranks[i];
  }

  const double n = static_cast<double>(diffs.size());
  double tie_term = 0.0;
  {
    std::vector<double> sorted = magnitudes;
    std::sort(sorted.begin(), sorted.end());
    std::size_t i = 0;
    while (i < sorted.size()) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  res.z = var > 0.0 ? (res.w_plus - mean) / std::sqrt(var) : 0.0;

  if (diffs.size() <= kWilcoxonExactLimit) {
    // Null distribution of 2*W+ over all sign assignments; doubled ranks are
    // integers even with ties.
    std::vector<std::size_t> doubled(ranks.size());
    std::size_t max_sum = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      doubled[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
      max_sum += doubled[i];
    }
    std::vector<double> counts(max_sum + 1, 0.0);
    counts[0] = 1.0;
    std::size_t reach = 0;
    for (std::size_t r : doubled) {
      for (std::size_t s = reach + 1; s-- > 0;) {
        if (counts[s] != 0.0) counts[s + r] += counts[s];
      }
      reach += r;
    }
    const auto observed = static_cast<std::size_t>(std::lround(2.0 * res.w_plus));
    const double total = std::ldexp(1.0, static_cast<int>(diffs.size()));
    double le = 0.0, ge = 0.0;
    for (std::size_t s = 0; s <= max_sum; ++s) {
      if (s <= observed) le += counts[s];
      if (s >= observed) ge += counts[s];
    }
    res.p_two_tailed = std::min(1.0, 2.0 * std::min(le, ge) / total);
    res.exact = true;
  } else {
    res.p_two_tailed = std::erfc(std::abs(res.z) / std::sqrt(2.0));
  }
  return res;
}

}  // namespace sonn::metrics
