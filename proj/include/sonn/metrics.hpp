#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sonn::metrics {

/// Operation counts of one optimal alignment of a hypothesis against a
/// reference.
struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
};

struct EditResult {
  std::size_t distance = 0;
  EditCounts counts;
};

/// Unit-cost edit distance from `reference` to `hypothesis`. Counts come from
/// a single backtrace preferring match/substitution, then deletion, then
/// insertion.
template <typename Symbol>
EditResult levenshtein(std::span<const Symbol> reference, std::span<const Symbol> hypothesis) {
  const std::size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto cell = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) cell(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) cell(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = cell(i - 1, j - 1) + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cell(i, j) = std::min({diag, cell(i - 1, j) + 1, cell(i, j - 1) + 1});
    }
  }
  EditResult out;
  out.distance = cell(n, m);
  out.counts.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = reference[i - 1] == hypothesis[j - 1];
      if (cell(i, j) == cell(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++out.counts.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && cell(i, j) == cell(i - 1, j) + 1) {
      ++out.counts.deletions;
      --i;
    } else {
      ++out.counts.insertions;
      --j;
    }
  }
  return out;
}

template <typename Container>
EditResult levenshtein_of(const Container& reference, const Container& hypothesis) {
  using Symbol = typename Container::value_type;
  return levenshtein<Symbol>(std::span<const Symbol>(reference.data(), reference.size()),
                             std::span<const Symbol>(hypothesis.data(), hypothesis.size()));
}

/// Decodes UTF-8 into Unicode scalar values. Throws std::invalid_argument on
/// malformed input.
std::u32string utf8_to_codepoints(std::string_view text);
std::string codepoints_to_utf8(std::u32string_view text);

/// Splits on runs of Unicode whitespace.
std::vector<std::u32string> split_words(std::u32string_view text);

EditResult char_edits(std::string_view reference, std::string_view hypothesis);
EditResult word_edits(std::string_view reference, std::string_view hypothesis);

/// Character error rate: codepoint edit distance over reference length.
/// Empty reference gives 0 for an empty hypothesis and +inf otherwise.
double cer(std::string_view reference, std::string_view hypothesis);
/// Word error rate over whitespace-separated tokens; same empty convention.
double wer(std::string_view reference, std::string_view hypothesis);

struct ItemRates {
  double cer = 0.0;
  double wer = 0.0;
  EditCounts chars;
  EditCounts words;
};

struct CorpusRates {
  double cer = 0.0;  // summed char edits / summed reference chars
  double wer = 0.0;  // summed word edits / summed reference words
  std::vector<ItemRates> per_item;
};

/// Micro-averaged rates over (reference, hypothesis) pairs. Throws on an
/// empty list.
CorpusRates corpus_error_rates(const std::vector<std::pair<std::string, std::string>>& pairs);

/// Paired per-item errors of two systems on the same items.
struct PairedErrorSample {
  std::vector<double> error_a;
  std::vector<double> error_b;
};

struct WilcoxonResult {
  double z = 0.0;
  double p_two_tailed = 1.0;
  std::size_t nonzero = 0;  // pairs with a non-zero difference
  double w_plus = 0.0;      // rank sum of positive (b - a) differences
  bool exact = false;       // p from the exact null distribution
};

/// Signed-rank test on d = b - a. Zero differences are dropped and tied
/// magnitudes share their average rank. z uses the tie-corrected normal
/// approximation and is negative when b has the lower errors. p is exact up
/// to kWilcoxonExactLimit non-zero pairs and normal beyond.
WilcoxonResult wilcoxon_signed_rank(const PairedErrorSample& sample);

inline constexpr std::size_t kWilcoxonExactLimit = 25;

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> values);

}  // namespace sonn::metrics
