#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "doctest.h"
#include "sonn/metrics.hpp"

using namespace sonn::metrics;

namespace {

std::size_t recursive_distance(const std::string& a, const std::string& b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::string ra = a.substr(1), rb = b.substr(1);
  return std::min({recursive_distance(ra, b) + 1, recursive_distance(a, rb) + 1,
                   recursive_distance(ra, rb) + (a[0] == b[0] ? 0 : 1)});
}

std::vector<std::string> all_strings(std::size_t max_len, const std::string& symbols) {
  std::vector<std::string> out{""};
  std::vector<std::string> frontier{""};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::string> next;
    for (const auto& s : frontier)
      for (char c : symbols) next.push_back(s + c);
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

/// Two-sided p by enumerating every sign assignment of the ranks.
double enumerated_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] - a[i] != 0.0) d.push_back(b[i] - a[i]);
  }
  std::vector<double> mags;
  for (double v : d) mags.push_back(std::abs(v));
  const std::vector<double> ranks = average_ranks(mags);
  double observed = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) observed += ranks[i];
  }
  const std::size_t n = d.size();
  std::size_t le = 0, ge = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1) w += ranks[i];
    }
    if (w <= observed + 1e-9) ++le;
    if (w >= observed - 1e-9) ++ge;
  }
  const double denom = std::ldexp(1.0, int(n));
  return std::min(1.0, 2.0 * std::min(double(le) / denom, double(ge) / denom));
}

}  // namespace

TEST_CASE("levenshtein examples") {
  CHECK(levenshtein_of(std::string("abc"), std::string("abc")).distance == 0);
  const EditResult ins = levenshtein_of(std::string(""), std::string("abc"));
  CHECK(ins.distance == 3);
  CHECK(ins.counts.insertions == 3);
  CHECK(levenshtein_of(std::string("kitten"), std::string("sitting")).distance == 3);
  CHECK(levenshtein_of(std::string("kitten"), std::string("sitting")).distance ==
        recursive_distance("kitten", "sitting"));
}

TEST_CASE("levenshtein matches recursive oracle on short strings") {
  const auto strings = all_strings(4, "abc");
  for (const auto& a : strings) {
    for (const auto& b : strings) {
      const EditResult r = levenshtein_of(a, b);
      REQUIRE(r.distance == recursive_distance(a, b));
      REQUIRE(r.counts.errors() == r.distance);
      REQUIRE(r.counts.reference_length == a.size());
    }
  }
}

TEST_CASE("levenshtein symmetry and triangle inequality") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(0, 8), sym(0, 3);
  const auto random_string = [&] {
    std::string s(std::size_t(len(rng)), 'a');
    for (char& c : s) c = char('a' + sym(rng));
    return s;
  };
  for (int trial = 0; trial < 500; ++trial) {
    const std::string a = random_string(), b = random_string(), c = random_string();
    const EditResult ab = levenshtein_of(a, b), ba = levenshtein_of(b, a);
    CHECK(ab.distance == ba.distance);
    CHECK(levenshtein_of(a, c).distance <= ab.distance + levenshtein_of(b, c).distance);
  }
  const EditResult del = levenshtein_of(std::string("abcd"), std::string("ab"));
  const EditResult ins = levenshtein_of(std::string("ab"), std::string("abcd"));
  CHECK(del.counts.deletions == ins.counts.insertions);
  CHECK(del.counts.insertions == ins.counts.deletions);
}

TEST_CASE("backtrace prefers substitution, then deletion, then insertion") {
  const EditResult r = levenshtein_of(std::string("ab"), std::string("ba"));
  CHECK(r.distance == 2);
  CHECK(r.counts.substitutions == 2);
  const EditResult d = levenshtein_of(std::string("aab"), std::string("ab"));
  CHECK(d.counts.deletions == 1);
  CHECK(d.counts.substitutions == 0);
}

TEST_CASE("cer and wer examples") {
  CHECK(cer("same text", "same text") == 0.0);
  CHECK(cer("abcd", "abed") == 0.25);
  CHECK(wer("same text", "same text") == 0.0);
  CHECK(wer("a b", "a") == 0.5);
  CHECK(cer("", "") == 0.0);
  CHECK(std::isinf(cer("", "x")));

  const std::string ref = "if one walked slowly, between road and";
  const std::string hyp = "if are walked slanely, between Noad and";
  CHECK(char_edits(ref, hyp).distance == 6);
  CHECK(word_edits(ref, hyp).distance == 3);
  CHECK(word_edits(ref, hyp).counts.reference_length == 7);
  CHECK(wer(ref, hyp) == doctest::Approx(3.0 / 7.0).epsilon(1e-15));
  CHECK(cer(ref, hyp) == doctest::Approx(6.0 / double(ref.size())).epsilon(1e-15));
}

TEST_CASE("text compares as codepoints and words split on Unicode whitespace") {
  // Arabic letters are two bytes each in UTF-8.
  const std::string ref = "\xd8\xa8\xd9\x8a\xd8\xaa";
  const std::string hyp = "\xd8\xa8\xd8\xaa";
  CHECK(char_edits(ref, hyp).distance == 1);
  CHECK(char_edits(ref, hyp).counts.reference_length == 3);
  CHECK(split_words(utf8_to_codepoints("a\xe3\x80\x80" "b\t c")).size() == 3);
  CHECK(split_words(utf8_to_codepoints("   ")).empty());
  CHECK(codepoints_to_utf8(utf8_to_codepoints(ref)) == ref);
  CHECK_THROWS_AS(utf8_to_codepoints("\xff"), std::invalid_argument);
  CHECK(cer("Abc", "abc") == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("corpus_error_rates") {
  const CorpusRates same = corpus_error_rates({{"a b", "a b"}, {"cd", "cd"}});
  CHECK(same.cer == 0.0);
  CHECK(same.wer == 0.0);
  const CorpusRates single = corpus_error_rates({{"abcd efg", "abed ef"}});
  CHECK(single.cer == cer("abcd efg", "abed ef"));
  CHECK(single.wer == wer("abcd efg", "abed ef"));
  const CorpusRates two = corpus_error_rates({{"aaaaaaaaaa", "aaaaaaaaab"}, {"bbbbbbbbbb", "bbbbbbbccc"}});
  CHECK(two.cer == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(two.per_item.size() == 2);
  CHECK(two.per_item[1].cer == doctest::Approx(0.3));
  CHECK_THROWS(corpus_error_rates({}));
}

TEST_CASE("average_ranks shares ties") {
  const std::vector<double> v = {3.0, 1.0, 3.0, 2.0};
  CHECK(average_ranks(v) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
}

TEST_CASE("wilcoxon degenerate and reference cases") {
  const WilcoxonResult same = wilcoxon_signed_rank({{0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}});
  CHECK(same.z == 0.0);
  CHECK(same.p_two_tailed == 1.0);
  CHECK(same.nonzero == 0);

  // Exact p from an independent statistics package.
  const WilcoxonResult ex = wilcoxon_signed_rank(
      {{0.12, 0.30, 0.05, 0.44, 0.21, 0.09, 0.33, 0.18}, {0.10, 0.25, 0.07, 0.30, 0.20, 0.01, 0.22, 0.19}});
  CHECK(ex.exact);
  CHECK(ex.p_two_tailed == doctest::Approx(0.109375).epsilon(1e-14));
  CHECK(ex.w_plus == 6.0);

  // Normal approximation with ties, same package.
  const std::vector<double> a = {0.6, 0.9, 0.8, 0.2, 0.3, 0.9, 0.0, 0.8, 0.8, 0.5, 0.3, 0.3, 0.3, 0.4,
                                 0.5, 0.6, 1.0, 0.8, 0.6, 1.0, 0.2, 0.2, 0.6, 0.0, 0.0, 0.5, 0.5, 0.9,
                                 0.6, 0.5, 0.5, 0.2, 0.0, 0.2, 0.7, 0.2, 0.4, 0.0, 0.8, 0.2};
  const std::vector<double> b = {0.6, 0.6, 0.7, -0.0, 0.1, 0.7, 0.1, 0.7, 0.7, 0.3, 0.3, 0.2, 0.4, 0.3,
                                 0.5, 0.6, 0.8, 0.7, 0.3, 0.9, 0.1, 0.0, 0.4, 0.0, -0.1, 0.5, 0.4, 1.0,
                                 0.3, 0.5, 0.3, 0.2, -0.2, 0.0, 0.7, -0.0, 0.1, -0.3, 0.7, 0.2};
  const WilcoxonResult ap = wilcoxon_signed_rank({a, b});
  CHECK(ap.nonzero == 30);
  CHECK_FALSE(ap.exact);
  CHECK(ap.z == doctest::Approx(-4.443889385776084).epsilon(1e-12));
  CHECK(ap.p_two_tailed == doctest::Approx(8.834703880047026e-06).epsilon(1e-10));
  CHECK_THROWS(wilcoxon_signed_rank({{0.1}, {0.1, 0.2}}));
}

TEST_CASE("wilcoxon exact p equals sign enumeration for n <= 10") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> level(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + std::size_t(trial) % 10;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = level(rng) / 10.0;
      b[i] = level(rng) / 10.0;
    }
    const WilcoxonResult r = wilcoxon_signed_rank({a, b});
    if (r.nonzero == 0) continue;
    CHECK(r.exact);
    CHECK(r.p_two_tailed == doctest::Approx(enumerated_p(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("wilcoxon sign convention") {
  std::vector<double> a, b;
  for (int i = 0; i < 200; ++i) {
    a.push_back(0.5 + 0.001 * i);
    b.push_back(0.2 + 0.0005 * i);
  }
  const WilcoxonResult r = wilcoxon_signed_rank({a, b});
  CHECK(r.z < -10.0);
  CHECK(r.p_two_tailed < 1e-20);
  CHECK(wilcoxon_signed_rank({b, a}).z > 10.0);
}
