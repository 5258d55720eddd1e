#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mad/keywords/keyword_scorer.hpp"
#include "test_util.hpp"

using namespace mad;
using namespace mad::keywords;
using test::code_of;

namespace {

// Brute-force reference: counts documents containing the token by scanning.
std::vector<double> oracle_scores(const TokenSequence& t, const std::vector<TokenSequence>& corpus) {
  std::vector<double> out;
  for (std::size_t l = 0; l < t.size(); ++l) {
    double df = 0;
    for (const auto& doc : corpus) {
      bool hit = false;
      for (TokenId w : doc) hit = hit || w == t[l];
      df += hit ? 1 : 0;
    }
    bool first = true;
    for (std::size_t k = 0; k < l; ++k) first = first && t[k] != t[l];
    const double n = static_cast<double>(corpus.size());
    out.push_back(std::log((1 + n) / (1 + df)) * (first ? 1.5 : 1.0));
  }
  return out;
}

std::vector<TokenSequence> random_corpus(std::mt19937_64& rng, std::size_t docs) {
  std::uniform_int_distribution<TokenId> tok(0, 15);
  std::uniform_int_distribution<std::size_t> len(1, 8);
  std::vector<TokenSequence> corpus(docs);
  for (auto& d : corpus) {
    d.resize(len(rng));
    for (auto& t : d) t = tok(rng);
  }
  return corpus;
}

}  // namespace

TEST_CASE("fit_corpus counts documents, not occurrences") {
  const auto one = fit_corpus({{1, 2}});
  CHECK(one.documents == 1);
  CHECK(one.doc_freq(1) == 1);
  CHECK(one.doc_freq(2) == 1);
  CHECK(one.doc_freq(3) == 0);

  const auto rep = fit_corpus({{4, 4, 4}, {4, 5}});
  CHECK(rep.doc_freq(4) == 2);
  CHECK(rep.bigrams.at({4, 4}) == 2);
  CHECK(rep.bigrams.at({4, 5}) == 1);

  CHECK(code_of([] { fit_corpus({}); }) == ErrorCode::EmptyCorpus);
}

TEST_CASE("fit_corpus is order independent and scales with duplication") {
  std::mt19937_64 rng(3);
  auto corpus = random_corpus(rng, 40);
  const auto base = fit_corpus(corpus);
  std::shuffle(corpus.begin(), corpus.end(), rng);
  CHECK(fit_corpus(corpus) == base);

  auto doubled = corpus;
  doubled.insert(doubled.end(), corpus.begin(), corpus.end());
  const auto twice = fit_corpus(doubled);
  CHECK(twice.documents == 2 * base.documents);
  for (const auto& [t, n] : base.df) CHECK(twice.doc_freq(t) == 2 * n);
  for (const auto& [p, n] : base.bigrams) CHECK(twice.bigrams.at(p) == 2 * n);
}

TEST_CASE("score_tokens examples") {
  const auto stats = fit_corpus({{1, 2}, {1, 3}, {1, 4}});
  const auto s = score_tokens({1, 2}, stats);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(std::log(4.0 / 2.0) * 1.5));

  // Tokens absent from the corpus take the maximal idf and tie with each other.
  const auto rare = score_tokens({7, 8, 9}, stats);
  CHECK(rare[0] > 0.0);
  CHECK(rare[0] == rare[1]);
  CHECK(rare[1] == rare[2]);
  CHECK(rare[0] == doctest::Approx(std::log(4.0) * 1.5));
}

TEST_CASE("score_tokens matches a scalar-loop oracle") {
  const std::vector<TokenSequence> hand = {{1, 2, 3}, {2, 3, 3, 4}, {5}, {1, 1, 6, 2}};
  const auto stats = fit_corpus(hand);
  const TokenSequence query = {2, 1, 2, 9, 5, 3};
  const auto got = score_tokens(query, stats);
  const auto want = oracle_scores(query, hand);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-15));

  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto corpus = random_corpus(rng, 12);
    const auto st = fit_corpus(corpus);
    const auto q = random_corpus(rng, 1).front();
    const auto a = score_tokens(q, st);
    const auto b = oracle_scores(q, corpus);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("scores are nonnegative and repeats never outrank first occurrences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto stats = fit_corpus(random_corpus(rng, 10));
    const auto q = random_corpus(rng, 1).front();
    const auto s = score_tokens(q, stats);
    for (std::size_t i = 0; i < q.size(); ++i) {
      CHECK(s[i] >= 0.0);
      CHECK(std::isfinite(s[i]));
      for (std::size_t k = 0; k < i; ++k)
        if (q[k] == q[i]) CHECK(s[i] <= s[k]);
    }
  }
}

TEST_CASE("duplicating the corpus preserves the token ranking") {
  // With add-one smoothing the idf values themselves move under duplication;
  // their order does not, and they approach the unsmoothed ln(N/df).
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto corpus = random_corpus(rng, 10);
    auto tripled = corpus;
    for (int k = 0; k < 2; ++k) tripled.insert(tripled.end(), corpus.begin(), corpus.end());
    const auto a = fit_corpus(corpus), b = fit_corpus(tripled);
    for (TokenId x = 0; x < 16; ++x)
      for (TokenId y = 0; y < 16; ++y) {
        const double da = idf(x, a) - idf(y, a), db = idf(x, b) - idf(y, b);
        CHECK((da > 0) == (db > 0));
        CHECK((da == 0) == (db == 0));
        if (b.doc_freq(x) > 0) {
          const double unsmoothed = std::log(static_cast<double>(b.documents) / b.doc_freq(x));
          CHECK(std::abs(idf(x, b) - unsmoothed) <= std::abs(idf(x, a) - unsmoothed) + 1e-12);
        }
      }
  }
}

TEST_CASE("stats json round trip") {
  std::mt19937_64 rng(1);
  const auto stats = fit_corpus(random_corpus(rng, 20));
  CHECK(stats_from_json(to_json(stats)) == stats);
  const auto path = std::filesystem::temp_directory_path() / "mad_test_stats.json";
  save_stats(stats, path);
  CHECK(load_stats(path) == stats);
  std::filesystem::remove(path);
  CHECK(code_of([] { stats_from_json("{\"documents\": 1"); }) == ErrorCode::ParseError);
}
