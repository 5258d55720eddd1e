#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mad/data/task.hpp"

namespace mad::keywords {

using data::TokenId;
using data::TokenSequence;

// Document-frequency statistics of a token corpus. Bigram counts are kept
// for completeness; scoring only reads unigram document frequencies.
struct NGramStats {
  std::size_t documents = 0;
  std::map<TokenId, std::size_t> df;
  std::map<std::pair<TokenId, TokenId>, std::size_t> bigrams;

  std::size_t doc_freq(TokenId t) const;
  friend bool operator==(const NGramStats&, const NGramStats&) = default;
};

NGramStats fit_corpus(const std::vector<TokenSequence>& corpus);

// Smoothed inverse document frequency ln((1 + N) / (1 + df)).
double idf(TokenId token, const NGramStats& stats);

// Importance per token, higher is more important: idf times 1.5 on a token's
// first occurrence in the sequence and times 1 on repeats.
std::vector<double> score_tokens(const TokenSequence& tokens, const NGramStats& stats);

std::string to_json(const NGramStats& stats);
NGramStats stats_from_json(const std::string& text);
void save_stats(const NGramStats& stats, const std::filesystem::path& path);
NGramStats load_stats(const std::filesystem::path& path);

}  // namespace mad::keywords
