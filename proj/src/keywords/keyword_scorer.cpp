#include "mad/keywords/keyword_scorer.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mad/error.hpp"

namespace mad::keywords {

std::size_t NGramStats::doc_freq(TokenId t) const {
  auto it = df.find(t);
  return it == df.end() ? 0 : it->second;
}

NGramStats fit_corpus(const std::vector<TokenSequence>& corpus) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "keyword corpus is empty");
  NGramStats stats;
  stats.documents = corpus.size();
  for (const auto& doc : corpus) {
    for (TokenId t : std::set<TokenId>(doc.begin(), doc.end())) ++stats.df[t];
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) ++stats.bigrams[{doc[i], doc[i + 1]}];
  }
  return stats;
}

double idf(TokenId token, const NGramStats& stats) {
  const double n = static_cast<double>(stats.documents);
  const double df = static_cast<double>(stats.doc_freq(token));
  return std::log((1.0 + n) / (1.0 + df));
}

std::vector<double> score_tokens(const TokenSequence& tokens, const NGramStats& stats) {
  std::vector<double> out;
  out.reserve(tokens.size());
  std::set<TokenId> seen;
  for (TokenId t : tokens) {
    const double bonus = seen.insert(t).second ? 0.5 : 0.0;
    out.push_back(idf(t, stats) * (1.0 + bonus));
  }
  return out;
}

std::string to_json(const NGramStats& stats) {
  nlohmann::json j;
  j["documents"] = stats.documents;
  nlohmann::json df = nlohmann::json::object();
  for (const auto& [t, n] : stats.df) df[std::to_string(t)] = n;
  j["df"] = std::move(df);
  nlohmann::json bi = nlohmann::json::array();
  for (const auto& [p, n] : stats.bigrams) bi.push_back({p.first, p.second, n});
  j["bigrams"] = std::move(bi);
  return j.dump();
}

NGramStats stats_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NGramStats stats;
    stats.documents = j.at("documents").get<std::size_t>();
    for (const auto& [key, n] : j.at("df").items())
      stats.df[static_cast<TokenId>(std::stoul(key))] = n.get<std::size_t>();
    for (const auto& row : j.at("bigrams"))
      stats.bigrams[{row.at(0).get<TokenId>(), row.at(1).get<TokenId>()}] =
          row.at(2).get<std::size_t>();
    return stats;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("keyword stats: ") + e.what());
  }
}

void save_stats(const NGramStats& stats, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << to_json(stats) << '\n';
}

NGramStats load_stats(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return stats_from_json(ss.str());
}

}  // namespace mad::keywords
