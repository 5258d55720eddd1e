#include "mad/train/zero_shot.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "mad/error.hpp"

namespace mad::train {

std::string to_string(MatchMode mode) { return mode == MatchMode::IA ? "ia" : "iqa"; }

namespace {

Tensor text_features(models::TextTower& text, const std::vector<data::TokenSequence>& texts) {
  std::vector<const data::TokenSequence*> ptrs;
  for (const auto& t : texts) ptrs.push_back(&t);
  Tape tape;
  return text.encode(tape, ptrs).eos.value();
}

std::size_t best_cosine(const Tensor& image, const Tensor& texts) {
  std::size_t best = 0;
  double top = -2.0;
  for (std::size_t c = 0; c < texts.shape()[0]; ++c) {
    const double s = eval::cosine_similarity(image.data(), texts.row(c));
    if (s > top) {
      top = s;
      best = c;
    }
  }
  return best;
}

}  // namespace

Metrics zero_shot_match(TeacherPair& teacher, const data::DatasetSplit& split, MatchMode mode) {
  std::vector<std::vector<double>> scores;
  for (const auto& inst : split.instances) {
    std::vector<data::TokenSequence> texts;
    for (std::size_t c = 0; c < inst.candidates.size(); ++c)
      texts.push_back(mode == MatchMode::IA ? inst.candidates[c] : inst.pair_text(c));
    const Tensor image = teacher.vision->encode(inst.image);
    const Tensor feats = text_features(*teacher.text, texts);
    // One-hot scores keep the cosine tie rule in a single place.
    std::vector<double> s(inst.candidates.size(), 0.0);
    s[best_cosine(image, feats)] = 1.0;
    scores.push_back(std::move(s));
  }
  return metrics_from_logits(split, scores);
}

std::vector<double> hypothesis_similarities(TeacherPair& teacher, const data::DatasetSplit& split) {
  std::vector<double> out;
  for (const auto& inst : split.instances) {
    const Tensor image = teacher.vision->encode(inst.image);
    const Tensor q = text_features(*teacher.text, {inst.question});
    out.push_back(eval::cosine_similarity(image.data(), q.row(0)));
  }
  return out;
}

KMeans1d kmeans3(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::set<double>(sorted.begin(), sorted.end()).size() < 3)
    throw Error(ErrorCode::DegenerateInput, "k-means needs at least 3 distinct values");
  KMeans1d km;
  km.centroids = {sorted.front(), sorted[(sorted.size() - 1) / 2], sorted.back()};
  auto nearest = [&](double v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (std::abs(v - km.centroids[k]) < std::abs(v - km.centroids[best])) best = k;
    return best;
  };
  // Iterate on the sorted multiset so the result does not depend on input order.
  std::vector<std::size_t> assign(sorted.size(), 3);
  for (km.iterations = 1; km.iterations <= 1000; ++km.iterations) {
    bool changed = false;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const std::size_t k = nearest(sorted[i]);
      changed |= k != assign[i];
      assign[i] = k;
    }
    if (!changed) break;
    std::array<double, 3> total{};
    std::array<std::size_t, 3> count{};
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      total[assign[i]] += sorted[i];
      ++count[assign[i]];
    }
    for (std::size_t k = 0; k < 3; ++k)
      if (count[k]) km.centroids[k] = total[k] / static_cast<double>(count[k]);
  }
  for (double v : values) km.assignment.push_back(nearest(v));
  return km;
}

std::vector<std::size_t> zero_shot_entailment_kmeans(std::span<const double> similarities) {
  const KMeans1d km = kmeans3(similarities);
  // Seeding keeps centroids ordered: cluster 2 is the highest.
  std::vector<std::size_t> labels;
  for (std::size_t a : km.assignment) labels.push_back(2 - a);
  return labels;
}

AnswerFilter::AnswerFilter(models::TextTower& text, std::vector<data::TokenId> answers)
    : text_(text), answers_(std::move(answers)) {
  if (answers_.empty()) throw Error(ErrorCode::EmptyCorpus, "empty answer list");
  std::vector<data::TokenSequence> texts;
  for (data::TokenId a : answers_) texts.push_back({a});
  answer_features_ = text_features(text_, texts);
}

std::vector<std::size_t> AnswerFilter::top_k(const data::TokenSequence& question, std::size_t k) {
  if (k > answers_.size())
    throw Error(ErrorCode::KTooLarge,
                "k=" + std::to_string(k) + " exceeds " + std::to_string(answers_.size()) + " answers");
  const Tensor q = text_features(text_, {question});
  std::vector<double> sims(answers_.size());
  for (std::size_t a = 0; a < answers_.size(); ++a)
    sims[a] = eval::cosine_similarity(q.row(0), answer_features_.row(a));
  std::vector<std::size_t> order(answers_.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  order.resize(k);
  return order;
}

std::vector<std::size_t> zero_shot_answer_filter(models::TextTower& text,
                                                 const data::TokenSequence& question,
                                                 const std::vector<data::TokenId>& answers,
                                                 std::size_t k) {
  AnswerFilter f(text, answers);
  return f.top_k(question, k);
}

double recall_at_k(AnswerFilter& filter, const data::DatasetSplit& split, std::size_t k) {
  if (split.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (const auto& inst : split.instances) {
    const auto top = filter.top_k(inst.question, k);
    hits += std::find(top.begin(), top.end(), inst.gold) != top.end();
  }
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

}  // namespace mad::train
