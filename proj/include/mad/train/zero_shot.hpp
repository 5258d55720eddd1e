#pragma once

#include <array>

#include "mad/train/trainer.hpp"

namespace mad::train {

// IA compares the image with the candidate text alone; IQA with the question
// and candidate together.
enum class MatchMode { IA, IQA };

std::string to_string(MatchMode mode);

// Per instance, the candidate whose teacher text feature has the highest
// cosine with the teacher image feature (ties toward the lower index).
Metrics zero_shot_match(TeacherPair& teacher, const data::DatasetSplit& split, MatchMode mode);

// cosine(image, question) per instance; the question is the hypothesis of
// the entailment task.
std::vector<double> hypothesis_similarities(TeacherPair& teacher, const data::DatasetSplit& split);

struct KMeans1d {
  std::array<double, 3> centroids{};       // ascending
  std::vector<std::size_t> assignment;     // cluster index per input
  std::size_t iterations = 0;
};

// k = 3 on scalars, centroids seeded at min / median / max, iterated until the
// assignment stops changing. DegenerateInput for fewer than 3 distinct values.
KMeans1d kmeans3(std::span<const double> values);

// Entailment labels (0 entailment, 1 neutral, 2 contradiction) from
// similarity clusters: highest centroid entails, lowest contradicts.
std::vector<std::size_t> zero_shot_entailment_kmeans(std::span<const double> similarities);

// Ranks a fixed answer list by teacher-text cosine with a question.
class AnswerFilter {
 public:
  AnswerFilter(models::TextTower& text, std::vector<data::TokenId> answers);

  // Indices into the answer list, best first, ties toward the lower index.
  // KTooLarge when k exceeds the list size.
  std::vector<std::size_t> top_k(const data::TokenSequence& question, std::size_t k);
  std::size_t size() const noexcept { return answers_.size(); }

 private:
  models::TextTower& text_;
  std::vector<data::TokenId> answers_;
  Tensor answer_features_;
};

std::vector<std::size_t> zero_shot_answer_filter(models::TextTower& text,
                                                 const data::TokenSequence& question,
                                                 const std::vector<data::TokenId>& answers,
                                                 std::size_t k);

// Fraction of instances whose gold candidate appears in the top k.
double recall_at_k(AnswerFilter& filter, const data::DatasetSplit& split, std::size_t k);

}  // namespace mad::train
