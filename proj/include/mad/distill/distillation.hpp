#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mad/keywords/keyword_scorer.hpp"
#include "mad/models/student.hpp"
#include "mad/models/teacher.hpp"

namespace mad::distill {

using models::Student;
using models::StudentOutputs;
using models::TeacherOutputs;

struct DistillationConfig {
  double w = 0.05;
  std::size_t m = 2;
  bool enable_ts = true;
  bool enable_cw = true;
  bool enable_af = true;
  bool distill_vision = true;
  bool distill_text = true;

  // Throws SpecInvalid for w < 0 or non-finite, m == 0, or m above max_len.
  void validate(std::size_t max_len) const;
};

struct ScoreDistribution {
  std::vector<double> s_vr;  // visual relevance, cosine shifted into [0,2]
  std::vector<double> s_si;  // keyword importance
  std::vector<double> s_j;   // sum of the two L1-normalised addends
};

struct DistillLossBreakdown {
  double L_t = 0.0;
  double L_d_v = 0.0;
  double L_d_t = 0.0;
  double L_dt_prime = 0.0;
  double w_r = 0.0;  // weight actually applied to the distillation terms
  double L_final = 0.0;
};

std::string breakdown_csv_header();
std::string breakdown_csv_row(std::size_t step, const DistillLossBreakdown& b);

struct MdTerms {
  Var vision;  // mean over pairings of l1(V_t, proj(V_s))
  Var text;    // mean over pairings of l1(T_t, proj(T_s))
};

// Student features must already be projected to the teacher dimension:
// image_proj and text_proj are [C, D_t], one row per candidate pairing.
MdTerms md_loss(Tape& tape, const TeacherOutputs& teacher, Var image_proj, Var text_proj);

double compose_md(double L_t, double L_d_v, double L_d_t, double w);
Var compose_md(Var L_t, Var L_d_v, Var L_d_t, double w);

// Combines raw score lists; an all-zero list contributes a uniform 1/z.
ScoreDistribution combine_scores(std::vector<double> s_vr, std::vector<double> s_si);

// Scores the tokens of one pairing text against the teacher image feature.
// student_tokens holds the projected student token features [z, D_t].
ScoreDistribution token_scores(const data::TokenSequence& tokens, const Tensor& teacher_image,
                               const Tensor& student_tokens, const keywords::NGramStats& stats);

// Indices of the m largest scores, ties toward the lower index, ascending.
std::vector<std::size_t> select_tokens(std::span<const double> scores, std::size_t m);

// Mean over the selected rows of the row-wise L1 distance.
Var selected_token_loss(Var teacher_tokens, Var student_tokens, std::span<const std::size_t> indices);

double adaptive_weight(double w, std::size_t m);

// Ratio of the teacher's to the student's maximum softmax probability.
double confidence_ratio(std::span<const double> teacher_logits, std::span<const double> student_logits);
double confidence_gate(std::span<const double> teacher_logits, std::span<const double> student_logits,
                       double w_prime);

struct MadLoss {
  Var total;
  DistillLossBreakdown breakdown;
  // Selected token indices per candidate pairing (empty without selection).
  std::vector<std::vector<std::size_t>> selected;
};

// Full objective for one instance. `task_loss` is the student's task loss on
// the same tape that produced `student`.
MadLoss mad_loss(Tape& tape, Student& model, Var task_loss, const data::Instance& instance,
                 const TeacherOutputs& teacher,
                 const StudentOutputs& student, const DistillationConfig& config,
                 const keywords::NGramStats& stats);

}  // namespace mad::distill
