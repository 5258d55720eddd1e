#include "mad/distill/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mad/error.hpp"

namespace mad::distill {

void DistillationConfig::validate(std::size_t max_len) const {
  if (!std::isfinite(w) || w < 0.0) throw Error(ErrorCode::SpecInvalid, "w must be finite and >= 0");
  if (m == 0) throw Error(ErrorCode::SpecInvalid, "m must be at least 1");
  if (m > max_len)
    throw Error(ErrorCode::SpecInvalid,
                "m=" + std::to_string(m) + " exceeds max sequence length " + std::to_string(max_len));
}

std::string breakdown_csv_header() { return "step,L_t,L_d_v,L_d_t,L_dt_prime,w_r,L_final"; }

std::string breakdown_csv_row(std::size_t step, const DistillLossBreakdown& b) {
  std::ostringstream out;
  out.precision(17);
  out << step << ',' << b.L_t << ',' << b.L_d_v << ',' << b.L_d_t << ',' << b.L_dt_prime << ','
      << b.w_r << ',' << b.L_final;
  return out.str();
}

MdTerms md_loss(Tape& tape, const TeacherOutputs& teacher, Var image_proj, Var text_proj) {
  const std::size_t c = teacher.text.shape().at(0), dt = teacher.image.size();
  if (image_proj.shape() != Shape{c, dt} || text_proj.shape() != Shape{c, dt})
    throw Error(ErrorCode::ShapeMismatch, "projected student features must be [" +
                                              std::to_string(c) + "," + std::to_string(dt) + "]");
  Tensor image_rows = Tensor::zeros({c, dt});
  for (std::size_t i = 0; i < c; ++i)
    std::copy(teacher.image.data().begin(), teacher.image.data().end(), image_rows.row(i).begin());
  Var vision = mean(l1_distance_rows(tape.constant(image_rows), image_proj));
  Var text = mean(l1_distance_rows(tape.constant(teacher.text), text_proj));
  return {vision, text};
}

double compose_md(double L_t, double L_d_v, double L_d_t, double w) {
  return L_t + w * (L_d_v + L_d_t);
}

Var compose_md(Var L_t, Var L_d_v, Var L_d_t, double w) {
  return add(L_t, scale(add(L_d_v, L_d_t), w));
}

namespace {

std::vector<double> l1_normalised(std::vector<double> v) {
  double total = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, "non-finite token score");
    if (x < 0.0) throw Error(ErrorCode::DegenerateInput, "token scores must be nonnegative");
    total += x;
  }
  const double z = static_cast<double>(v.size());
  for (double& x : v) x = total == 0.0 ? 1.0 / z : x / total;
  return v;
}

}  // namespace

ScoreDistribution combine_scores(std::vector<double> s_vr, std::vector<double> s_si) {
  if (s_vr.empty() || s_vr.size() != s_si.size())
    throw Error(ErrorCode::ShapeMismatch, "score lists must be nonempty and of equal length");
  const auto a = l1_normalised(s_vr), b = l1_normalised(s_si);
  ScoreDistribution out{std::move(s_vr), std::move(s_si), std::vector<double>(a.size())};
  for (std::size_t i = 0; i < a.size(); ++i) out.s_j[i] = a[i] + b[i];
  return out;
}

ScoreDistribution token_scores(const data::TokenSequence& tokens, const Tensor& teacher_image,
                               const Tensor& student_tokens, const keywords::NGramStats& stats) {
  if (student_tokens.rank() != 2 || student_tokens.shape()[0] != tokens.size() ||
      student_tokens.shape()[1] != teacher_image.size())
    throw Error(ErrorCode::ShapeMismatch, "student token features do not match the token sequence");
  std::vector<double> s_vr(tokens.size());
  for (std::size_t l = 0; l < tokens.size(); ++l)
    s_vr[l] = eval::cosine_similarity(teacher_image.data(), student_tokens.row(l)) + 1.0;
  return combine_scores(std::move(s_vr), keywords::score_tokens(tokens, stats));
}

std::vector<std::size_t> select_tokens(std::span<const double> scores, std::size_t m) {
  if (m > scores.size())
    throw Error(ErrorCode::MTooLarge,
                "m=" + std::to_string(m) + " exceeds " + std::to_string(scores.size()) + " tokens");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Var selected_token_loss(Var teacher_tokens, Var student_tokens, std::span<const std::size_t> indices) {
  const std::size_t z = std::min(teacher_tokens.shape().at(0), student_tokens.shape().at(0));
  if (indices.empty()) throw Error(ErrorCode::IndexOutOfRange, "no token indices selected");
  for (std::size_t i : indices)
    if (i >= z) throw Error(ErrorCode::IndexOutOfRange, "token index " + std::to_string(i));
  return mean(l1_distance_rows(select_rows(teacher_tokens, indices), select_rows(student_tokens, indices)));
}

double adaptive_weight(double w, std::size_t m) { return w * static_cast<double>(m + 2) / 2.0; }

double confidence_ratio(std::span<const double> teacher_logits, std::span<const double> student_logits) {
  if (teacher_logits.size() != student_logits.size() || teacher_logits.size() < 2)
    throw Error(ErrorCode::ShapeMismatch, "gate needs two logit vectors of equal length >= 2");
  for (double x : teacher_logits)
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, "teacher logit");
  for (double x : student_logits)
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, "student logit");
  const auto pt = eval::softmax(teacher_logits), ps = eval::softmax(student_logits);
  return *std::max_element(pt.begin(), pt.end()) / *std::max_element(ps.begin(), ps.end());
}

double confidence_gate(std::span<const double> teacher_logits, std::span<const double> student_logits,
                       double w_prime) {
  return confidence_ratio(teacher_logits, student_logits) <= 1.0 ? 0.0 : w_prime;
}

MadLoss mad_loss(Tape& tape, Student& model, Var task_loss, const data::Instance& instance,
                 const TeacherOutputs& teacher, const StudentOutputs& student,
                 const DistillationConfig& config, const keywords::NGramStats& stats) {
  const std::size_t c = instance.candidates.size();
  if (teacher.logits.size() != c || student.logits.shape() != Shape{c})
    throw Error(ErrorCode::ShapeMismatch, "teacher and student disagree on the candidate count");
  MadLoss out;
  auto& b = out.breakdown;
  b.L_t = task_loss.value().item();

  std::vector<Var> terms;
  if (config.distill_vision || config.distill_text) {
    const MdTerms md = md_loss(tape, teacher, model.project_to_teacher(tape, student.batch.img),
                               model.project_to_teacher(tape, student.batch.cls));
    if (config.distill_vision) {
      b.L_d_v = md.vision.value().item();
      terms.push_back(md.vision);
    }
    if (config.distill_text) {
      b.L_d_t = md.text.value().item();
      terms.push_back(md.text);
    }
  }
  if (config.enable_ts) {
    Var tokens = model.project_to_teacher(tape, student.batch.tokens);
    std::vector<Var> per_pair;
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t begin = student.batch.token_offsets[k];
      const std::size_t z = student.batch.token_offsets[k + 1] - begin;
      Var mine = slice_rows(tokens, begin, z);
      const auto scores = token_scores(instance.pair_text(k), teacher.image, mine.value(), stats);
      out.selected.push_back(select_tokens(scores.s_j, config.m));
      per_pair.push_back(selected_token_loss(tape.constant(teacher.tokens[k]), mine, out.selected.back()));
    }
    Var dt = mean(stack(per_pair));
    b.L_dt_prime = dt.value().item();
    terms.push_back(dt);
  }

  double weight = config.enable_ts ? adaptive_weight(config.w, config.m) : config.w;
  if (config.enable_cw) weight = confidence_gate(teacher.logits.data(), student.logits.value().data(), weight);
  b.w_r = terms.empty() ? 0.0 : weight;
  b.L_final = b.L_t + b.w_r * (b.L_d_v + b.L_d_t + b.L_dt_prime);

  if (terms.empty() || weight == 0.0) {
    out.total = task_loss;
  } else {
    Var distill = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) distill = add(distill, terms[i]);
    out.total = add(task_loss, scale(distill, weight));
  }
  return out;
}

}  // namespace mad::distill
