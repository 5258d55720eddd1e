#pragma once

#include <map>
#include <string>
#include <vector>

#include "mad/distill/distillation.hpp"
#include "mad/keywords/keyword_scorer.hpp"
#include "mad/train/config.hpp"

namespace mad::train {

using models::Student;
using models::TeacherPair;

struct Metrics {
  double accuracy = 0.0;
  std::map<std::string, double> per_category;
  std::vector<std::size_t> predictions;
  // Mean composed loss per epoch (training runs only).
  std::vector<double> loss_curve;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
};

// Argmax per instance (ties toward the lower index) scored against gold.
Metrics metrics_from_logits(const data::DatasetSplit& split,
                            const std::vector<std::vector<double>>& logits);

struct StepLog {
  std::size_t step = 0;
  distill::DistillLossBreakdown loss;  // mean over the batch
};

struct StageMark {
  std::string name;
  std::size_t first_step = 0;
  std::size_t steps = 0;
};

struct RunRecord {
  std::string config_text;
  std::string config_hash;
  std::string data_hash;
  Metrics metrics;
  std::vector<StepLog> log;
  std::vector<StageMark> stages;
};

// Frozen teacher plus the keyword statistics used by token selection. A null
// teacher is allowed when every distillation term is disabled.
struct Guidance {
  TeacherPair* teacher = nullptr;
  const keywords::NGramStats* stats = nullptr;
};

bool uses_teacher(const distill::DistillationConfig& config);

// Task finetuning with the configured distillation objective. Throws
// Diverged (naming the step) when the loss stops being finite.
RunRecord train(Student& student, const Guidance& guidance, const data::DatasetSplit& split,
                const distill::DistillationConfig& dconfig, const TrainConfig& tconfig);

struct AdaptLosses {
  Var mlm;
  Var itm;
};

// Masked-token reconstruction on each instance's gold pairing text and
// image-text matching against in-batch rotated images. BatchTooSmall below 2.
AdaptLosses l_adapt_losses(Tape& tape, Student& student,
                           std::span<const data::Instance* const> batch, Rng& rng,
                           double mask_rate = 0.15);

// Two stages: adaptation (MLM + ITM, plus plain feature distillation when
// enabled) then task finetuning with a fresh optimizer. With AF disabled this
// is exactly train().
RunRecord adaptive_finetune(Student& student, const Guidance& guidance,
                            const data::DatasetSplit& full_split,
                            const data::DatasetSplit& target_split,
                            const distill::DistillationConfig& dconfig, const TrainConfig& tconfig);

// Candidate logits for every instance, in split order.
std::vector<std::vector<double>> predict_logits(Student& student, const data::DatasetSplit& split);
Metrics evaluate(Student& student, const data::DatasetSplit& split);

void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path);
// {"accuracy", "per_category", "seed", "config_hash"}
std::string summary_json(const RunRecord& record);

}  // namespace mad::train
