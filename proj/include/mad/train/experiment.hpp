#pragma once

#include <memory>

#include "mad/data/sampling.hpp"
#include "mad/train/trainer.hpp"

namespace mad::train {

// Data view of one run: the generated splits, the training subset selected by
// the shot setting, and the evaluation split (shortcut-mitigated on request).
struct RunData {
  data::DatasetSplits splits;
  data::DatasetSplit train;
  data::DatasetSplit eval;
  keywords::NGramStats stats;
  std::string hash;
};

RunData prepare_data(const RunConfig& config);
data::DatasetSplit select_training(const RunConfig& config, const data::DatasetSplit& full);

// Keyword statistics over every pairing text of a split (labels unused).
keywords::NGramStats pairing_stats(const data::DatasetSplit& split);

// Teachers are a function of (task, tower, teacher_seed) alone, so one set
// serves every student seed.
struct TeacherSet {
  TeacherPair paired;
  std::shared_ptr<models::TextTower> alt_text;
  std::shared_ptr<models::VisionTower> alt_vision;

  TeacherPair pick(TeacherChoice choice) const;
};

models::TeacherTrainConfig teacher_train_config(const RunConfig& config);
TeacherSet build_teachers(const RunConfig& config, bool with_alternatives);

// Trains a fresh student under the configured objective and evaluates it.
RunRecord run_experiment(const RunConfig& config, const RunData& data, const TeacherPair* teacher,
                         std::unique_ptr<Student>* trained = nullptr);

}  // namespace mad::train
