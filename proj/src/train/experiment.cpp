#include "mad/train/experiment.hpp"

#include "mad/error.hpp"

namespace mad::train {

data::DatasetSplit select_training(const RunConfig& config, const data::DatasetSplit& full) {
  const std::uint64_t seed = mix_seed(config.train.seed, "low-shot");
  std::size_t n = 0;
  switch (config.shots) {
    case ShotSetting::Zero: {
      data::DatasetSplit empty;
      empty.split = full.split;
      empty.task = full.task;
      return empty;
    }
    case ShotSetting::Full: return full;
    case ShotSetting::Hundred: n = 100; break;
    case ShotSetting::Thousand: n = 1000; break;
  }
  if (config.task.kind == data::TaskKind::Mcq) return data::sample_low_shot_per_category(full, n, seed);
  // Paired tasks count images per class; two pairs are kept per image.
  return data::sample_low_shot_per_image(full, n, 2, seed);
}

keywords::NGramStats pairing_stats(const data::DatasetSplit& split) {
  std::vector<data::TokenSequence> corpus;
  for (const auto& inst : split.instances)
    for (std::size_t c = 0; c < inst.candidates.size(); ++c) corpus.push_back(inst.pair_text(c));
  return keywords::fit_corpus(corpus);
}

RunData prepare_data(const RunConfig& config) {
  config.validate();
  RunData d;
  d.splits = data::generate_task(config.task, config.data_seed);
  d.train = select_training(config, d.splits.train);
  d.eval = d.splits.val;
  if (config.split == EvalSplit::ShortcutMitigated)
    d.eval = data::mitigate_shortcuts(d.splits.val, data::Vocabulary(config.task)).split;
  d.stats = pairing_stats(d.splits.train);
  d.hash = data::sha256_hex(data::content_hash(d.splits.train) + data::content_hash(d.train) +
                            data::content_hash(d.eval));
  return d;
}

TeacherPair TeacherSet::pick(TeacherChoice choice) const {
  switch (choice) {
    case TeacherChoice::Paired: return paired;
    case TeacherChoice::MixedText:
      if (!alt_text) throw Error(ErrorCode::SpecInvalid, "alternative text teacher not built");
      return {paired.vision, alt_text, paired.temperature};
    case TeacherChoice::MixedVision:
      if (!alt_vision) throw Error(ErrorCode::SpecInvalid, "alternative vision teacher not built");
      return {alt_vision, paired.text, paired.temperature};
  }
  return paired;
}

models::TeacherTrainConfig teacher_train_config(const RunConfig& config) {
  models::TeacherTrainConfig t;
  t.tower = config.tower;
  t.steps = config.teacher_steps;
  return t;
}

TeacherSet build_teachers(const RunConfig& config, bool with_alternatives) {
  const auto tc = teacher_train_config(config);
  TeacherSet set;
  set.paired = models::make_toy_teacher(config.task, config.teacher_seed, tc);
  if (with_alternatives) {
    set.alt_text = models::make_alt_text_teacher(config.task, config.teacher_seed, tc);
    set.alt_vision = models::make_alt_vision_teacher(config.task, config.teacher_seed, tc);
  }
  return set;
}

RunRecord run_experiment(const RunConfig& config, const RunData& data, const TeacherPair* teacher,
                         std::unique_ptr<Student>* trained) {
  config.validate();
  if (config.shots == ShotSetting::Zero)
    throw Error(ErrorCode::SpecInvalid, "zero-shot runs have no student to train");
  models::StudentConfig sc = config.student;
  sc.teacher_dim = config.tower.out_dim;
  auto student = std::make_unique<Student>(config.task, sc, mix_seed(config.train.seed, "student-init"));
  TeacherPair pair;
  if (teacher) pair = *teacher;
  Guidance g{teacher ? &pair : nullptr, &data.stats};
  RunRecord rec = adaptive_finetune(*student, g, data.splits.train, data.train, config.distill, config.train);
  const auto curve = rec.metrics.loss_curve;
  const double wall = rec.metrics.wall_seconds;
  rec.metrics = evaluate(*student, data.eval);
  rec.metrics.loss_curve = curve;
  rec.metrics.wall_seconds = wall;
  rec.metrics.seed = config.train.seed;
  rec.config_text = config.to_text();
  rec.config_hash = config.hash();
  rec.data_hash = data.hash;
  if (trained) *trained = std::move(student);
  return rec;
}

}  // namespace mad::train
