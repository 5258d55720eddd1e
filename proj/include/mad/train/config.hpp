#pragma once

#include <map>
#include <string>

#include "mad/data/task.hpp"
#include "mad/distill/distillation.hpp"
#include "mad/models/student.hpp"
#include "mad/models/teacher.hpp"
#include "mad/numerics/optim.hpp"

namespace mad::train {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 3e-3;
  double weight_decay = 0.0;
  std::size_t epochs = 30;
  // Epochs of the adaptation stage that precedes task finetuning.
  std::size_t af_epochs = 2;
  std::size_t batch = 32;
  std::size_t grad_accum = 1;
  double warmup = 0.05;
  // Adaptation stage on the full training split (false: the target split).
  bool af_full_split = true;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ShotSetting { Zero, Hundred, Thousand, Full };
enum class EvalSplit { Standard, ShortcutMitigated };
enum class TeacherChoice { Paired, MixedText, MixedVision };

std::string to_string(ShotSetting s);
std::string to_string(EvalSplit s);
std::string to_string(TeacherChoice t);

// Everything needed to replay one experiment.
struct RunConfig {
  data::TaskSpec task;
  std::uint64_t data_seed = 0;
  std::uint64_t teacher_seed = 0;
  ShotSetting shots = ShotSetting::Hundred;
  EvalSplit split = EvalSplit::Standard;
  TeacherChoice teacher = TeacherChoice::Paired;
  models::StudentConfig student;
  models::TowerConfig tower;
  std::size_t teacher_steps = 600;
  distill::DistillationConfig distill;
  TrainConfig train;

  // Sets one key; throws ParseError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  // Canonical text: every key, fixed order, shortest round-trip numbers.
  std::string to_text() const;
  std::string hash() const;
  void validate() const;
};

// Flat key=value text; '#' starts a comment. Errors name the line.
std::map<std::string, std::string> parse_key_values(const std::string& text);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace mad::train
