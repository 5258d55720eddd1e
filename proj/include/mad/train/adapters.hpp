#pragma once

#include <memory>

#include "mad/models/transformer.hpp"
#include "mad/train/trainer.hpp"

namespace mad::train {

enum class AdapterHead { Linear1, Linear3, Transformer1 };

std::string to_string(AdapterHead head);

// Trainable head over frozen teacher features of each candidate pairing.
class Adapter {
 public:
  Adapter(AdapterHead head, std::size_t teacher_dim, std::uint64_t seed);

  // Candidate logits [C] from precomputed teacher outputs.
  Var logits(Tape& tape, const models::TeacherOutputs& teacher);

  ParameterStore& params() noexcept { return params_; }

 private:
  AdapterHead head_;
  std::size_t dim_;
  ParameterStore params_;
  std::unique_ptr<models::TransformerStack> body_;
};

// Trains only the head on (V_t, T_t) pairs of `train_split` and evaluates on
// `eval_split`. The teacher is read, never updated.
Metrics adapter_baseline(TeacherPair& teacher, const data::DatasetSplit& train_split,
                         const data::DatasetSplit& eval_split, AdapterHead head,
                         const TrainConfig& tconfig);

}  // namespace mad::train
