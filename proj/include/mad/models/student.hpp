#pragma once

#include <memory>
#include <span>
#include <vector>

#include "mad/data/task.hpp"
#include "mad/models/transformer.hpp"
#include "mad/numerics/params.hpp"

namespace mad::models {

struct StudentConfig {
  TransformerConfig body{48, 4, 4, 4};
  std::size_t teacher_dim = 32;
  std::size_t max_text = 24;
  // Start the student->teacher projection at the identity (needs equal dims).
  bool identity_projection = false;
};

struct StudentInput {
  const data::ImageGrid* image = nullptr;
  const data::TokenSequence* text = nullptr;
};

// Row layout of one joint sequence: [IMG, regions..., CLS, text...].
struct SequenceLayout {
  std::size_t begin = 0;
  std::size_t regions = 0;
  std::size_t text = 0;

  std::size_t length() const noexcept { return 2 + regions + text; }
  std::size_t img_row() const noexcept { return begin; }
  std::size_t cls_row() const noexcept { return begin + 1 + regions; }
  std::size_t first_text_row() const noexcept { return begin + 2 + regions; }
};

// Student features for a batch of joint sequences, all on one tape.
struct StudentBatch {
  Var img;     // V_s per sequence [S, D_s]
  Var cls;     // T_s per sequence [S, D_s]
  Var tokens;  // per text token [sum of text lengths, D_s]
  std::vector<std::size_t> token_offsets;  // S + 1
  std::vector<SequenceLayout> layout;
  std::vector<std::shared_ptr<const AttentionMaps>> attention;  // per layer
};

// One instance: every (question, candidate) pairing plus candidate logits.
struct StudentOutputs {
  StudentBatch batch;
  Var logits;  // [C]
};

class Student {
 public:
  Student(const data::TaskSpec& world, const StudentConfig& config, std::uint64_t seed);
  Student(const Student&) = delete;
  Student& operator=(const Student&) = delete;

  StudentBatch forward(Tape& tape, std::span<const StudentInput> inputs);
  StudentOutputs encode(Tape& tape, const data::Instance& instance);
  // Several instances in one forward pass; each output views its own rows.
  std::vector<StudentOutputs> encode_many(Tape& tape,
                                          std::span<const data::Instance* const> instances);

  // Linear head on T_s, one logit per sequence [S].
  Var candidate_logits(Tape& tape, Var cls);
  // Student -> teacher feature map, rank-1 or row-wise.
  Var project_to_teacher(Tape& tape, Var features);
  // Vocabulary logits for masked-token reconstruction [n, V].
  Var masked_token_logits(Tape& tape, Var token_features);
  // Image-text match logit per sequence [S].
  Var match_logits(Tape& tape, Var cls);

  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  const StudentConfig& config() const noexcept { return config_; }
  const data::TaskSpec& world() const noexcept { return world_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

  // Fresh student with identical architecture and copied weights.
  std::unique_ptr<Student> clone() const;

 private:
  data::TaskSpec world_;
  StudentConfig config_;
  std::size_t vocab_size_;
  ParameterStore params_;
  std::unique_ptr<TransformerStack> body_;
};

void save_student(const Student& student, const std::filesystem::path& path);
// Architecture comes from `config`; throws ArchMismatch when the file differs.
std::unique_ptr<Student> load_student(const data::TaskSpec& world, const StudentConfig& config,
                                      const std::filesystem::path& path);

}  // namespace mad::models
