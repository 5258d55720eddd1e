#pragma once

#include <memory>
#include <span>
#include <vector>

#include "mad/data/task.hpp"
#include "mad/models/transformer.hpp"
#include "mad/numerics/params.hpp"

namespace mad::models {

using data::ImageGrid;
using data::TokenSequence;

// How a tower was pretrained. Contrastive towers come in aligned pairs; the
// other two are unimodal stand-ins from "different frameworks".
enum class TowerKind { Contrastive, MaskedToken, PresenceClassifier };

std::string to_string(TowerKind kind);

struct TowerConfig {
  TransformerConfig body{32, 1, 2, 4};
  std::size_t out_dim = 32;
  std::size_t max_text = 48;
};

// Encodes images through an IMG token prepended to one token per grid cell.
class VisionTower {
 public:
  VisionTower(const data::TaskSpec& world, const TowerConfig& config, TowerKind kind,
              std::uint64_t seed);
  VisionTower(const VisionTower&) = delete;
  VisionTower& operator=(const VisionTower&) = delete;

  // [images, out_dim] IMG-token features.
  Var encode(Tape& tape, std::span<const ImageGrid* const> images);
  Tensor encode(const ImageGrid& image);

  // Object-presence then attribute-presence logits (presence classifier only).
  Var presence_logits(Tape& tape, Var features);

  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  TowerKind kind() const noexcept { return kind_; }
  const TowerConfig& config() const noexcept { return config_; }

 private:
  data::TaskSpec world_;
  TowerConfig config_;
  TowerKind kind_;
  ParameterStore params_;
  std::unique_ptr<TransformerStack> body_;
};

struct TextEncoding {
  Var eos;     // [sequences, out_dim]
  Var tokens;  // [sum of lengths, out_dim], one row per input token
  std::vector<std::size_t> offsets;  // sequences + 1 prefix sums into tokens
};

// Encodes token sequences with an appended EOS token.
class TextTower {
 public:
  TextTower(const data::TaskSpec& world, const TowerConfig& config, TowerKind kind,
            std::uint64_t seed);
  TextTower(const TextTower&) = delete;
  TextTower& operator=(const TextTower&) = delete;

  TextEncoding encode(Tape& tape, std::span<const TokenSequence* const> texts);

  // Vocabulary logits over token features (masked-token teacher only).
  Var token_logits(Tape& tape, Var token_features);

  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  TowerKind kind() const noexcept { return kind_; }
  const TowerConfig& config() const noexcept { return config_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

 private:
  TowerConfig config_;
  TowerKind kind_;
  std::size_t vocab_size_;
  ParameterStore params_;
  std::unique_ptr<TransformerStack> body_;
};

// A frozen vision/text pair. Towers from different pretraining schemes may be
// combined; logits are then a literal cosine between unaligned spaces.
struct TeacherPair {
  std::shared_ptr<VisionTower> vision;
  std::shared_ptr<TextTower> text;
  double temperature = 0.07;

  std::size_t dim() const { return vision->config().out_dim; }
};

// Teacher view of one instance, computed without gradient.
struct TeacherOutputs {
  Tensor image;                 // V_t [D_t]
  Tensor text;                  // T_t per candidate [C, D_t]
  std::vector<Tensor> tokens;   // per candidate [z_c, D_t], aligned with pair_text(c)
  Tensor logits;                // [C], cosine(V_t, T_t) / temperature
};

TeacherOutputs teacher_encode(TeacherPair& teacher, const data::Instance& instance);
std::vector<TeacherOutputs> teacher_encode_all(TeacherPair& teacher, const data::DatasetSplit& split);

// Random partial caption of an image: (object, attribute[, position]) per
// chosen cell in row-major order. Full descriptions are drawn a quarter of
// the time.
TokenSequence sample_caption(const ImageGrid& image, const data::Vocabulary& vocab, Rng& rng);

struct TeacherTrainConfig {
  TowerConfig tower;
  std::size_t steps = 600;
  std::size_t batch = 32;
  double lr = 3e-3;
  // Held-out images used for the quality check.
  std::size_t eval_images = 400;
};

struct TeacherReport {
  double heldout_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

// Contrastively trained, frozen vision/text pair; throws TeacherTooWeak when
// held-out description matching is below 0.90.
TeacherPair make_toy_teacher(const data::TaskSpec& world, std::uint64_t seed,
                             const TeacherTrainConfig& config = {},
                             TeacherReport* report = nullptr);

// Text-only tower trained with a masked-token objective on captions in which
// objects carry habitual attributes; the held-out answer-slot accuracy must
// reach 0.80.
std::shared_ptr<TextTower> make_alt_text_teacher(const data::TaskSpec& world, std::uint64_t seed,
                                                 const TeacherTrainConfig& config = {},
                                                 TeacherReport* report = nullptr);

// Vision-only tower trained to classify object and attribute presence; the
// held-out per-label accuracy must reach 0.80.
std::shared_ptr<VisionTower> make_alt_vision_teacher(const data::TaskSpec& world,
                                                     std::uint64_t seed,
                                                     const TeacherTrainConfig& config = {},
                                                     TeacherReport* report = nullptr);

// Four-way zero-shot matching of images against generative descriptions
// (own description plus three from other held-out images).
double description_matching_accuracy(TeacherPair& teacher, const data::TaskSpec& world,
                                     std::size_t images, std::uint64_t seed,
                                     std::vector<std::size_t>* predictions = nullptr);

void save_teacher(TeacherPair& teacher, const std::filesystem::path& dir);
TeacherPair load_teacher(const data::TaskSpec& world, const std::filesystem::path& dir);

}  // namespace mad::models
