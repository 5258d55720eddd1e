#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mad/rng.hpp"

namespace mad::data {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

enum class TaskKind { Mcq, Entailment, OpenAnswer };
enum class SplitKind { Train, Val, Test };

std::string to_string(TaskKind kind);
std::string to_string(SplitKind kind);

struct Cell {
  std::uint32_t obj = 0;
  std::uint32_t attr = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// Symbolic toy image: a size x size grid of (object, attribute) cells in
// row-major order.
struct ImageGrid {
  std::size_t size = 0;
  std::vector<Cell> cells;

  const Cell& at(std::size_t r, std::size_t c) const { return cells[r * size + c]; }
  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;
};

// Stable identity of an image: a hash of its cell contents.
std::uint64_t image_key(const ImageGrid& image);

// Generator configuration. Category templates are fixed per task kind; the
// remaining knobs size the world and the splits.
struct TaskSpec {
  TaskKind kind = TaskKind::Mcq;
  std::size_t grid = 3;
  std::size_t objects = 12;
  std::size_t attributes = 6;
  std::size_t markers = 4;
  // Fraction of instances whose question shares a marker with the gold answer.
  double cue_rate = 0.95;
  std::size_t train_per_category = 300;
  std::size_t val_per_category = 100;
  std::size_t test_per_category = 100;
  // Entailment / open-answer tasks pair several texts with one image.
  std::size_t pairs_per_image = 5;
  // Restricts MCQ generation to these category names (empty = all seven).
  std::vector<std::string> category_subset;
};

void validate(const TaskSpec& spec);

// Token layout shared by every encoder: specials, template words, then the
// object/attribute/position/number/marker/label blocks.
class Vocabulary {
 public:
  explicit Vocabulary(const TaskSpec& spec);

  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kEos = 2;

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(TokenId id) const;
  TokenId word(const std::string& w) const;

  TokenId object(std::size_t i) const { return object_base_ + static_cast<TokenId>(i); }
  TokenId attribute(std::size_t i) const { return attribute_base_ + static_cast<TokenId>(i); }
  TokenId position(std::size_t i) const { return position_base_ + static_cast<TokenId>(i); }
  TokenId number(std::size_t i) const { return number_base_ + static_cast<TokenId>(i); }
  TokenId marker(std::size_t i) const { return marker_base_ + static_cast<TokenId>(i); }

  bool is_object(TokenId t) const { return in(t, object_base_, objects_); }
  bool is_attribute(TokenId t) const { return in(t, attribute_base_, attributes_); }
  bool is_position(TokenId t) const { return in(t, position_base_, positions_); }
  bool is_number(TokenId t) const { return in(t, number_base_, numbers_); }
  bool is_marker(TokenId t) const { return in(t, marker_base_, markers_); }

  std::size_t object_index(TokenId t) const { return t - object_base_; }
  std::size_t attribute_index(TokenId t) const { return t - attribute_base_; }
  std::size_t position_index(TokenId t) const { return t - position_base_; }
  std::size_t number_index(TokenId t) const { return t - number_base_; }
  std::size_t marker_index(TokenId t) const { return t - marker_base_; }
  std::size_t markers() const { return markers_; }

  // Global answer vocabulary of the open-answer task.
  const std::vector<TokenId>& answer_vocab() const { return answer_vocab_; }

 private:
  static bool in(TokenId t, TokenId base, std::size_t n) { return t >= base && t < base + n; }

  std::vector<std::string> names_;
  TokenId object_base_ = 0, attribute_base_ = 0, position_base_ = 0, number_base_ = 0,
          marker_base_ = 0;
  std::size_t objects_ = 0, attributes_ = 0, positions_ = 0, numbers_ = 0, markers_ = 0;
  std::vector<TokenId> answer_vocab_;
};

struct Instance {
  std::uint64_t id = 0;
  ImageGrid image;
  TokenSequence question;
  std::vector<TokenSequence> candidates;
  std::size_t gold = 0;
  std::string category;
  std::optional<TokenId> cue;

  // Text seen by the encoders for one candidate pairing.
  TokenSequence pair_text(std::size_t candidate) const;
  friend bool operator==(const Instance&, const Instance&) = default;
};

struct DatasetSplit {
  std::vector<Instance> instances;
  SplitKind split = SplitKind::Train;
  TaskKind task = TaskKind::Mcq;

  std::size_t size() const noexcept { return instances.size(); }
  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

struct DatasetSplits {
  TaskSpec spec;
  DatasetSplit train, val, test;
};

// Category names for a task kind, in canonical order.
std::vector<std::string> categories(TaskKind kind);
std::vector<std::string> active_categories(const TaskSpec& spec);

// Generative caption of an image: (object, attribute, position) per cell.
TokenSequence describe(const ImageGrid& image, const Vocabulary& vocab);

// One draw from the generative image distribution: independent uniform cells.
ImageGrid random_image(const TaskSpec& spec, Rng& rng);

DatasetSplits generate_task(const TaskSpec& spec, std::uint64_t seed);

// Answers a question from the generative description alone, returning the
// index of the matching candidate (or nullopt when none matches).
std::optional<std::size_t> description_oracle(const TokenSequence& description,
                                              const Instance& instance, const Vocabulary& vocab,
                                              std::size_t grid);

// Content hash (hex SHA-256 of the JSONL serialisation).
std::string content_hash(const DatasetSplit& split);
std::string sha256_hex(std::string_view text);

}  // namespace mad::data
