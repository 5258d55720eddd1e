#pragma once

#include <cstdint>
#include <filesystem>

#include "mad/data/task.hpp"

namespace mad::data {

enum class SamplerMode { PerCategory, PerImage };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::PerCategory;
  // Samples per category (per-category) or images per class (per-image).
  std::size_t n = 100;
  std::size_t max_pairs_per_image = 2;
  std::uint64_t seed = 0;
};

// Exactly n instances of every category present in the split, drawn without
// replacement. Output is ordered by instance id.
DatasetSplit sample_low_shot_per_category(const DatasetSplit& split, std::size_t n_per_category,
                                          std::uint64_t seed);

// For each class (the instance category) picks n distinct images holding at
// least one pair of that class, then keeps up to max_pairs pairs per image,
// preferring pairs of the selecting class. Images are never reused.
DatasetSplit sample_low_shot_per_image(const DatasetSplit& split, std::size_t n_images_per_class,
                                       std::size_t max_pairs, std::uint64_t seed);

DatasetSplit sample(const DatasetSplit& split, const SamplerConfig& config);

struct MitigationResult {
  DatasetSplit split;
  std::size_t without_cue = 0;  // instances passed through unchanged
};

// Inverts the question/answer marker cue: the gold candidate's marker stops
// matching the question while every distractor's marker starts matching it.
MitigationResult mitigate_shortcuts(const DatasetSplit& split, const Vocabulary& vocab);

// Picks the first candidate carrying the question's marker; falls back to
// candidate 0 when the question has none.
std::size_t cue_heuristic(const Instance& instance, const Vocabulary& vocab);

void write_jsonl(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit read_jsonl(const std::filesystem::path& path, SplitKind split = SplitKind::Train,
                        TaskKind task = TaskKind::Mcq);

std::string to_jsonl(const DatasetSplit& split);

}  // namespace mad::data
