#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mad/distill/distillation.hpp"

namespace mad::analysis {

using models::Student;

struct MIOptions {
  // Average over every query row instead of the CLS row alone.
  bool all_queries = false;
};

// Attention mass from the query row to region tokens (vision) and text tokens
// (text), per layer and head, averaged over every candidate pairing of every
// instance. IMG and CLS are special tokens and belong to neither modality.
struct MIReport {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> vision;  // [layer * heads + head]
  std::vector<double> text;

  double vision_at(std::size_t layer, std::size_t head) const { return vision[layer * heads + head]; }
  double text_at(std::size_t layer, std::size_t head) const { return text[layer * heads + head]; }
  // Head-averaged masses of one layer.
  double layer_vision(std::size_t layer) const;
  double layer_text(std::size_t layer) const;
  double layer_gap(std::size_t layer) const;
  friend bool operator==(const MIReport&, const MIReport&) = default;
};

// Mass of one attention row on the region and text tokens of its sequence.
struct ModalityMass {
  double vision = 0.0;
  double text = 0.0;
};
ModalityMass row_mass(std::span<const double> row, const models::SequenceLayout& layout);

// Accumulates MI from already-computed student outputs.
MIReport modality_importance(std::span<const models::StudentBatch* const> batches,
                             const MIOptions& options = {});
MIReport modality_importance(Student& student, const data::DatasetSplit& split,
                             const MIOptions& options = {});

struct GapRow {
  std::size_t layer = 0;
  double gap_before = 0.0;
  double gap_after = 0.0;
  double delta = 0.0;  // gap_before - gap_after
  friend bool operator==(const GapRow&, const GapRow&) = default;
};
using GapReport = std::vector<GapRow>;

// ArchMismatch when the reports differ in layers or heads.
GapReport mi_gap_report(const MIReport& before, const MIReport& after);

struct AttentionRow {
  std::size_t token_index = 0;
  // Text tokens carry their vocabulary id, regions their object token, IMG -1, CLS -2.
  std::int64_t token_id = 0;
  double attention = 0.0;
  double s_j = 0.0;
  bool selected = false;
  friend bool operator==(const AttentionRow&, const AttentionRow&) = default;
};

struct AttentionRecord {
  std::uint64_t instance_id = 0;
  std::size_t candidate = 0;
  std::string tag;  // e.g. "before" / "after"
  std::vector<AttentionRow> rows;
  friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

// Token-selection inputs; when present the text rows get S_j and flags.
struct SelectionContext {
  const models::TeacherOutputs* teacher = nullptr;
  const keywords::NGramStats* stats = nullptr;
  std::size_t m = 2;
};

// Final-layer CLS attention (head mean) over one pairing's joint sequence.
AttentionRecord attention_dump(Student& student, const data::Instance& instance,
                               std::size_t candidate, const std::string& tag,
                               const std::optional<SelectionContext>& selection = std::nullopt);

enum class ExportFormat { Csv, Json };
// Usage error for anything other than "csv" or "json".
ExportFormat parse_format(const std::string& name);

void export_report(const MIReport& report, const std::filesystem::path& path, ExportFormat format);
void export_report(const GapReport& report, const std::filesystem::path& path, ExportFormat format);
void export_report(const AttentionRecord& report, const std::filesystem::path& path,
                   ExportFormat format);

MIReport read_mi_report(const std::filesystem::path& path, ExportFormat format);
GapReport read_gap_report(const std::filesystem::path& path, ExportFormat format);
AttentionRecord read_attention_record(const std::filesystem::path& path, ExportFormat format);

}  // namespace mad::analysis
