#include "mad/analysis/analysis.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mad/error.hpp"

namespace mad::analysis {

namespace {

double mean_over_heads(const std::vector<double>& v, std::size_t layer, std::size_t heads) {
  double s = 0.0;
  for (std::size_t h = 0; h < heads; ++h) s += v[layer * heads + h];
  return s / static_cast<double>(heads);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.exceptions(std::ios::badbit);
  return out;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Data lines of a CSV file after its header; '#' lines are metadata.
std::vector<std::vector<std::string>> csv_rows(const std::string& text, const std::string& header,
                                               std::vector<std::string>* meta = nullptr) {
  std::istringstream in(text);
  std::string line;
  bool seen_header = false;
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (meta) meta->push_back(line.substr(1));
      continue;
    }
    if (!seen_header) {
      if (line != header) throw Error(ErrorCode::ParseError, "line " + std::to_string(n) + ": bad header");
      seen_header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (!seen_header) throw Error(ErrorCode::ParseError, "missing CSV header");
  return rows;
}

double to_d(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ParseError, "bad number '" + s + "'");
  }
}

std::int64_t to_i(const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ParseError, "bad integer '" + s + "'");
  }
}

nlohmann::json parse_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
}

const std::string kMiHeader = "layer,head,modality,mass";
const std::string kGapHeader = "layer,gap_before,gap_after,delta";
const std::string kAttnHeader = "token_index,token_id,attention,s_j,selected";

}  // namespace

double MIReport::layer_vision(std::size_t layer) const { return mean_over_heads(vision, layer, heads); }
double MIReport::layer_text(std::size_t layer) const { return mean_over_heads(text, layer, heads); }
double MIReport::layer_gap(std::size_t layer) const {
  return std::abs(layer_text(layer) - layer_vision(layer));
}

ModalityMass row_mass(std::span<const double> row, const models::SequenceLayout& layout) {
  if (row.size() != layout.length())
    throw Error(ErrorCode::ShapeMismatch, "attention row does not match the sequence layout");
  ModalityMass m;
  for (std::size_t k = 1; k < 1 + layout.regions; ++k) m.vision += row[k];
  for (std::size_t k = 2 + layout.regions; k < layout.length(); ++k) m.text += row[k];
  return m;
}

MIReport modality_importance(std::span<const models::StudentBatch* const> batches,
                             const MIOptions& options) {
  MIReport r;
  std::size_t sequences = 0;
  for (const auto* b : batches) {
    if (b->attention.empty()) throw Error(ErrorCode::ShapeMismatch, "batch carries no attention maps");
    if (r.layers == 0) {
      r.layers = b->attention.size();
      r.heads = b->attention.front()->heads;
      r.vision.assign(r.layers * r.heads, 0.0);
      r.text.assign(r.layers * r.heads, 0.0);
    }
    if (b->attention.size() != r.layers || b->attention.front()->heads != r.heads)
      throw Error(ErrorCode::ArchMismatch, "batches come from different architectures");
    for (std::size_t l = 0; l < r.layers; ++l) {
      const auto& maps = *b->attention[l];
      if (maps.segments() != b->layout.size())
        throw Error(ErrorCode::ShapeMismatch, "attention segments do not match the layout");
      for (std::size_t s = 0; s < maps.segments(); ++s) {
        const auto& lay = b->layout[s];
        for (std::size_t h = 0; h < r.heads; ++h) {
          ModalityMass m;
          if (options.all_queries) {
            for (std::size_t q = 0; q < lay.length(); ++q) {
              const auto part = row_mass(maps.row(s, h, q), lay);
              m.vision += part.vision / static_cast<double>(lay.length());
              m.text += part.text / static_cast<double>(lay.length());
            }
          } else {
            m = row_mass(maps.row(s, h, lay.cls_row() - lay.begin), lay);
          }
          r.vision[l * r.heads + h] += m.vision;
          r.text[l * r.heads + h] += m.text;
        }
      }
    }
    sequences += b->layout.size();
  }
  for (auto& v : r.vision) v /= static_cast<double>(std::max<std::size_t>(1, sequences));
  for (auto& v : r.text) v /= static_cast<double>(std::max<std::size_t>(1, sequences));
  return r;
}

MIReport modality_importance(Student& student, const data::DatasetSplit& split, const MIOptions& options) {
  if (split.size() == 0) throw Error(ErrorCode::SpecInvalid, "modality importance needs instances");
  std::vector<models::StudentBatch> batches;
  constexpr std::size_t chunk = 32;
  for (std::size_t b = 0; b < split.size(); b += chunk) {
    std::vector<data::TokenSequence> texts;
    std::vector<const data::ImageGrid*> images;
    for (std::size_t i = b; i < std::min(split.size(), b + chunk); ++i) {
      const auto& inst = split.instances[i];
      for (std::size_t c = 0; c < inst.candidates.size(); ++c) {
        texts.push_back(inst.pair_text(c));
        images.push_back(&inst.image);
      }
    }
    std::vector<models::StudentInput> inputs;
    for (std::size_t k = 0; k < texts.size(); ++k) inputs.push_back({images[k], &texts[k]});
    Tape tape;
    batches.push_back(student.forward(tape, inputs));
  }
  std::vector<const models::StudentBatch*> ptrs;
  for (const auto& b : batches) ptrs.push_back(&b);
  return modality_importance(ptrs, options);
}

GapReport mi_gap_report(const MIReport& before, const MIReport& after) {
  if (before.layers != after.layers || before.heads != after.heads)
    throw Error(ErrorCode::ArchMismatch, "MI reports come from different architectures");
  GapReport out;
  for (std::size_t l = 0; l < before.layers; ++l) {
    GapRow row{l, before.layer_gap(l), after.layer_gap(l), 0.0};
    row.delta = row.gap_before - row.gap_after;
    out.push_back(row);
  }
  return out;
}

AttentionRecord attention_dump(Student& student, const data::Instance& instance, std::size_t candidate,
                               const std::string& tag, const std::optional<SelectionContext>& selection) {
  if (candidate >= instance.candidates.size())
    throw Error(ErrorCode::IndexOutOfRange, "candidate " + std::to_string(candidate));
  const data::TokenSequence text = instance.pair_text(candidate);
  Tape tape;
  const models::StudentInput in[] = {{&instance.image, &text}};
  const auto batch = student.forward(tape, in);
  const auto& maps = *batch.attention.back();
  const auto& lay = batch.layout.front();
  std::vector<double> attn(lay.length(), 0.0);
  for (std::size_t h = 0; h < maps.heads; ++h) {
    const auto row = maps.row(0, h, lay.cls_row() - lay.begin);
    for (std::size_t k = 0; k < row.size(); ++k) attn[k] += row[k] / static_cast<double>(maps.heads);
  }
  std::vector<double> s_j(text.size(), 0.0);
  std::vector<bool> picked(text.size(), false);
  if (selection && selection->teacher && selection->stats) {
    const Tensor feats = student.project_to_teacher(tape, batch.tokens).value();
    const auto scores = distill::token_scores(text, selection->teacher->image, feats, *selection->stats);
    s_j = scores.s_j;
    for (std::size_t i : distill::select_tokens(scores.s_j, selection->m)) picked[i] = true;
  }
  const data::TaskSpec& world = student.world();
  const data::Vocabulary vocab(world);
  AttentionRecord rec{instance.id, candidate, tag, {}};
  for (std::size_t k = 0; k < lay.length(); ++k) {
    AttentionRow r;
    r.token_index = k;
    r.attention = attn[k];
    if (k == 0) {
      r.token_id = -1;
    } else if (k < 1 + lay.regions) {
      r.token_id = vocab.object(instance.image.cells[k - 1].obj);
    } else if (k == 1 + lay.regions) {
      r.token_id = -2;
    } else {
      const std::size_t t = k - 2 - lay.regions;
      r.token_id = text[t];
      r.s_j = s_j[t];
      r.selected = picked[t];
    }
    rec.rows.push_back(r);
  }
  return rec;
}

ExportFormat parse_format(const std::string& name) {
  if (name == "csv") return ExportFormat::Csv;
  if (name == "json") return ExportFormat::Json;
  throw Error(ErrorCode::Usage, "unknown export format '" + name + "' (expected csv or json)");
}

void export_report(const MIReport& r, const std::filesystem::path& path, ExportFormat format) {
  auto out = open_out(path);
  if (format == ExportFormat::Csv) {
    out << kMiHeader << '\n';
    for (std::size_t l = 0; l < r.layers; ++l)
      for (std::size_t h = 0; h < r.heads; ++h) {
        out << l << ',' << h << ",vision," << num(r.vision_at(l, h)) << '\n';
        out << l << ',' << h << ",text," << num(r.text_at(l, h)) << '\n';
      }
  } else {
    nlohmann::ordered_json j;
    j["layers"] = r.layers;
    j["heads"] = r.heads;
    j["vision"] = r.vision;
    j["text"] = r.text;
    out << j.dump(2) << '\n';
  }
}

void export_report(const GapReport& r, const std::filesystem::path& path, ExportFormat format) {
  auto out = open_out(path);
  if (format == ExportFormat::Csv) {
    out << kGapHeader << '\n';
    for (const auto& g : r)
      out << g.layer << ',' << num(g.gap_before) << ',' << num(g.gap_after) << ',' << num(g.delta) << '\n';
  } else {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& g : r)
      j.push_back({{"layer", g.layer}, {"gap_before", g.gap_before}, {"gap_after", g.gap_after},
                   {"delta", g.delta}});
    out << j.dump(2) << '\n';
  }
}

void export_report(const AttentionRecord& r, const std::filesystem::path& path, ExportFormat format) {
  auto out = open_out(path);
  if (format == ExportFormat::Csv) {
    out << "#instance_id=" << r.instance_id << ",candidate=" << r.candidate << ",tag=" << r.tag << '\n';
    out << kAttnHeader << '\n';
    for (const auto& row : r.rows)
      out << row.token_index << ',' << row.token_id << ',' << num(row.attention) << ',' << num(row.s_j)
          << ',' << (row.selected ? 1 : 0) << '\n';
  } else {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["candidate"] = r.candidate;
    j["tag"] = r.tag;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : r.rows)
      j["rows"].push_back({{"token_index", row.token_index}, {"token_id", row.token_id},
                           {"attention", row.attention}, {"s_j", row.s_j}, {"selected", row.selected}});
    out << j.dump(2) << '\n';
  }
}

MIReport read_mi_report(const std::filesystem::path& path, ExportFormat format) {
  const std::string text = read_all(path);
  MIReport r;
  if (format == ExportFormat::Json) {
    const auto j = parse_json(text);
    try {
      r.layers = j.at("layers");
      r.heads = j.at("heads");
      r.vision = j.at("vision").get<std::vector<double>>();
      r.text = j.at("text").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, e.what());
    }
    return r;
  }
  const auto rows = csv_rows(text, kMiHeader);
  for (const auto& c : rows) {
    if (c.size() != 4) throw Error(ErrorCode::ParseError, "mi row needs 4 fields");
    r.layers = std::max<std::size_t>(r.layers, static_cast<std::size_t>(to_i(c[0])) + 1);
    r.heads = std::max<std::size_t>(r.heads, static_cast<std::size_t>(to_i(c[1])) + 1);
  }
  r.vision.assign(r.layers * r.heads, 0.0);
  r.text.assign(r.layers * r.heads, 0.0);
  for (const auto& c : rows) {
    const std::size_t at = static_cast<std::size_t>(to_i(c[0])) * r.heads + static_cast<std::size_t>(to_i(c[1]));
    if (c[2] == "vision") r.vision[at] = to_d(c[3]);
    else if (c[2] == "text") r.text[at] = to_d(c[3]);
    else throw Error(ErrorCode::ParseError, "unknown modality '" + c[2] + "'");
  }
  return r;
}

GapReport read_gap_report(const std::filesystem::path& path, ExportFormat format) {
  const std::string text = read_all(path);
  GapReport r;
  if (format == ExportFormat::Json) {
    try {
      for (const auto& g : parse_json(text))
        r.push_back({g.at("layer"), g.at("gap_before"), g.at("gap_after"), g.at("delta")});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, e.what());
    }
    return r;
  }
  for (const auto& c : csv_rows(text, kGapHeader)) {
    if (c.size() != 4) throw Error(ErrorCode::ParseError, "gap row needs 4 fields");
    r.push_back({static_cast<std::size_t>(to_i(c[0])), to_d(c[1]), to_d(c[2]), to_d(c[3])});
  }
  return r;
}

AttentionRecord read_attention_record(const std::filesystem::path& path, ExportFormat format) {
  const std::string text = read_all(path);
  AttentionRecord r;
  if (format == ExportFormat::Json) {
    try {
      const auto j = parse_json(text);
      r.instance_id = j.at("instance_id");
      r.candidate = j.at("candidate");
      r.tag = j.at("tag");
      for (const auto& row : j.at("rows"))
        r.rows.push_back({row.at("token_index"), row.at("token_id"), row.at("attention"), row.at("s_j"),
                          row.at("selected")});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, e.what());
    }
    return r;
  }
  std::vector<std::string> meta;
  const auto rows = csv_rows(text, kAttnHeader, &meta);
  for (const auto& m : meta) {
    std::stringstream ms(m);
    std::string field;
    while (std::getline(ms, field, ',')) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = field.substr(0, eq), v = field.substr(eq + 1);
      if (k == "instance_id") r.instance_id = static_cast<std::uint64_t>(to_i(v));
      else if (k == "candidate") r.candidate = static_cast<std::size_t>(to_i(v));
      else if (k == "tag") r.tag = v;
    }
  }
  for (const auto& c : rows) {
    if (c.size() != 5) throw Error(ErrorCode::ParseError, "attention row needs 5 fields");
    r.rows.push_back({static_cast<std::size_t>(to_i(c[0])), to_i(c[1]), to_d(c[2]), to_d(c[3]), to_i(c[4]) != 0});
  }
  return r;
}

}  // namespace mad::analysis
