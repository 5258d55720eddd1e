#include "mad/data/sampling.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad::data {

namespace {

void sort_by_id(std::vector<Instance>& v) {
  std::sort(v.begin(), v.end(), [](const Instance& a, const Instance& b) { return a.id < b.id; });
}

DatasetSplit empty_like(const DatasetSplit& split) {
  DatasetSplit out;
  out.split = split.split;
  out.task = split.task;
  return out;
}

// Sorted so the result does not depend on instance order.
std::vector<std::string> present_categories(const DatasetSplit& split) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& inst : split.instances)
    if (seen.insert(inst.category).second) out.push_back(inst.category);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetSplit sample_low_shot_per_category(const DatasetSplit& split, std::size_t n_per_category,
                                          std::uint64_t seed) {
  if (n_per_category == 0) throw Error(ErrorCode::SpecInvalid, "samples per category must be >= 1");
  DatasetSplit out = empty_like(split);
  for (const auto& cat : present_categories(split)) {
    std::vector<const Instance*> pool;
    for (const auto& inst : split.instances)
      if (inst.category == cat) pool.push_back(&inst);
    if (pool.size() < n_per_category)
      throw Error(ErrorCode::CategoryTooSmall, cat + " has " + std::to_string(pool.size()) +
                                                   " instances, need " +
                                                   std::to_string(n_per_category));
    Rng rng(mix_seed(seed, cat));
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < n_per_category; ++i) out.instances.push_back(*pool[i]);
  }
  sort_by_id(out.instances);
  return out;
}

DatasetSplit sample_low_shot_per_image(const DatasetSplit& split, std::size_t n_images_per_class,
                                       std::size_t max_pairs, std::uint64_t seed) {
  if (n_images_per_class == 0) throw Error(ErrorCode::SpecInvalid, "images per class must be >= 1");
  if (max_pairs == 0) throw Error(ErrorCode::SpecInvalid, "max pairs per image must be >= 1");

  // Group pairs by image, keeping first-appearance order of images.
  std::vector<std::uint64_t> image_order;
  std::unordered_map<std::uint64_t, std::vector<const Instance*>> by_image;
  for (const auto& inst : split.instances) {
    const auto key = image_key(inst.image);
    auto [it, fresh] = by_image.try_emplace(key);
    if (fresh) image_order.push_back(key);
    it->second.push_back(&inst);
  }

  DatasetSplit out = empty_like(split);
  std::unordered_set<std::uint64_t> used;
  for (const auto& cls : present_categories(split)) {
    std::vector<std::uint64_t> candidates;
    for (auto key : image_order) {
      if (used.count(key)) continue;
      const auto& pairs = by_image[key];
      if (std::any_of(pairs.begin(), pairs.end(),
                      [&](const Instance* p) { return p->category == cls; }))
        candidates.push_back(key);
    }
    if (candidates.size() < n_images_per_class)
      throw Error(ErrorCode::ClassTooSmall, cls + " has " + std::to_string(candidates.size()) +
                                                " unused images, need " +
                                                std::to_string(n_images_per_class));
    Rng rng(mix_seed(seed, cls));
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (std::size_t i = 0; i < n_images_per_class; ++i) {
      const auto key = candidates[i];
      used.insert(key);
      auto pairs = by_image[key];
      std::shuffle(pairs.begin(), pairs.end(), rng);
      std::stable_partition(pairs.begin(), pairs.end(),
                            [&](const Instance* p) { return p->category == cls; });
      for (std::size_t k = 0; k < std::min(max_pairs, pairs.size()); ++k)
        out.instances.push_back(*pairs[k]);
    }
  }
  sort_by_id(out.instances);
  return out;
}

DatasetSplit sample(const DatasetSplit& split, const SamplerConfig& config) {
  if (config.mode == SamplerMode::PerCategory)
    return sample_low_shot_per_category(split, config.n, config.seed);
  return sample_low_shot_per_image(split, config.n, config.max_pairs_per_image, config.seed);
}

MitigationResult mitigate_shortcuts(const DatasetSplit& split, const Vocabulary& vocab) {
  MitigationResult result{split, 0};
  for (auto& inst : result.split.instances) {
    if (inst.question.empty() || !vocab.is_marker(inst.question.front())) {
      ++result.without_cue;
      continue;
    }
    const TokenId q = inst.question.front();
    const TokenId other = vocab.marker((vocab.marker_index(q) + 1) % vocab.markers());
    for (std::size_t c = 0; c < inst.candidates.size(); ++c) {
      for (auto& tok : inst.candidates[c])
        if (vocab.is_marker(tok)) tok = c == inst.gold ? other : q;
    }
  }
  return result;
}

std::size_t cue_heuristic(const Instance& instance, const Vocabulary& vocab) {
  if (instance.question.empty() || !vocab.is_marker(instance.question.front())) return 0;
  const TokenId q = instance.question.front();
  for (std::size_t c = 0; c < instance.candidates.size(); ++c) {
    const auto& cand = instance.candidates[c];
    if (std::find(cand.begin(), cand.end(), q) != cand.end()) return c;
  }
  return 0;
}

namespace {

nlohmann::json to_json(const Instance& inst) {
  nlohmann::json image = nlohmann::json::array();
  for (std::size_t r = 0; r < inst.image.size; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < inst.image.size; ++c) {
      const Cell& cell = inst.image.at(r, c);
      row.push_back({{"obj", cell.obj}, {"attr", cell.attr}});
    }
    image.push_back(std::move(row));
  }
  nlohmann::json j;
  j["id"] = inst.id;
  j["image"] = std::move(image);
  j["question"] = inst.question;
  j["candidates"] = inst.candidates;
  j["gold"] = inst.gold;
  j["category"] = inst.category;
  j["cue"] = inst.cue ? nlohmann::json(*inst.cue) : nlohmann::json(nullptr);
  return j;
}

Instance from_json(const nlohmann::json& j) {
  Instance inst;
  inst.id = j.at("id").get<std::uint64_t>();
  const auto& rows = j.at("image");
  inst.image.size = rows.size();
  for (const auto& row : rows) {
    if (row.size() != inst.image.size) throw std::invalid_argument("image grid is not square");
    for (const auto& cell : row)
      inst.image.cells.push_back({cell.at("obj").get<std::uint32_t>(),
                                  cell.at("attr").get<std::uint32_t>()});
  }
  inst.question = j.at("question").get<TokenSequence>();
  inst.candidates = j.at("candidates").get<std::vector<TokenSequence>>();
  inst.gold = j.at("gold").get<std::size_t>();
  inst.category = j.at("category").get<std::string>();
  if (!j.at("cue").is_null()) inst.cue = j.at("cue").get<TokenId>();
  if (inst.gold >= inst.candidates.size()) throw std::invalid_argument("gold index out of range");
  return inst;
}

}  // namespace

std::string to_jsonl(const DatasetSplit& split) {
  std::string out;
  for (const auto& inst : split.instances) {
    out += to_json(inst).dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << to_jsonl(split);
  if (!f) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

DatasetSplit read_jsonl(const std::filesystem::path& path, SplitKind split, TaskKind task) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  DatasetSplit out;
  out.split = split;
  out.task = task;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.instances.push_back(from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::ParseError,
                  path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.instances.empty()) throw Error(ErrorCode::EmptyCorpus, path.string() + " has no instances");
  return out;
}

}  // namespace mad::data
