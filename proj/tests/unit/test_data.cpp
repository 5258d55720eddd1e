#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "mad/data/sampling.hpp"
#include "mad/data/task.hpp"
#include "test_util.hpp"

using namespace mad;
using namespace mad::data;
using test::code_of;

namespace {

TaskSpec small_mcq() {
  TaskSpec spec;
  spec.train_per_category = 120;
  spec.val_per_category = 40;
  spec.test_per_category = 40;
  return spec;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mad_test_" + name);
}

std::map<std::string, std::size_t> category_counts(const DatasetSplit& split) {
  std::map<std::string, std::size_t> out;
  for (const auto& inst : split.instances) ++out[inst.category];
  return out;
}

}  // namespace

TEST_CASE("generation is a pure function of spec and seed") {
  const auto a = generate_task(small_mcq(), 7);
  const auto b = generate_task(small_mcq(), 7);
  const auto c = generate_task(small_mcq(), 8);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(to_jsonl(a.test) == to_jsonl(b.test));
  CHECK(content_hash(a.train) == content_hash(b.train));
  CHECK(content_hash(a.train) != content_hash(c.train));
  CHECK(content_hash(a.train).size() == 64);
}

TEST_CASE("mcq splits have the configured category structure") {
  const TaskSpec spec = small_mcq();
  const auto splits = generate_task(spec, 1);
  const Vocabulary vocab(spec);
  const auto cats = categories(TaskKind::Mcq);
  CHECK(cats.size() == 7);
  for (const auto& [cat, n] : category_counts(splits.train)) {
    CHECK(std::find(cats.begin(), cats.end(), cat) != cats.end());
    CHECK(n == spec.train_per_category);
  }
  CHECK(category_counts(splits.train).size() == 7);
  std::size_t cued = 0;
  for (const auto& inst : splits.train.instances) {
    REQUIRE(inst.candidates.size() == 4);
    CHECK(inst.gold < 4);
    std::set<TokenId> answers;
    for (const auto& c : inst.candidates) answers.insert(c.front());
    CHECK(answers.size() == 4);
    if (inst.cue) {
      ++cued;
      CHECK(inst.question.front() == *inst.cue);
      CHECK(inst.candidates[inst.gold].back() == *inst.cue);
    }
  }
  const double rate = static_cast<double>(cued) / splits.train.size();
  CHECK(rate == doctest::Approx(spec.cue_rate).epsilon(0.03));
}

TEST_CASE("category subsets restrict mcq generation") {
  TaskSpec spec = small_mcq();
  spec.category_subset = {"counting", "attribute"};
  const auto splits = generate_task(spec, 3);
  const auto counts = category_counts(splits.train);
  CHECK(counts.size() == 2);
  CHECK(counts.at("counting") == spec.train_per_category);
  spec.category_subset = {"colour"};
  CHECK(code_of([&] { generate_task(spec, 3); }) == ErrorCode::SpecInvalid);
}

TEST_CASE("invalid specs are rejected") {
  TaskSpec spec = small_mcq();
  spec.grid = 1;
  CHECK(code_of([&] { generate_task(spec, 0); }) == ErrorCode::SpecInvalid);
  spec = small_mcq();
  spec.cue_rate = 1.5;
  CHECK(code_of([&] { generate_task(spec, 0); }) == ErrorCode::SpecInvalid);
  spec = small_mcq();
  spec.attributes = 3;
  CHECK(code_of([&] { generate_task(spec, 0); }) == ErrorCode::SpecInvalid);
}

TEST_CASE("description oracle answers every held-out instance") {
  for (TaskKind kind : {TaskKind::Mcq, TaskKind::Entailment, TaskKind::OpenAnswer}) {
    TaskSpec spec = small_mcq();
    spec.kind = kind;
    const auto splits = generate_task(spec, 11);
    const Vocabulary vocab(spec);
    std::size_t correct = 0;
    for (const auto& inst : splits.val.instances) {
      const auto pred = description_oracle(describe(inst.image, vocab), inst, vocab, spec.grid);
      if (pred && *pred == inst.gold) ++correct;
    }
    CAPTURE(to_string(kind));
    CHECK(splits.val.size() > 0);
    CHECK(correct == splits.val.size());
  }
}

TEST_CASE("images never repeat across splits") {
  for (TaskKind kind : {TaskKind::Mcq, TaskKind::Entailment, TaskKind::OpenAnswer}) {
    TaskSpec spec = small_mcq();
    spec.kind = kind;
    const auto splits = generate_task(spec, 5);
    auto keys = [](const DatasetSplit& s) {
      std::set<std::uint64_t> out;
      for (const auto& inst : s.instances) out.insert(image_key(inst.image));
      return out;
    };
    const auto tr = keys(splits.train), va = keys(splits.val), te = keys(splits.test);
    for (auto k : va) CHECK(tr.count(k) == 0);
    for (auto k : te) CHECK(tr.count(k) == 0);
    for (auto k : te) CHECK(va.count(k) == 0);
  }
}

TEST_CASE("entailment and open-answer shapes") {
  TaskSpec spec = small_mcq();
  spec.kind = TaskKind::Entailment;
  const auto ve = generate_task(spec, 2);
  for (const auto& inst : ve.train.instances) {
    CHECK(inst.candidates.size() == 3);
    CHECK(inst.category == categories(TaskKind::Entailment)[inst.gold]);
    CHECK_FALSE(inst.cue.has_value());
  }
  CHECK(category_counts(ve.train).size() == 3);

  spec.kind = TaskKind::OpenAnswer;
  const Vocabulary vocab(spec);
  const auto oa = generate_task(spec, 2);
  for (const auto& inst : oa.train.instances) {
    CHECK(inst.candidates.size() == vocab.answer_vocab().size());
    CHECK(inst.candidates[inst.gold].front() == vocab.answer_vocab()[inst.gold]);
  }
  CHECK(category_counts(oa.train).size() == 8);
}

TEST_CASE("per-category sampler gives exact counts") {
  TaskSpec spec = small_mcq();
  spec.train_per_category = 1000;
  spec.val_per_category = 1;
  spec.test_per_category = 1;
  const auto splits = generate_task(spec, 4);
  const auto s100 = sample_low_shot_per_category(splits.train, 100, 0);
  const auto s1000 = sample_low_shot_per_category(splits.train, 1000, 0);
  CHECK(s100.size() == 700);
  CHECK(s1000.size() == 7000);
  for (const auto& [cat, n] : category_counts(s100)) CHECK(n == 100);

  std::set<std::uint64_t> ids;
  for (const auto& inst : s100.instances) ids.insert(inst.id);
  CHECK(ids.size() == s100.size());

  const auto again = sample_low_shot_per_category(splits.train, 100, 0);
  const auto other = sample_low_shot_per_category(splits.train, 100, 1);
  CHECK(again == s100);
  CHECK_FALSE(other == s100);
  CHECK(category_counts(other) == category_counts(s100));

  CHECK(code_of([&] { sample_low_shot_per_category(splits.train, 0, 0); }) ==
        ErrorCode::SpecInvalid);
  CHECK(code_of([&] { sample_low_shot_per_category(splits.train, 1001, 0); }) ==
        ErrorCode::CategoryTooSmall);
}

TEST_CASE("per-image sampler protocol sizes") {
  TaskSpec spec = small_mcq();
  spec.kind = TaskKind::Entailment;
  spec.train_per_category = 1000;
  spec.val_per_category = 1;
  spec.test_per_category = 1;
  const auto ve = generate_task(spec, 9);
  const auto premises = sample_low_shot_per_image(ve.train, 100, 5, 0);
  CHECK(premises.size() >= 1400);
  CHECK(premises.size() <= 1500);

  std::map<std::uint64_t, std::size_t> per_image;
  for (const auto& inst : premises.instances) ++per_image[image_key(inst.image)];
  CHECK(per_image.size() == 300);
  for (const auto& [k, n] : per_image) CHECK(n <= 5);

  spec.kind = TaskKind::OpenAnswer;
  const auto oa = generate_task(spec, 9);
  const auto questions = sample_low_shot_per_image(oa.train, 100, 2, 0);
  CHECK(questions.size() >= 1500);
  CHECK(questions.size() <= 1600);

  SamplerConfig cfg;
  cfg.mode = SamplerMode::PerImage;
  cfg.n = 100;
  cfg.max_pairs_per_image = 2;
  CHECK(sample(oa.train, cfg) == questions);

  CHECK(code_of([&] { sample_low_shot_per_image(oa.train, 0, 2, 0); }) == ErrorCode::SpecInvalid);
  CHECK(code_of([&] { sample_low_shot_per_image(oa.train, 5000, 2, 0); }) ==
        ErrorCode::ClassTooSmall);
}

TEST_CASE("shortcut mitigation inverts the cue and nothing else") {
  const TaskSpec spec = small_mcq();
  const Vocabulary vocab(spec);
  const auto splits = generate_task(spec, 21);
  const auto sm = mitigate_shortcuts(splits.val, vocab);
  REQUIRE(sm.split.size() == splits.val.size());

  std::size_t cue_free = 0, std_hits = 0, sm_hits = 0;
  for (std::size_t i = 0; i < splits.val.size(); ++i) {
    const Instance& before = splits.val.instances[i];
    const Instance& after = sm.split.instances[i];
    CHECK(after.gold == before.gold);
    CHECK(after.question == before.question);
    CHECK(after.image == before.image);
    for (std::size_t c = 0; c < before.candidates.size(); ++c)
      for (std::size_t k = 0; k < before.candidates[c].size(); ++k)
        if (!vocab.is_marker(before.candidates[c][k]))
          CHECK(after.candidates[c][k] == before.candidates[c][k]);
    if (!before.cue) {
      ++cue_free;
      CHECK(after == before);
    } else {
      CHECK(cue_heuristic(after, vocab) != after.gold);
      CHECK(after.candidates[after.gold].back() != *before.cue);
    }
    std_hits += cue_heuristic(before, vocab) == before.gold;
    sm_hits += cue_heuristic(after, vocab) == after.gold;
  }
  CHECK(sm.without_cue == cue_free);
  const double n = static_cast<double>(splits.val.size());
  CHECK(std_hits / n >= 0.90);
  CHECK(sm_hits / n <= 0.25 + 0.10);
}

TEST_CASE("jsonl round trip and error reporting") {
  const auto splits = generate_task(small_mcq(), 3);
  const auto path = temp_file("roundtrip.jsonl");
  write_jsonl(splits.val, path);
  const auto back = read_jsonl(path, SplitKind::Val, TaskKind::Mcq);
  CHECK(back == splits.val);

  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first.find("\"cue\"") != std::string::npos);
  CHECK(first.find("\"image\":[[{\"attr\"") != std::string::npos);

  const auto bad = temp_file("truncated.jsonl");
  {
    std::ofstream out(bad);
    out << first << "\n" << first.substr(0, first.size() / 2) << "\n";
  }
  try {
    read_jsonl(bad);
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  const auto empty = temp_file("empty.jsonl");
  { std::ofstream out(empty); }
  CHECK(code_of([&] { read_jsonl(empty); }) == ErrorCode::EmptyCorpus);
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
  std::filesystem::remove(empty);
}
