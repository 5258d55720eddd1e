#include <algorithm>
#include <random>

#include "doctest.h"
#include "mad/train/zero_shot.hpp"
#include "test_util.hpp"

using namespace mad;
using namespace mad::train;
using test::code_of;

namespace {

models::TeacherPair random_teacher(const data::TaskSpec& world) {
  models::TowerConfig t;
  t.body = {8, 1, 2, 2};
  t.out_dim = 6;
  return {std::make_shared<models::VisionTower>(world, t, models::TowerKind::Contrastive, 1),
          std::make_shared<models::TextTower>(world, t, models::TowerKind::Contrastive, 2)};
}

}  // namespace

TEST_CASE("zero-shot matching follows candidate permutations") {
  data::TaskSpec world;
  world.train_per_category = 1;
  world.val_per_category = 10;
  world.test_per_category = 1;
  auto teacher = random_teacher(world);
  const auto val = data::generate_task(world, 1).val;
  data::DatasetSplit rotated = val;
  for (auto& inst : rotated.instances) {
    std::rotate(inst.candidates.begin(), inst.candidates.begin() + 1, inst.candidates.end());
    inst.gold = (inst.gold + inst.candidates.size() - 1) % inst.candidates.size();
  }
  for (auto mode : {MatchMode::IA, MatchMode::IQA}) {
    const auto a = zero_shot_match(teacher, val, mode);
    const auto b = zero_shot_match(teacher, rotated, mode);
    for (std::size_t i = 0; i < val.size(); ++i) {
      const std::size_t c = val.instances[i].candidates.size();
      CHECK(b.predictions[i] == (a.predictions[i] + c - 1) % c);
    }
    CHECK(a.accuracy == b.accuracy);
  }
}

TEST_CASE("an untrained teacher matches at chance") {
  data::TaskSpec world;
  world.train_per_category = 1;
  world.val_per_category = 143;
  world.test_per_category = 1;
  auto teacher = random_teacher(world);
  const auto val = data::generate_task(world, 2).val;
  REQUIRE(val.size() >= 1000);
  const auto m = zero_shot_match(teacher, val, MatchMode::IQA);
  CHECK(std::abs(m.accuracy - 0.25) <= 0.05);
}

TEST_CASE("k-means on three separated bands") {
  std::mt19937_64 rng(3);
  const double sigma = 0.02;
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> sims;
  std::vector<std::size_t> truth;
  const double centres[3] = {0.6, 0.3, 0.0};  // entailment, neutral, contradiction
  for (int i = 0; i < 900; ++i) {
    const std::size_t label = static_cast<std::size_t>(i % 3);
    sims.push_back(centres[label] + noise(rng));
    truth.push_back(label);
  }
  const auto labels = zero_shot_entailment_kmeans(sims);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == truth[i];
  CHECK(static_cast<double>(hits) / static_cast<double>(labels.size()) >= 0.95);

  // Order invariance: shuffled input gives the same label per value.
  std::vector<std::size_t> perm(sims.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> shuffled;
  for (std::size_t p : perm) shuffled.push_back(sims[p]);
  const auto again = zero_shot_entailment_kmeans(shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) CHECK(again[i] == labels[perm[i]]);

  const auto km = kmeans3(sims);
  CHECK(km.centroids[0] < km.centroids[1]);
  CHECK(km.centroids[1] < km.centroids[2]);

  const std::vector<double> flat(10, 0.4), two = {0.1, 0.1, 0.9};
  CHECK(code_of([&] { kmeans3(flat); }) == ErrorCode::DegenerateInput);
  CHECK(code_of([&] { kmeans3(two); }) == ErrorCode::DegenerateInput);
}

TEST_CASE("k-means seeds at min, median and max") {
  const std::vector<double> v = {5.0, 1.0, 3.0};
  const auto km = kmeans3(v);
  CHECK(km.centroids == std::array<double, 3>{1.0, 3.0, 5.0});
  CHECK(km.assignment == std::vector<std::size_t>{2, 0, 1});
  CHECK(zero_shot_entailment_kmeans(v) == std::vector<std::size_t>{0, 2, 1});
}

TEST_CASE("answer filter ranks by cosine with prefix structure") {
  data::TaskSpec world;
  world.kind = data::TaskKind::OpenAnswer;
  world.train_per_category = 1;
  world.val_per_category = 6;
  world.test_per_category = 1;
  auto teacher = random_teacher(world);
  const data::Vocabulary vocab(world);
  const auto& answers = vocab.answer_vocab();
  AnswerFilter filter(*teacher.text, answers);
  const auto val = data::generate_task(world, 4).val;
  const auto& q = val.instances.front().question;

  const auto all = filter.top_k(q, answers.size());
  CHECK(all.size() == answers.size());
  Tape tape;
  const data::TokenSequence* qp[] = {&q};
  const Tensor qf = teacher.text->encode(tape, qp).eos.value();
  std::vector<double> sims;
  for (std::size_t i : all) {
    const data::TokenSequence a = {answers[i]};
    const data::TokenSequence* ap[] = {&a};
    const Tensor af = teacher.text->encode(tape, ap).eos.value();
    sims.push_back(eval::cosine_similarity(qf.row(0), af.row(0)));
  }
  for (std::size_t i = 1; i < sims.size(); ++i) CHECK(sims[i - 1] >= sims[i]);

  const auto three = filter.top_k(q, 3), one = filter.top_k(q, 1);
  CHECK(one.size() == 1);
  CHECK(one.front() == three.front());
  CHECK(std::equal(three.begin(), three.end(), all.begin()));
  CHECK(zero_shot_answer_filter(*teacher.text, q, answers, 3) == three);
  CHECK(code_of([&] { filter.top_k(q, answers.size() + 1); }) == ErrorCode::KTooLarge);

  const double r1 = recall_at_k(filter, val, 1), r3 = recall_at_k(filter, val, 3),
               r10 = recall_at_k(filter, val, 10);
  CHECK(r1 <= r3);
  CHECK(r3 <= r10);
}
