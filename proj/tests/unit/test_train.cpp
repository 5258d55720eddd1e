#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "mad/numerics/grad_check.hpp"
#include "mad/train/adapters.hpp"
#include "mad/train/experiment.hpp"
#include "mad/train/grad_audit.hpp"
#include "test_util.hpp"

using namespace mad;
using namespace mad::train;
using test::code_of;

namespace {

data::TaskSpec small_world() {
  data::TaskSpec w;
  w.train_per_category = 12;
  w.val_per_category = 4;
  w.test_per_category = 2;
  return w;
}

models::StudentConfig small_student() {
  models::StudentConfig s;
  s.body = {8, 1, 2, 2};
  s.teacher_dim = 6;
  return s;
}

models::TeacherPair random_teacher(const data::TaskSpec& world) {
  models::TowerConfig t;
  t.body = {8, 1, 2, 2};
  t.out_dim = 6;
  models::TeacherPair p{std::make_shared<models::VisionTower>(world, t, models::TowerKind::Contrastive, 4),
                        std::make_shared<models::TextTower>(world, t, models::TowerKind::Contrastive, 5)};
  p.vision->params().set_frozen(true);
  p.text->params().set_frozen(true);
  return p;
}

TrainConfig quick_train(std::size_t epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.af_epochs = 1;
  t.batch = 8;
  t.seed = 3;
  return t;
}

distill::DistillationConfig no_distill() {
  distill::DistillationConfig c;
  c.enable_ts = c.enable_cw = c.enable_af = false;
  c.distill_vision = c.distill_text = false;
  return c;
}

std::vector<const data::Instance*> pointers(const data::DatasetSplit& s, std::size_t n) {
  std::vector<const data::Instance*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&s.instances[i]);
  return out;
}

}  // namespace

TEST_CASE("run config text round trips and rejects bad input") {
  RunConfig c;
  c.set("distill.w", "0.1");
  c.set("task.categories", "attribute, counting");
  c.set("teacher", "mixed-vision");
  c.set("seed", "17");
  const RunConfig back = parse_run_config(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.hash() == c.hash());
  CHECK(back.distill.w == 0.1);
  CHECK(back.train.seed == 17);
  CHECK(back.task.category_subset == std::vector<std::string>{"attribute", "counting"});
  CHECK(c.hash() != RunConfig{}.hash());
  CHECK(code_of([] { parse_run_config("bogus=1"); }) == ErrorCode::ParseError);
  CHECK(code_of([] { parse_run_config("distill.w=abc"); }) == ErrorCode::ParseError);
  CHECK(code_of([] { parse_run_config("distill.ts=maybe"); }) == ErrorCode::ParseError);
  try {
    parse_key_values("a=1\n# note\nnot a pair\n");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  TrainConfig t;
  t.lr = 0.0;
  CHECK(code_of([&] { t.validate(); }) == ErrorCode::SpecInvalid);
}

TEST_CASE("metrics from logits") {
  const auto splits = data::generate_task(small_world(), 1);
  const auto& val = splits.val;
  std::vector<std::vector<double>> oracle, anti;
  for (const auto& inst : val.instances) {
    std::vector<double> good(inst.candidates.size(), 0.0), bad(inst.candidates.size(), 1.0);
    good[inst.gold] = 1.0;
    bad[inst.gold] = 0.0;
    oracle.push_back(good);
    anti.push_back(bad);
  }
  const Metrics m = metrics_from_logits(val, oracle);
  CHECK(m.accuracy == 1.0);
  for (const auto& [cat, acc] : m.per_category) CHECK(acc == 1.0);
  CHECK(m.per_category.size() == 7);
  CHECK(metrics_from_logits(val, anti).accuracy == 0.0);

  data::TaskSpec big;
  big.train_per_category = 1;
  big.val_per_category = 143;
  big.test_per_category = 1;
  const auto many = data::generate_task(big, 2).val;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> noise;
  for (const auto& inst : many.instances) {
    std::vector<double> v(inst.candidates.size());
    for (double& x : v) x = u(rng);
    noise.push_back(v);
  }
  // Binomial 99.9% interval around chance for ~1000 four-way instances.
  const double acc = metrics_from_logits(many, noise).accuracy;
  const double half = 3.29 * std::sqrt(0.25 * 0.75 / static_cast<double>(many.size()));
  CHECK(many.size() >= 1000);
  CHECK(std::abs(acc - 0.25) < half);
}

TEST_CASE("adaptation losses") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 2);
  models::Student student(world, small_student(), 1);
  Rng rng(4);
  Tape tape;
  auto one = pointers(splits.train, 1);
  CHECK(code_of([&] { l_adapt_losses(tape, student, one, rng); }) == ErrorCode::BatchTooSmall);
  auto four = pointers(splits.train, 4);
  const auto none = l_adapt_losses(tape, student, four, rng, 0.0);
  CHECK(none.mlm.value().item() == 0.0);
  CHECK(none.itm.value().item() > 0.0);
  const auto some = l_adapt_losses(tape, student, four, rng, 0.5);
  CHECK(some.mlm.value().item() > 0.0);

  auto graph = [&](Tape& t) {
    Rng fixed(11);
    const auto l = l_adapt_losses(t, student, four, fixed, 0.3);
    return add(l.mlm, l.itm);
  };
  GradCheckOptions opts;
  opts.max_coords_per_param = 4;
  CHECK(finite_difference_check(graph, student.params().pointers(), opts) < 1e-4);
}

TEST_CASE("training is deterministic and w=0 recovers the baseline bitwise") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 3);
  auto teacher = random_teacher(world);
  const auto stats = pairing_stats(splits.train);
  Guidance with{&teacher, &stats}, without{nullptr, nullptr};

  models::Student a(world, small_student(), 7), b(world, small_student(), 7);
  const auto ra = train::train(a, without, splits.train, no_distill(), quick_train());
  const auto rb = train::train(b, without, splits.train, no_distill(), quick_train());
  CHECK(a.params().same_values(b.params()));
  CHECK(ra.metrics.loss_curve == rb.metrics.loss_curve);

  distill::DistillationConfig mad;
  mad.enable_af = false;
  mad.w = 0.0;
  models::Student c(world, small_student(), 7);
  const auto rc = train::train(c, with, splits.train, mad, quick_train());
  CHECK(c.params().same_values(a.params()));
  CHECK(rc.metrics.loss_curve == ra.metrics.loss_curve);
  REQUIRE(rc.log.size() == ra.log.size());
  for (std::size_t i = 0; i < rc.log.size(); ++i) CHECK(rc.log[i].loss.L_final == ra.log[i].loss.L_final);

  mad.w = 0.05;
  models::Student d(world, small_student(), 7);
  train::train(d, with, splits.train, mad, quick_train());
  CHECK_FALSE(d.params().same_values(a.params()));
}

TEST_CASE("one epoch lowers the training loss") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 4);
  models::Student s(world, small_student(), 2);
  auto split_loss = [&] {
    double total = 0.0;
    const auto logits = predict_logits(s, splits.train);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const auto p = eval::softmax(logits[i]);
      total -= std::log(p[splits.train.instances[i].gold]);
    }
    return total / static_cast<double>(logits.size());
  };
  const double before = split_loss();
  train::train(s, {}, splits.train, no_distill(), quick_train(1));
  CHECK(split_loss() < before);
}

TEST_CASE("divergence is reported with the step") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 5);
  models::Student s(world, small_student(), 2);
  TrainConfig t = quick_train(3);
  t.optimizer = OptimizerKind::Sgd;
  t.lr = 1e300;
  try {
    train::train(s, {}, splits.train, no_distill(), t);
    FAIL("expected Diverged");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Diverged);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("adaptive finetuning stages") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 6);
  auto teacher = random_teacher(world);
  const auto stats = pairing_stats(splits.train);
  Guidance g{&teacher, &stats};
  const auto low = data::sample_low_shot_per_category(splits.train, 4, 1);
  const auto vision_before = teacher.vision->params().all().front().value;

  distill::DistillationConfig off;
  off.enable_af = false;
  models::Student a(world, small_student(), 9), b(world, small_student(), 9);
  const auto ra = adaptive_finetune(a, g, splits.train, low, off, quick_train());
  const auto rb = train::train(b, g, low, off, quick_train());
  CHECK(a.params().same_values(b.params()));
  CHECK(ra.metrics.loss_curve == rb.metrics.loss_curve);
  CHECK(ra.stages.size() == 1);

  distill::DistillationConfig on;
  models::Student c(world, small_student(), 9);
  const auto rc = adaptive_finetune(c, g, splits.train, low, on, quick_train());
  REQUIRE(rc.stages.size() == 2);
  CHECK(rc.stages[0].name == "adapt");
  CHECK(rc.stages[1].name == "task");
  CHECK(rc.stages[1].first_step == rc.stages[0].steps);
  CHECK(rc.log.size() == rc.stages[0].steps + rc.stages[1].steps);
  // Adaptation steps cover the full split, not the low-shot subset.
  CHECK(rc.stages[0].steps == (splits.train.size() + 7) / 8);
  CHECK(teacher.vision->params().all().front().value == vision_before);
  for (const auto& p : teacher.text->params().all())
    for (double g2 : p.grad.data()) CHECK(g2 == 0.0);
}

TEST_CASE("metrics CSV and summary JSON") {
  RunRecord r;
  r.metrics.accuracy = 0.5;
  r.metrics.per_category = {{"b", 0.25}, {"a", 1.0}};
  r.metrics.seed = 4;
  r.config_hash = "abc";
  r.log.push_back({0, {1.0, 0.5, 0.25, 0.0, 0.05, 1.0375}});
  const auto path = std::filesystem::temp_directory_path() / "mad_test_metrics.csv";
  write_metrics_csv(r, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,L_t,L_d_v,L_d_t,L_dt_prime,w_r,L_final");
  CHECK(row.rfind("0,1,0.5,0.25,0,", 0) == 0);
  std::filesystem::remove(path);
  const auto j = nlohmann::json::parse(summary_json(r));
  CHECK(j["accuracy"] == 0.5);
  CHECK(j["per_category"]["a"] == 1.0);
  CHECK(j["seed"] == 4);
  CHECK(j["config_hash"] == "abc");
  CHECK(summary_json(r) == summary_json(r));
}

TEST_CASE("adapter heads train while teachers stay fixed") {
  const auto world = small_world();
  const auto splits = data::generate_task(world, 7);
  auto teacher = random_teacher(world);
  const auto out = models::teacher_encode(teacher, splits.train.instances.front());
  for (auto head : {AdapterHead::Linear1, AdapterHead::Linear3, AdapterHead::Transformer1}) {
    Adapter adapter(head, 6, 1);
    Tape tape;
    Var loss = cross_entropy(adapter.logits(tape, out), splits.train.instances.front().gold);
    tape.backward(loss);
    double g = 0.0;
    for (const auto& p : adapter.params().all())
      for (double x : p.grad.data()) g += std::abs(x);
    CHECK(g > 0.0);
    for (const auto& p : teacher.vision->params().all())
      for (double x : p.grad.data()) CHECK(x == 0.0);
  }
  const auto before = teacher.text->params().all().front().value;
  const auto m1 = adapter_baseline(teacher, splits.train, splits.val, AdapterHead::Transformer1, quick_train());
  const auto m2 = adapter_baseline(teacher, splits.train, splits.val, AdapterHead::Transformer1, quick_train());
  CHECK(m1.accuracy == m2.accuracy);
  CHECK(m1.predictions == m2.predictions);
  CHECK(m1.loss_curve == m2.loss_curve);
  CHECK(teacher.text->params().all().front().value == before);
}

TEST_CASE("gradient audit covers every loss term") {
  const auto audit = train::gradient_audit(6, 1);
  REQUIRE(audit.terms.size() == 6);
  CHECK(audit.instances == 6);
  for (const auto& t : audit.terms) {
    INFO(t.term);
    CHECK(t.max_error < 1e-4);
  }
  CHECK(audit.passed());
}
