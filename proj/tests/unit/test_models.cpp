#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mad/data/task.hpp"
#include "mad/models/student.hpp"
#include "mad/models/teacher.hpp"
#include "mad/numerics/grad_check.hpp"
#include "test_util.hpp"

using namespace mad;
using namespace mad::models;
using test::code_of;

namespace {

data::TaskSpec tiny_world() {
  data::TaskSpec spec;
  spec.train_per_category = 6;
  spec.val_per_category = 2;
  spec.test_per_category = 2;
  return spec;
}

StudentConfig tiny_student() {
  StudentConfig c;
  c.body = {8, 2, 2, 2};
  c.teacher_dim = 6;
  return c;
}

TowerConfig tiny_tower() {
  TowerConfig c;
  c.body = {8, 1, 2, 2};
  c.out_dim = 6;
  return c;
}

data::Instance permuted(const data::Instance& inst, const std::vector<std::size_t>& perm) {
  data::Instance out = inst;
  for (std::size_t i = 0; i < perm.size(); ++i) out.candidates[i] = inst.candidates[perm[i]];
  out.gold = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), inst.gold) - perm.begin());
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mad_test_" + name);
}

}  // namespace

TEST_CASE("student exposes the joint-sequence handles") {
  const auto world = tiny_world();
  const auto splits = data::generate_task(world, 1);
  Student student(world, tiny_student(), 3);
  const auto& inst = splits.train.instances.front();
  Tape tape;
  const auto out = student.encode(tape, inst);
  const std::size_t c = inst.candidates.size();
  CHECK(out.logits.shape() == Shape{c});
  CHECK(out.batch.img.shape() == Shape{c, 8});
  CHECK(out.batch.cls.shape() == Shape{c, 8});
  CHECK(out.batch.layout.size() == c);
  for (std::size_t k = 0; k < c; ++k) {
    const auto& lay = out.batch.layout[k];
    CHECK(lay.regions == world.grid * world.grid);
    CHECK(lay.text == inst.pair_text(k).size());
    CHECK(out.batch.token_offsets[k + 1] - out.batch.token_offsets[k] == lay.text);
  }
  CHECK(out.batch.attention.size() == 2);
}

TEST_CASE("student attention rows are stochastic") {
  const auto world = tiny_world();
  const auto splits = data::generate_task(world, 2);
  Student student(world, tiny_student(), 4);
  for (const auto& inst : splits.val.instances) {
    Tape tape;
    const auto out = student.encode(tape, inst);
    for (const auto& maps : out.batch.attention)
      for (std::size_t s = 0; s < maps->segments(); ++s)
        for (std::size_t h = 0; h < maps->heads; ++h)
          for (std::size_t q = 0; q < maps->segment_length[s]; ++q) {
            const auto row = maps->row(s, h, q);
            double total = 0.0;
            for (double p : row) {
              CHECK(p >= 0.0);
              total += p;
            }
            CHECK(std::abs(total - 1.0) < 1e-9);
          }
  }
}

TEST_CASE("student rejects overlong and out-of-vocabulary text") {
  const auto world = tiny_world();
  Student student(world, tiny_student(), 1);
  Rng rng(1);
  const auto image = data::random_image(world, rng);
  const data::TokenSequence long_text(30, 5);
  const data::TokenSequence bad_text = {static_cast<data::TokenId>(student.vocab_size())};
  Tape tape;
  const StudentInput a[] = {{&image, &long_text}};
  const StudentInput b[] = {{&image, &bad_text}};
  CHECK(code_of([&] { student.forward(tape, a); }) == ErrorCode::SequenceTooLong);
  CHECK(code_of([&] { student.forward(tape, b); }) == ErrorCode::VocabOverflow);
}

TEST_CASE("student gradients match finite differences") {
  const auto world = tiny_world();
  const auto splits = data::generate_task(world, 5);
  Student student(world, tiny_student(), 6);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& inst = splits.train.instances[i * 7];
    auto graph = [&](Tape& tape) {
      const auto out = student.encode(tape, inst);
      Var proj = student.project_to_teacher(tape, out.batch.tokens);
      return add(cross_entropy(out.logits, inst.gold), scale(mean(mul(proj, proj)), 0.3));
    };
    GradCheckOptions opts;
    opts.max_coords_per_param = 6;
    opts.seed = i;
    CHECK(finite_difference_check(graph, student.params().pointers(), opts) < 1e-4);
  }
}

TEST_CASE("student logits are candidate-permutation equivariant") {
  const auto world = tiny_world();
  const auto splits = data::generate_task(world, 8);
  Student student(world, tiny_student(), 9);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  for (const auto& inst : splits.val.instances) {
    Tape t1, t2;
    const Tensor a = student.encode(t1, inst).logits.value();
    const Tensor b = student.encode(t2, permuted(inst, perm)).logits.value();
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(b[i] == a[perm[i]]);
  }
}

TEST_CASE("project_to_teacher is an affine map") {
  const auto world = tiny_world();
  StudentConfig cfg = tiny_student();
  cfg.teacher_dim = cfg.body.dim;
  cfg.identity_projection = true;
  Student eye(world, cfg, 1);
  Tape tape;
  std::mt19937_64 rng(4);
  const Tensor feat = test::random_tensor({8}, rng);
  CHECK(eye.project_to_teacher(tape, tape.constant(feat)).value() == feat);

  Student student(world, tiny_student(), 2);
  auto& bias = student.params().get("proj.b").value;
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * static_cast<double>(i);
  CHECK(student.project_to_teacher(tape, tape.constant(Tensor::zeros({8}))).value() == bias);

  const Tensor& w = student.params().get("proj.w").value;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = test::random_tensor({8}, rng);
    const Tensor y = student.project_to_teacher(tape, tape.constant(x)).value();
    for (std::size_t j = 0; j < 6; ++j) {
      double acc = bias[j];
      for (std::size_t i = 0; i < 8; ++i) acc += x[i] * w.at(i, j);
      CHECK(std::abs(y[j] - acc) < 1e-12);
    }
  }
  cfg.teacher_dim = 5;
  CHECK(code_of([&] { Student bad(world, cfg, 1); }) == ErrorCode::SpecInvalid);
}

TEST_CASE("teacher outputs are deterministic and equivariant") {
  const auto world = tiny_world();
  const auto splits = data::generate_task(world, 3);
  TeacherPair teacher{std::make_shared<VisionTower>(world, tiny_tower(), TowerKind::Contrastive, 1),
                      std::make_shared<TextTower>(world, tiny_tower(), TowerKind::Contrastive, 1)};
  const auto& inst = splits.val.instances.front();
  const auto a = teacher_encode(teacher, inst);
  const auto b = teacher_encode(teacher, inst);
  CHECK(a.image == b.image);
  CHECK(a.text == b.text);
  CHECK(a.logits == b.logits);
  CHECK(a.image.shape() == Shape{6});
  CHECK(a.logits.size() == inst.candidates.size());
  for (std::size_t c = 0; c < inst.candidates.size(); ++c) {
    CHECK(a.tokens[c].shape() == Shape{inst.pair_text(c).size(), 6});
    const double expect = eval::cosine_similarity(a.image.data(), a.text.row(c)) / 0.07;
    CHECK(a.logits[c] == doctest::Approx(expect).epsilon(1e-14));
  }
  const std::vector<std::size_t> perm = {3, 2, 1, 0};
  const auto p = teacher_encode(teacher, permuted(inst, perm));
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.logits[i] == a.logits[perm[i]]);
}

TEST_CASE("frozen teachers receive no gradient") {
  const auto world = tiny_world();
  Rng rng(2);
  auto vision = std::make_shared<VisionTower>(world, tiny_tower(), TowerKind::Contrastive, 1);
  auto text = std::make_shared<TextTower>(world, tiny_tower(), TowerKind::Contrastive, 1);
  vision->params().set_frozen(true);
  text->params().set_frozen(true);
  Student student(world, tiny_student(), 1);
  const auto image = data::random_image(world, rng);
  const data::TokenSequence words = {5, 6, 7};
  Tape tape;
  const data::ImageGrid* imgs[] = {&image};
  const data::TokenSequence* texts[] = {&words};
  Var v = vision->encode(tape, imgs);
  Var t = text->encode(tape, texts).eos;
  const StudentInput in[] = {{&image, &words}};
  auto out = student.forward(tape, in);
  Var loss = add(mean(l1_distance_rows(v, student.project_to_teacher(tape, out.img))),
                 mean(l1_distance_rows(t, student.project_to_teacher(tape, out.cls))));
  tape.backward(loss);
  for (const auto& p : vision->params().all())
    for (double g : p.grad.data()) CHECK(g == 0.0);
  for (const auto& p : text->params().all())
    for (double g : p.grad.data()) CHECK(g == 0.0);
  double student_grad = 0.0;
  for (const auto& p : student.params().all())
    for (double g : p.grad.data()) student_grad += std::abs(g);
  CHECK(student_grad > 0.0);
}

TEST_CASE("weight files round trip") {
  const auto world = tiny_world();
  Student student(world, tiny_student(), 11);
  const auto path = temp_path("student.madw");
  save_student(student, path);
  const auto back = load_student(world, tiny_student(), path);
  CHECK(back->params().same_values(student.params()));

  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "MADW");

  StudentConfig other = tiny_student();
  other.body.dim = 12;
  CHECK(code_of([&] { load_student(world, other, path); }) == ErrorCode::ArchMismatch);

  const auto bad = temp_path("bad.madw");
  { std::ofstream(bad) << "NOPE"; }
  CHECK(code_of([&] { load_weights(bad); }) == ErrorCode::ParseError);

  TeacherPair teacher{std::make_shared<VisionTower>(world, tiny_tower(), TowerKind::Contrastive, 1),
                      std::make_shared<TextTower>(world, tiny_tower(), TowerKind::MaskedToken, 2)};
  const auto dir = temp_path("teacher_dir");
  save_teacher(teacher, dir);
  auto loaded = load_teacher(world, dir);
  CHECK(loaded.vision->params().same_values(teacher.vision->params()));
  CHECK(loaded.text->params().same_values(teacher.text->params()));
  CHECK(loaded.text->kind() == TowerKind::MaskedToken);
  CHECK(loaded.vision->params().frozen());
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
  std::filesystem::remove_all(dir);
}

TEST_CASE("student clone copies weights") {
  const auto world = tiny_world();
  Student student(world, tiny_student(), 5);
  auto copy = student.clone();
  CHECK(copy->params().same_values(student.params()));
  copy->params().all().front().value[0] += 1.0;
  CHECK_FALSE(copy->params().same_values(student.params()));
}
