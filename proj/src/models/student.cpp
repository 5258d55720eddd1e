#include "mad/models/student.hpp"

#include "mad/error.hpp"

namespace mad::models {

Student::Student(const data::TaskSpec& world, const StudentConfig& config, std::uint64_t seed)
    : world_(world), config_(config), vocab_size_(data::Vocabulary(world).size()) {
  Rng rng(mix_seed(seed, "student"));
  const std::size_t d = config.body.dim, dt = config.teacher_dim;
  // Content rows: IMG, CLS, text vocabulary, objects. Kind rows: attributes,
  // special, text.
  params_.add("embed.content", normal_tensor({2 + vocab_size_ + world.objects, d}, 1.0, rng));
  params_.add("embed.kind", normal_tensor({world.attributes + 2, d}, 1.0, rng));
  params_.add("embed.position",
              normal_tensor({2 + world.grid * world.grid + config.max_text, d}, 1.0, rng));
  body_ = std::make_unique<TransformerStack>(params_, "body", config.body, rng);
  params_.add("final.gamma", Tensor::filled({d}, 1.0));
  params_.add("final.beta", Tensor::zeros({d}));
  params_.add("head.w", fan_in_weight(d, 1, rng));
  params_.add("head.b", Tensor::zeros({1}));
  if (config.identity_projection) {
    if (d != dt) throw Error(ErrorCode::SpecInvalid, "identity projection needs equal dims");
    Tensor eye = Tensor::zeros({d, dt});
    for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    params_.add("proj.w", std::move(eye));
  } else {
    params_.add("proj.w", fan_in_weight(d, dt, rng));
  }
  params_.add("proj.b", Tensor::zeros({dt}));
  params_.add("mlm.w", fan_in_weight(d, vocab_size_, rng));
  params_.add("mlm.b", Tensor::zeros({vocab_size_}));
  params_.add("itm.w", fan_in_weight(d, 1, rng));
  params_.add("itm.b", Tensor::zeros({1}));
}

StudentBatch Student::forward(Tape& tape, std::span<const StudentInput> inputs) {
  const std::size_t cells = world_.grid * world_.grid;
  const std::size_t img_id = 0, cls_id = 1, text_base = 2, obj_base = 2 + vocab_size_;
  const std::size_t special_kind = world_.attributes, text_kind = world_.attributes + 1;

  std::vector<std::size_t> content, kind, pos, segments, img_rows, cls_rows, text_rows;
  StudentBatch out;
  out.token_offsets.push_back(0);
  for (const StudentInput& in : inputs) {
    const auto& g = *in.image;
    const auto& t = *in.text;
    if (g.cells.size() != cells) throw Error(ErrorCode::ShapeMismatch, "image grid size differs");
    if (t.size() > config_.max_text)
      throw Error(ErrorCode::SequenceTooLong, std::to_string(t.size()) + " text tokens, max " +
                                                  std::to_string(config_.max_text));
    SequenceLayout lay{content.size(), cells, t.size()};
    std::size_t p = 0;
    img_rows.push_back(content.size());
    content.push_back(img_id);
    kind.push_back(special_kind);
    pos.push_back(p++);
    for (const auto& c : g.cells) {
      if (c.obj >= world_.objects || c.attr >= world_.attributes)
        throw Error(ErrorCode::VocabOverflow, "cell id outside the world vocabulary");
      content.push_back(obj_base + c.obj);
      kind.push_back(c.attr);
      pos.push_back(p++);
    }
    cls_rows.push_back(content.size());
    content.push_back(cls_id);
    kind.push_back(special_kind);
    pos.push_back(p++);
    for (data::TokenId tok : t) {
      if (tok >= vocab_size_) throw Error(ErrorCode::VocabOverflow, "token " + std::to_string(tok));
      text_rows.push_back(content.size());
      content.push_back(text_base + tok);
      kind.push_back(text_kind);
      pos.push_back(p++);
    }
    segments.push_back(lay.length());
    out.layout.push_back(lay);
    out.token_offsets.push_back(text_rows.size());
  }

  Var x = add(add(embedding_lookup(tape.parameter(params_.get("embed.content")), content),
                  embedding_lookup(tape.parameter(params_.get("embed.kind")), kind)),
              embedding_lookup(tape.parameter(params_.get("embed.position")), pos));
  auto body = body_->forward(tape, x, segments);
  out.attention = std::move(body.attention);
  Var h = layer_norm(body.hidden, tape.parameter(params_.get("final.gamma")),
                     tape.parameter(params_.get("final.beta")));
  out.img = select_rows(h, img_rows);
  out.cls = select_rows(h, cls_rows);
  if (!text_rows.empty()) out.tokens = select_rows(h, text_rows);
  return out;
}

StudentOutputs Student::encode(Tape& tape, const data::Instance& instance) {
  std::vector<data::TokenSequence> texts;
  for (std::size_t c = 0; c < instance.candidates.size(); ++c) texts.push_back(instance.pair_text(c));
  std::vector<StudentInput> inputs;
  for (const auto& t : texts) inputs.push_back({&instance.image, &t});
  StudentOutputs out;
  out.batch = forward(tape, inputs);
  out.logits = candidate_logits(tape, out.batch.cls);
  return out;
}

std::vector<StudentOutputs> Student::encode_many(Tape& tape,
                                                std::span<const data::Instance* const> instances) {
  std::vector<data::TokenSequence> texts;
  std::vector<std::size_t> first;
  for (const data::Instance* inst : instances) {
    first.push_back(texts.size());
    for (std::size_t c = 0; c < inst->candidates.size(); ++c) texts.push_back(inst->pair_text(c));
  }
  first.push_back(texts.size());
  std::vector<StudentInput> inputs;
  std::size_t k = 0;
  for (const data::Instance* inst : instances)
    for (std::size_t c = 0; c < inst->candidates.size(); ++c) inputs.push_back({&inst->image, &texts[k++]});
  StudentBatch all = forward(tape, inputs);
  Var logits = candidate_logits(tape, all.cls);

  std::vector<StudentOutputs> out(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const std::size_t b = first[i], n = first[i + 1] - first[i];
    auto& o = out[i];
    o.batch.img = slice_rows(all.img, b, n);
    o.batch.cls = slice_rows(all.cls, b, n);
    const std::size_t t0 = all.token_offsets[b], t1 = all.token_offsets[b + n];
    if (t1 > t0) o.batch.tokens = slice_rows(all.tokens, t0, t1 - t0);
    for (std::size_t j = b; j <= b + n; ++j) o.batch.token_offsets.push_back(all.token_offsets[j] - t0);
    o.batch.layout.assign(all.layout.begin() + static_cast<std::ptrdiff_t>(b),
                          all.layout.begin() + static_cast<std::ptrdiff_t>(b + n));
    o.batch.attention = all.attention;
    o.logits = reshape(slice_rows(reshape(logits, {logits.shape()[0], 1}), b, n), {n});
  }
  return out;
}

Var Student::candidate_logits(Tape& tape, Var cls) {
  Var y = linear(tape, cls, params_.get("head.w"), params_.get("head.b"));
  return reshape(y, {y.shape()[0]});
}

Var Student::project_to_teacher(Tape& tape, Var features) {
  return linear(tape, features, params_.get("proj.w"), params_.get("proj.b"));
}

Var Student::masked_token_logits(Tape& tape, Var token_features) {
  return linear(tape, token_features, params_.get("mlm.w"), params_.get("mlm.b"));
}

Var Student::match_logits(Tape& tape, Var cls) {
  Var y = linear(tape, cls, params_.get("itm.w"), params_.get("itm.b"));
  return reshape(y, {y.shape()[0]});
}

std::unique_ptr<Student> Student::clone() const {
  auto copy = std::make_unique<Student>(world_, config_, 0);
  copy->params_.copy_values_from(params_);
  for (std::size_t i = 0; i < params_.all().size(); ++i)
    copy->params_.all()[i].frozen = params_.all()[i].frozen;
  return copy;
}

void save_student(const Student& student, const std::filesystem::path& path) {
  save_weights(student.params(), path);
}

std::unique_ptr<Student> load_student(const data::TaskSpec& world, const StudentConfig& config,
                                      const std::filesystem::path& path) {
  auto student = std::make_unique<Student>(world, config, 0);
  const ParameterStore stored = load_weights(path);
  if (stored.all().size() != student->params().all().size())
    throw Error(ErrorCode::ArchMismatch, path.string() + " holds a different architecture");
  try {
    student->params().copy_values_from(stored);
  } catch (const Error& e) {
    throw Error(ErrorCode::ArchMismatch, e.what());
  }
  return student;
}

}  // namespace mad::models
