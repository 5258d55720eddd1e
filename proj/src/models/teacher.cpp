#include "mad/models/teacher.hpp"

#include <algorithm>
#include <cmath>

#include "mad/error.hpp"
#include "mad/numerics/optim.hpp"

namespace mad::models {

std::string to_string(TowerKind kind) {
  switch (kind) {
    case TowerKind::Contrastive: return "contrastive";
    case TowerKind::MaskedToken: return "masked-token";
    case TowerKind::PresenceClassifier: return "presence-classifier";
  }
  return "unknown";
}

namespace {

std::vector<std::size_t> iota_stride(std::size_t count, std::size_t stride) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = i * stride;
  return out;
}

// Warmup over the first 5% of steps, cosine decay afterwards.
double schedule(std::size_t step, std::size_t total) { return warmup_cosine(step, total); }

void store_meta(ParameterStore& store, TowerKind kind, const TowerConfig& c) {
  store.add("meta.kind", Tensor::scalar(static_cast<double>(kind)));
  store.add("meta.config",
            Tensor::vector({static_cast<double>(c.body.dim), static_cast<double>(c.body.layers),
                            static_cast<double>(c.body.heads), static_cast<double>(c.body.mlp_ratio),
                            static_cast<double>(c.out_dim), static_cast<double>(c.max_text)}));
}

std::pair<TowerKind, TowerConfig> read_meta(const ParameterStore& store) {
  const auto& v = store.get("meta.config").value;
  TowerConfig c;
  c.body = {static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]),
            static_cast<std::size_t>(v[2]), static_cast<std::size_t>(v[3])};
  c.out_dim = static_cast<std::size_t>(v[4]);
  c.max_text = static_cast<std::size_t>(v[5]);
  return {static_cast<TowerKind>(static_cast<int>(store.get("meta.kind").value.item())), c};
}

}  // namespace

VisionTower::VisionTower(const data::TaskSpec& world, const TowerConfig& config, TowerKind kind,
                         std::uint64_t seed)
    : world_(world), config_(config), kind_(kind) {
  Rng rng(mix_seed(seed, "vision-tower"));
  const std::size_t d = config.body.dim;
  store_meta(params_, kind, config);
  params_.add("embed.object", normal_tensor({world.objects + 1, d}, 1.0, rng));
  params_.add("embed.attribute", normal_tensor({world.attributes + 1, d}, 1.0, rng));
  params_.add("embed.position", normal_tensor({world.grid * world.grid + 1, d}, 1.0, rng));
  body_ = std::make_unique<TransformerStack>(params_, "body", config.body, rng);
  params_.add("final.gamma", Tensor::filled({d}, 1.0));
  params_.add("final.beta", Tensor::zeros({d}));
  params_.add("proj.w", fan_in_weight(d, config.out_dim, rng));
  if (kind == TowerKind::PresenceClassifier) {
    params_.add("head.w", fan_in_weight(config.out_dim, world.objects + world.attributes, rng));
    params_.add("head.b", Tensor::zeros({world.objects + world.attributes}));
  }
  params_.get("meta.kind").frozen = true;
  params_.get("meta.config").frozen = true;
}

Var VisionTower::encode(Tape& tape, std::span<const ImageGrid* const> images) {
  const std::size_t cells = world_.grid * world_.grid, n = cells + 1;
  std::vector<std::size_t> obj, attr, pos, segments(images.size(), n);
  for (const ImageGrid* g : images) {
    if (g->cells.size() != cells) throw Error(ErrorCode::ShapeMismatch, "image grid size differs");
    obj.push_back(world_.objects);
    attr.push_back(world_.attributes);
    pos.push_back(0);
    for (std::size_t k = 0; k < cells; ++k) {
      if (g->cells[k].obj >= world_.objects || g->cells[k].attr >= world_.attributes)
        throw Error(ErrorCode::VocabOverflow, "cell id outside the world vocabulary");
      obj.push_back(g->cells[k].obj);
      attr.push_back(g->cells[k].attr);
      pos.push_back(k + 1);
    }
  }
  Var x = add(add(embedding_lookup(tape.parameter(params_.get("embed.object")), obj),
                  embedding_lookup(tape.parameter(params_.get("embed.attribute")), attr)),
              embedding_lookup(tape.parameter(params_.get("embed.position")), pos));
  Var h = body_->forward(tape, x, segments).hidden;
  const auto img_rows = iota_stride(images.size(), n);
  h = layer_norm(select_rows(h, img_rows), tape.parameter(params_.get("final.gamma")),
                 tape.parameter(params_.get("final.beta")));
  return matmul(h, tape.parameter(params_.get("proj.w")));
}

Tensor VisionTower::encode(const ImageGrid& image) {
  Tape tape;
  const ImageGrid* one[] = {&image};
  return encode(tape, one).value().reshaped({config_.out_dim});
}

Var VisionTower::presence_logits(Tape& tape, Var features) {
  if (kind_ != TowerKind::PresenceClassifier)
    throw Error(ErrorCode::ArchMismatch, "tower has no presence head");
  return linear(tape, features, params_.get("head.w"), params_.get("head.b"));
}

TextTower::TextTower(const data::TaskSpec& world, const TowerConfig& config, TowerKind kind,
                     std::uint64_t seed)
    : config_(config), kind_(kind), vocab_size_(data::Vocabulary(world).size()) {
  Rng rng(mix_seed(seed, "text-tower"));
  const std::size_t d = config.body.dim;
  store_meta(params_, kind, config);
  params_.add("embed.token", normal_tensor({vocab_size_, d}, 1.0, rng));
  params_.add("embed.position", normal_tensor({config.max_text + 1, d}, 1.0, rng));
  body_ = std::make_unique<TransformerStack>(params_, "body", config.body, rng);
  params_.add("final.gamma", Tensor::filled({d}, 1.0));
  params_.add("final.beta", Tensor::zeros({d}));
  params_.add("proj.w", fan_in_weight(d, config.out_dim, rng));
  if (kind == TowerKind::MaskedToken) {
    params_.add("head.w", fan_in_weight(config.out_dim, vocab_size_, rng));
    params_.add("head.b", Tensor::zeros({vocab_size_}));
  }
  params_.get("meta.kind").frozen = true;
  params_.get("meta.config").frozen = true;
}

TextEncoding TextTower::encode(Tape& tape, std::span<const TokenSequence* const> texts) {
  std::vector<std::size_t> ids, pos, segments, eos_rows, token_rows;
  TextEncoding enc;
  enc.offsets.push_back(0);
  for (const TokenSequence* t : texts) {
    if (t->size() > config_.max_text)
      throw Error(ErrorCode::SequenceTooLong, std::to_string(t->size()) + " text tokens, max " +
                                                  std::to_string(config_.max_text));
    for (std::size_t i = 0; i < t->size(); ++i) {
      if ((*t)[i] >= vocab_size_)
        throw Error(ErrorCode::VocabOverflow, "token " + std::to_string((*t)[i]));
      token_rows.push_back(ids.size());
      ids.push_back((*t)[i]);
      pos.push_back(i);
    }
    eos_rows.push_back(ids.size());
    ids.push_back(data::Vocabulary::kEos);
    pos.push_back(t->size());
    segments.push_back(t->size() + 1);
    enc.offsets.push_back(token_rows.size());
  }
  Var x = add(embedding_lookup(tape.parameter(params_.get("embed.token")), ids),
              embedding_lookup(tape.parameter(params_.get("embed.position")), pos));
  Var h = body_->forward(tape, x, segments).hidden;
  h = layer_norm(h, tape.parameter(params_.get("final.gamma")),
                 tape.parameter(params_.get("final.beta")));
  Var f = matmul(h, tape.parameter(params_.get("proj.w")));
  enc.eos = select_rows(f, eos_rows);
  enc.tokens = token_rows.empty() ? Var{} : select_rows(f, token_rows);
  return enc;
}

Var TextTower::token_logits(Tape& tape, Var token_features) {
  if (kind_ != TowerKind::MaskedToken) throw Error(ErrorCode::ArchMismatch, "tower has no token head");
  return linear(tape, token_features, params_.get("head.w"), params_.get("head.b"));
}

TeacherOutputs teacher_encode(TeacherPair& teacher, const data::Instance& instance) {
  Tape tape;
  const ImageGrid* img[] = {&instance.image};
  const Tensor v = teacher.vision->encode(tape, img).value().reshaped({teacher.dim()});
  std::vector<TokenSequence> texts;
  for (std::size_t c = 0; c < instance.candidates.size(); ++c) texts.push_back(instance.pair_text(c));
  std::vector<const TokenSequence*> ptrs;
  for (const auto& t : texts) ptrs.push_back(&t);
  const TextEncoding enc = teacher.text->encode(tape, ptrs);

  TeacherOutputs out;
  out.image = v;
  out.text = enc.eos.value();
  const std::size_t d = teacher.dim();
  if (out.text.cols() != d) throw Error(ErrorCode::ShapeMismatch, "teacher towers differ in width");
  const Tensor& tok = enc.tokens.value();
  std::vector<double> logits;
  for (std::size_t c = 0; c < texts.size(); ++c) {
    const std::size_t b = enc.offsets[c], e = enc.offsets[c + 1];
    std::vector<double> rows(tok.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                             tok.data().begin() + static_cast<std::ptrdiff_t>(e * d));
    out.tokens.emplace_back(Shape{e - b, d}, std::move(rows));
    logits.push_back(eval::cosine_similarity(v.data(), out.text.row(c)) / teacher.temperature);
  }
  out.logits = Tensor::vector(std::move(logits));
  return out;
}

std::vector<TeacherOutputs> teacher_encode_all(TeacherPair& teacher,
                                               const data::DatasetSplit& split) {
  std::vector<TeacherOutputs> out;
  out.reserve(split.size());
  for (const auto& inst : split.instances) out.push_back(teacher_encode(teacher, inst));
  return out;
}

TokenSequence sample_caption(const ImageGrid& image, const data::Vocabulary& vocab, Rng& rng) {
  const std::size_t cells = image.cells.size();
  const bool full = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.25;
  std::vector<std::size_t> chosen(cells);
  for (std::size_t i = 0; i < cells; ++i) chosen[i] = i;
  if (!full) {
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(1 + uniform_index(rng, cells));
    std::sort(chosen.begin(), chosen.end());
  }
  TokenSequence out;
  for (std::size_t k : chosen) {
    out.push_back(vocab.object(image.cells[k].obj));
    out.push_back(vocab.attribute(image.cells[k].attr));
    if (full || uniform_index(rng, 2) == 0) out.push_back(vocab.position(k));
  }
  return out;
}

namespace {

std::vector<std::size_t> diagonal(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

// Symmetric InfoNCE over a batch of matched (image, text) features.
Var contrastive_loss(Var image, Var text, double temperature) {
  Var sim = scale(matmul(normalize_rows(image), transpose(normalize_rows(text))), 1.0 / temperature);
  const auto diag = diagonal(image.shape()[0]);
  return scale(add(cross_entropy_rows(sim, diag), cross_entropy_rows(transpose(sim), diag)), 0.5);
}

void freeze(ParameterStore& store) {
  store.set_frozen(true);
  store.zero_grad();
}

}  // namespace

double description_matching_accuracy(TeacherPair& teacher, const data::TaskSpec& world,
                                     std::size_t images, std::uint64_t seed,
                                     std::vector<std::size_t>* predictions) {
  const data::Vocabulary vocab(world);
  Rng rng(mix_seed(seed, "description-matching"));
  std::size_t correct = 0, total = 0;
  if (predictions) predictions->clear();
  for (std::size_t g = 0; g + 4 <= images; g += 4) {
    std::vector<ImageGrid> grid;
    std::vector<TokenSequence> desc;
    for (int i = 0; i < 4; ++i) {
      grid.push_back(data::random_image(world, rng));
      desc.push_back(data::describe(grid.back(), vocab));
    }
    Tape tape;
    std::vector<const ImageGrid*> ip;
    std::vector<const TokenSequence*> tp;
    for (int i = 0; i < 4; ++i) {
      ip.push_back(&grid[i]);
      tp.push_back(&desc[i]);
    }
    const Tensor v = teacher.vision->encode(tape, ip).value();
    const Tensor t = teacher.text->encode(tape, tp).eos.value();
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t best = 0;
      double best_score = -2.0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double s = eval::cosine_similarity(v.row(i), t.row(j));
        if (s > best_score) {
          best_score = s;
          best = j;
        }
      }
      if (predictions) predictions->push_back(best);
      correct += best == i;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

TeacherPair make_toy_teacher(const data::TaskSpec& world, std::uint64_t seed,
                             const TeacherTrainConfig& config, TeacherReport* report) {
  data::validate(world);
  TeacherPair pair;
  pair.vision = std::make_shared<VisionTower>(world, config.tower, TowerKind::Contrastive, seed);
  pair.text = std::make_shared<TextTower>(world, config.tower, TowerKind::Contrastive, seed);
  const data::Vocabulary vocab(world);
  auto params = pair.vision->params().pointers();
  for (Parameter* p : pair.text->params().pointers()) params.push_back(p);
  Optimizer opt(params, {OptimizerKind::Adam, config.lr});
  Rng rng(mix_seed(seed, "teacher-batches"));
  double loss_value = 0.0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<ImageGrid> grid;
    std::vector<TokenSequence> caps;
    for (std::size_t i = 0; i < config.batch; ++i) {
      grid.push_back(data::random_image(world, rng));
      caps.push_back(sample_caption(grid.back(), vocab, rng));
    }
    std::vector<const ImageGrid*> ip;
    std::vector<const TokenSequence*> tp;
    for (std::size_t i = 0; i < config.batch; ++i) {
      ip.push_back(&grid[i]);
      tp.push_back(&caps[i]);
    }
    Tape tape;
    Var loss = contrastive_loss(pair.vision->encode(tape, ip), pair.text->encode(tape, tp).eos,
                                pair.temperature);
    loss_value = loss.value().item();
    for (Parameter* p : params) p->zero_grad();
    tape.backward(loss);
    opt.step(schedule(step, config.steps));
  }
  freeze(pair.vision->params());
  freeze(pair.text->params());
  const double acc =
      description_matching_accuracy(pair, world, config.eval_images, mix_seed(seed, "heldout"));
  if (report) *report = {acc, loss_value, config.steps};
  if (acc < 0.90)
    throw Error(ErrorCode::TeacherTooWeak,
                "held-out description matching " + std::to_string(acc) + " < 0.90");
  return pair;
}

namespace {

struct ClozeDoc {
  TokenSequence tokens;
  std::size_t answer_slot = 0;
};

// Text-only corpus with world knowledge: captions in which each object
// usually carries its canonical attribute. One attribute mention per caption
// is the answer slot.
constexpr double kCanonicalRate = 0.95;

std::uint32_t canonical_attribute(const data::TaskSpec& world, std::uint32_t obj) {
  return static_cast<std::uint32_t>((obj * 5 + 1) % world.attributes);
}

ClozeDoc cloze_doc(const data::TaskSpec& world, const data::Vocabulary& vocab, Rng& rng) {
  std::bernoulli_distribution canonical(kCanonicalRate);
  const std::size_t cells_total = world.grid * world.grid;
  std::vector<std::size_t> cells(cells_total);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  std::shuffle(cells.begin(), cells.end(), rng);
  cells.resize(2 + uniform_index(rng, cells_total - 1));
  std::sort(cells.begin(), cells.end());
  ClozeDoc doc;
  std::vector<std::size_t> attribute_slots;
  for (std::size_t k : cells) {
    const auto obj = static_cast<std::uint32_t>(uniform_index(rng, world.objects));
    const auto attr = canonical(rng) ? canonical_attribute(world, obj)
                                     : static_cast<std::uint32_t>(uniform_index(rng, world.attributes));
    doc.tokens.push_back(vocab.object(obj));
    attribute_slots.push_back(doc.tokens.size());
    doc.tokens.push_back(vocab.attribute(attr));
    doc.tokens.push_back(vocab.position(k));
  }
  doc.answer_slot = attribute_slots[uniform_index(rng, attribute_slots.size())];
  return doc;
}

}  // namespace

std::shared_ptr<TextTower> make_alt_text_teacher(const data::TaskSpec& world, std::uint64_t seed,
                                                 const TeacherTrainConfig& config,
                                                 TeacherReport* report) {
  data::validate(world);
  auto tower = std::make_shared<TextTower>(world, config.tower, TowerKind::MaskedToken, seed);
  const data::Vocabulary vocab(world);
  Optimizer opt(tower->params().pointers(), {OptimizerKind::Adam, config.lr});
  Rng rng(mix_seed(seed, "alt-text-batches"));
  std::bernoulli_distribution mask15(0.15);

  auto run_batch = [&](Rng& r, bool train, std::size_t& hits) {
    std::vector<TokenSequence> masked;
    std::vector<std::size_t> rows, targets, answer_rows;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < config.batch; ++i) {
      ClozeDoc doc = cloze_doc(world, vocab, r);
      TokenSequence m = doc.tokens;
      for (std::size_t k = 0; k < m.size(); ++k) {
        const bool is_answer = k == doc.answer_slot;
        // Object mentions stay visible so the answer remains predictable.
        if (is_answer || (train && !vocab.is_object(m[k]) && mask15(r))) {
          if (is_answer) answer_rows.push_back(rows.size());
          rows.push_back(offset + k);
          targets.push_back(m[k]);
          m[k] = data::Vocabulary::kMask;
        }
      }
      offset += m.size();
      masked.push_back(std::move(m));
    }
    std::vector<const TokenSequence*> ptrs;
    for (const auto& m : masked) ptrs.push_back(&m);
    Tape tape;
    const TextEncoding enc = tower->encode(tape, ptrs);
    Var logits = tower->token_logits(tape, select_rows(enc.tokens, rows));
    Var loss = cross_entropy_rows(logits, targets);
    const Tensor& lv = logits.value();
    for (std::size_t a : answer_rows) {
      const auto row = lv.row(a);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hits += best == targets[a];
    }
    if (train) {
      tower->params().zero_grad();
      tape.backward(loss);
    }
    return loss.value().item();
  };

  double loss_value = 0.0;
  std::size_t ignored = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    loss_value = run_batch(rng, true, ignored);
    opt.step(schedule(step, config.steps));
  }
  freeze(tower->params());
  Rng held(mix_seed(seed, "alt-text-heldout"));
  std::size_t hits = 0, total = 0;
  while (total < config.eval_images) {
    run_batch(held, false, hits);
    total += config.batch;
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  if (report) *report = {acc, loss_value, config.steps};
  if (acc < 0.80)
    throw Error(ErrorCode::TeacherTooWeak,
                "held-out masked answer accuracy " + std::to_string(acc) + " < 0.80");
  return tower;
}

std::shared_ptr<VisionTower> make_alt_vision_teacher(const data::TaskSpec& world,
                                                     std::uint64_t seed,
                                                     const TeacherTrainConfig& config,
                                                     TeacherReport* report) {
  data::validate(world);
  auto tower =
      std::make_shared<VisionTower>(world, config.tower, TowerKind::PresenceClassifier, seed);
  Optimizer opt(tower->params().pointers(), {OptimizerKind::Adam, config.lr});
  const std::size_t labels = world.objects + world.attributes;

  auto run_batch = [&](Rng& r, bool train, std::size_t& hits) {
    std::vector<ImageGrid> grid;
    std::vector<double> target;
    for (std::size_t i = 0; i < config.batch; ++i) {
      grid.push_back(data::random_image(world, r));
      std::vector<double> t(labels, 0.0);
      for (const auto& c : grid.back().cells) {
        t[c.obj] = 1.0;
        t[world.objects + c.attr] = 1.0;
      }
      target.insert(target.end(), t.begin(), t.end());
    }
    std::vector<const ImageGrid*> ptrs;
    for (const auto& g : grid) ptrs.push_back(&g);
    Tape tape;
    Var logits = tower->presence_logits(tape, tower->encode(tape, ptrs));
    Var loss = bce_with_logits(logits, target);
    const Tensor& lv = logits.value();
    for (std::size_t k = 0; k < lv.size(); ++k) hits += (lv[k] > 0.0) == (target[k] > 0.5);
    if (train) {
      tower->params().zero_grad();
      tape.backward(loss);
    }
    return loss.value().item();
  };

  Rng rng(mix_seed(seed, "alt-vision-batches"));
  double loss_value = 0.0;
  std::size_t ignored = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    loss_value = run_batch(rng, true, ignored);
    opt.step(schedule(step, config.steps));
  }
  freeze(tower->params());
  Rng held(mix_seed(seed, "alt-vision-heldout"));
  std::size_t hits = 0, total = 0;
  while (total < config.eval_images * labels) {
    run_batch(held, false, hits);
    total += config.batch * labels;
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  if (report) *report = {acc, loss_value, config.steps};
  if (acc < 0.80)
    throw Error(ErrorCode::TeacherTooWeak,
                "held-out presence accuracy " + std::to_string(acc) + " < 0.80");
  return tower;
}

void save_teacher(TeacherPair& teacher, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_weights(teacher.vision->params(), dir / "vision.madw");
  save_weights(teacher.text->params(), dir / "text.madw");
}

TeacherPair load_teacher(const data::TaskSpec& world, const std::filesystem::path& dir) {
  TeacherPair pair;
  {
    ParameterStore stored = load_weights(dir / "vision.madw");
    auto [kind, config] = read_meta(stored);
    pair.vision = std::make_shared<VisionTower>(world, config, kind, 0);
    pair.vision->params().copy_values_from(stored);
    freeze(pair.vision->params());
  }
  {
    ParameterStore stored = load_weights(dir / "text.madw");
    auto [kind, config] = read_meta(stored);
    pair.text = std::make_shared<TextTower>(world, config, kind, 0);
    pair.text->params().copy_values_from(stored);
    freeze(pair.text->params());
  }
  return pair;
}

}  // namespace mad::models
