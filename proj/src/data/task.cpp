#include "mad/data/task.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <unordered_set>

#include "mad/data/sampling.hpp"
#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad::data {

namespace {

constexpr std::size_t kMcqDistractors = 3;

const std::vector<std::string> kWords = {
    "?",    "what", "color", "is",  "left",  "right", "of",     "how",
    "many", "where", "which", "not", "in",    "image", "more",   "or",
    "if",   "one",  "object", "there", "yes", "no",    "entail", "neutral",
    "contradict"};

const std::vector<std::string> kMcqCategories = {
    "attribute", "relation", "counting", "location", "negation", "comparison", "hypothetical"};
const std::vector<std::string> kEntailmentCategories = {"entailment", "neutral", "contradiction"};
const std::vector<std::string> kOpenCategories = {
    "attribute", "relation_left", "relation_right", "counting",
    "location",  "exists",        "comparison",     "object_of_attribute"};

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Mcq: return "mcq";
    case TaskKind::Entailment: return "entailment";
    case TaskKind::OpenAnswer: return "open-answer";
  }
  return "unknown";
}

std::string to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::Train: return "train";
    case SplitKind::Val: return "val";
    case SplitKind::Test: return "test";
  }
  return "unknown";
}

std::uint64_t image_key(const ImageGrid& image) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  feed(image.size);
  for (const Cell& c : image.cells) {
    feed(c.obj);
    feed(c.attr);
  }
  return h;
}

void validate(const TaskSpec& spec) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::SpecInvalid, m); };
  if (spec.grid < 2) fail("grid must be >= 2");
  if (spec.attributes < 4) fail("need >= 4 attributes for four-way candidates");
  if (spec.objects < spec.grid * spec.grid / 2 + 4) fail("too few objects for the grid");
  if (spec.markers < 2) fail("need >= 2 markers");
  if (spec.cue_rate < 0.0 || spec.cue_rate > 1.0) fail("cue_rate outside [0,1]");
  if (spec.kind == TaskKind::Mcq && spec.grid * spec.grid + 1 < 4) fail("too few count answers");
  if (spec.pairs_per_image == 0) fail("pairs_per_image must be >= 1");
  for (const auto& c : spec.category_subset) {
    const auto all = categories(spec.kind);
    if (std::find(all.begin(), all.end(), c) == all.end()) fail("unknown category " + c);
  }
}

Vocabulary::Vocabulary(const TaskSpec& spec) {
  names_ = {"[pad]", "[mask]", "[eos]"};
  names_.insert(names_.end(), kWords.begin(), kWords.end());
  auto block = [&](const std::string& prefix, std::size_t n, TokenId& base, std::size_t& count) {
    base = static_cast<TokenId>(names_.size());
    count = n;
    for (std::size_t i = 0; i < n; ++i) names_.push_back(prefix + std::to_string(i));
  };
  block("obj", spec.objects, object_base_, objects_);
  block("attr", spec.attributes, attribute_base_, attributes_);
  block("pos", spec.grid * spec.grid, position_base_, positions_);
  block("num", spec.grid * spec.grid + 1, number_base_, numbers_);
  block("mark", spec.markers, marker_base_, markers_);
  for (std::size_t i = 0; i < attributes_; ++i) answer_vocab_.push_back(attribute(i));
  for (std::size_t i = 0; i < objects_; ++i) answer_vocab_.push_back(object(i));
  for (std::size_t i = 0; i < numbers_; ++i) answer_vocab_.push_back(number(i));
  for (std::size_t i = 0; i < positions_; ++i) answer_vocab_.push_back(position(i));
  answer_vocab_.push_back(word("yes"));
  answer_vocab_.push_back(word("no"));
}

const std::string& Vocabulary::name(TokenId id) const {
  if (id >= names_.size()) throw Error(ErrorCode::VocabOverflow, "token " + std::to_string(id));
  return names_[id];
}

TokenId Vocabulary::word(const std::string& w) const {
  for (std::size_t i = 0; i < kWords.size(); ++i)
    if (kWords[i] == w) return static_cast<TokenId>(3 + i);
  throw Error(ErrorCode::VocabOverflow, "unknown word " + w);
}

TokenSequence Instance::pair_text(std::size_t candidate) const {
  TokenSequence t = question;
  const auto& c = candidates.at(candidate);
  t.insert(t.end(), c.begin(), c.end());
  return t;
}

std::vector<std::string> categories(TaskKind kind) {
  switch (kind) {
    case TaskKind::Mcq: return kMcqCategories;
    case TaskKind::Entailment: return kEntailmentCategories;
    case TaskKind::OpenAnswer: return kOpenCategories;
  }
  return {};
}

std::vector<std::string> active_categories(const TaskSpec& spec) {
  if (spec.kind == TaskKind::Mcq && !spec.category_subset.empty()) {
    std::vector<std::string> out;
    for (const auto& c : kMcqCategories)
      if (std::find(spec.category_subset.begin(), spec.category_subset.end(), c) !=
          spec.category_subset.end())
        out.push_back(c);
    return out;
  }
  return categories(spec.kind);
}

TokenSequence describe(const ImageGrid& image, const Vocabulary& vocab) {
  TokenSequence out;
  out.reserve(image.cells.size() * 3);
  for (std::size_t i = 0; i < image.cells.size(); ++i) {
    out.push_back(vocab.object(image.cells[i].obj));
    out.push_back(vocab.attribute(image.cells[i].attr));
    out.push_back(vocab.position(i));
  }
  return out;
}

ImageGrid random_image(const TaskSpec& spec, Rng& rng) {
  ImageGrid g{spec.grid, std::vector<Cell>(spec.grid * spec.grid)};
  for (Cell& c : g.cells) {
    c.obj = static_cast<std::uint32_t>(uniform_index(rng, spec.objects));
    c.attr = static_cast<std::uint32_t>(uniform_index(rng, spec.attributes));
  }
  return g;
}

namespace {

// Grid queries shared by the generator and the description oracle.
struct GridView {
  const ImageGrid& g;

  std::size_t count_obj(std::uint32_t o) const {
    return static_cast<std::size_t>(
        std::count_if(g.cells.begin(), g.cells.end(), [&](const Cell& c) { return c.obj == o; }));
  }
  std::size_t count_attr(std::uint32_t a) const {
    return static_cast<std::size_t>(
        std::count_if(g.cells.begin(), g.cells.end(), [&](const Cell& c) { return c.attr == a; }));
  }
  std::optional<std::size_t> find_obj(std::uint32_t o) const {
    for (std::size_t i = 0; i < g.cells.size(); ++i)
      if (g.cells[i].obj == o) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> find_attr(std::uint32_t a) const {
    for (std::size_t i = 0; i < g.cells.size(); ++i)
      if (g.cells[i].attr == a) return i;
    return std::nullopt;
  }
  bool has_pair(std::uint32_t o, std::uint32_t a) const {
    return std::any_of(g.cells.begin(), g.cells.end(),
                       [&](const Cell& c) { return c.obj == o && c.attr == a; });
  }
};

struct QuestionDraft {
  TokenSequence body;
  TokenId answer = 0;
  std::vector<TokenId> distractors;
};

std::vector<TokenId> pick_distinct(Rng& rng, std::vector<TokenId> pool,
                                   const std::set<TokenId>& exclude, std::size_t k) {
  pool.erase(std::remove_if(pool.begin(), pool.end(),
                            [&](TokenId t) { return exclude.count(t) > 0; }),
             pool.end());
  if (pool.size() < k) return {};
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(k);
  return pool;
}

class Builder {
 public:
  Builder(const TaskSpec& spec, const Vocabulary& vocab) : spec_(spec), v_(vocab) {
    for (std::size_t i = 0; i < spec.objects; ++i) objects_.push_back(v_.object(i));
    for (std::size_t i = 0; i < spec.attributes; ++i) attrs_.push_back(v_.attribute(i));
    for (std::size_t i = 0; i < spec.grid * spec.grid; ++i) positions_.push_back(v_.position(i));
    for (std::size_t i = 0; i <= spec.grid * spec.grid; ++i) numbers_.push_back(v_.number(i));
  }

  ImageGrid random_image(Rng& rng) const { return data::random_image(spec_, rng); }

  // Returns nullopt when the image cannot support the category.
  std::optional<QuestionDraft> draft(const std::string& category, const ImageGrid& g,
                                     Rng& rng, std::size_t distractors) const {
    GridView view{g};
    const std::size_t P = spec_.grid;
    auto w = [&](const char* s) { return v_.word(s); };
    auto unique_objects = [&] {
      std::vector<std::size_t> cells;
      for (std::size_t i = 0; i < g.cells.size(); ++i)
        if (view.count_obj(g.cells[i].obj) == 1) cells.push_back(i);
      return cells;
    };
    QuestionDraft d;
    if (category == "attribute") {
      auto cells = unique_objects();
      if (cells.empty()) return std::nullopt;
      const Cell& c = g.cells[cells[uniform_index(rng, cells.size())]];
      d.body = {w("what"), w("color"), w("is"), v_.object(c.obj), w("?")};
      d.answer = v_.attribute(c.attr);
      d.distractors = pick_distinct(rng, attrs_, {d.answer}, distractors);
    } else if (category == "relation" || category == "relation_left" ||
               category == "relation_right") {
      const bool right = category == "relation_right";
      std::vector<std::size_t> cells;
      for (std::size_t i : unique_objects())
        if (right ? (i % P + 1 < P) : (i % P > 0)) cells.push_back(i);
      if (cells.empty()) return std::nullopt;
      const std::size_t i = cells[uniform_index(rng, cells.size())];
      const Cell& c = g.cells[i];
      d.body = {w("what"), w("is"), w(right ? "right" : "left"), w("of"), v_.object(c.obj), w("?")};
      d.answer = v_.object(g.cells[right ? i + 1 : i - 1].obj);
      d.distractors = pick_distinct(rng, objects_, {d.answer}, distractors);
    } else if (category == "counting") {
      const auto a = static_cast<std::uint32_t>(uniform_index(rng, spec_.attributes));
      d.body = {w("how"), w("many"), v_.attribute(a), w("?")};
      d.answer = v_.number(view.count_attr(a));
      d.distractors = pick_distinct(rng, numbers_, {d.answer}, distractors);
    } else if (category == "location") {
      auto cells = unique_objects();
      if (cells.empty()) return std::nullopt;
      const std::size_t i = cells[uniform_index(rng, cells.size())];
      d.body = {w("where"), w("is"), v_.object(g.cells[i].obj), w("?")};
      d.answer = v_.position(i);
      d.distractors = pick_distinct(rng, positions_, {d.answer}, distractors);
    } else if (category == "negation") {
      std::vector<TokenId> present, absent;
      for (TokenId o : objects_)
        (view.count_obj(static_cast<std::uint32_t>(v_.object_index(o))) ? present : absent)
            .push_back(o);
      if (present.size() < distractors || absent.empty()) return std::nullopt;
      d.body = {w("which"), w("is"), w("not"), w("in"), w("image"), w("?")};
      d.answer = absent[uniform_index(rng, absent.size())];
      std::set<TokenId> excl(absent.begin(), absent.end());
      d.distractors = pick_distinct(rng, objects_, excl, distractors);
    } else if (category == "comparison") {
      const auto a = static_cast<std::uint32_t>(uniform_index(rng, spec_.attributes));
      const auto b = static_cast<std::uint32_t>(uniform_index(rng, spec_.attributes));
      if (a == b || view.count_attr(a) == view.count_attr(b)) return std::nullopt;
      d.body = {w("more"), v_.attribute(a), w("or"), v_.attribute(b), w("?")};
      const bool a_wins = view.count_attr(a) > view.count_attr(b);
      d.answer = v_.attribute(a_wins ? a : b);
      const TokenId loser = v_.attribute(a_wins ? b : a);
      if (distractors == 0) return d;
      d.distractors = {loser};
      auto rest = pick_distinct(rng, attrs_, {d.answer, loser}, distractors - 1);
      if (rest.size() + 1 < distractors) return std::nullopt;
      d.distractors.insert(d.distractors.end(), rest.begin(), rest.end());
    } else if (category == "hypothetical" || category == "object_of_attribute") {
      std::vector<std::size_t> cells;
      for (std::size_t i = 0; i < g.cells.size(); ++i)
        if (view.count_attr(g.cells[i].attr) == 1) cells.push_back(i);
      if (cells.empty()) return std::nullopt;
      const Cell& c = g.cells[cells[uniform_index(rng, cells.size())]];
      d.body = {w("if"), w("one"), w("is"), v_.attribute(c.attr), w("which"), w("object"), w("?")};
      d.answer = v_.object(c.obj);
      d.distractors = pick_distinct(rng, objects_, {d.answer}, distractors);
    } else if (category == "exists") {
      const auto o = static_cast<std::uint32_t>(uniform_index(rng, spec_.objects));
      d.body = {w("is"), w("there"), v_.object(o), w("?")};
      d.answer = w(view.count_obj(o) ? "yes" : "no");
    } else {
      throw Error(ErrorCode::SpecInvalid, "unknown category " + category);
    }
    if (d.distractors.size() != distractors) return std::nullopt;
    return d;
  }

  // Hypothesis "X is A" with a label; label order entailment/neutral/contradiction.
  std::optional<std::pair<TokenSequence, std::size_t>> hypothesis(const ImageGrid& g,
                                                                  std::size_t label,
                                                                  Rng& rng) const {
    GridView view{g};
    const TokenId is = v_.word("is");
    if (label == 0) {
      const Cell& c = g.cells[uniform_index(rng, g.cells.size())];
      return std::make_pair(TokenSequence{v_.object(c.obj), is, v_.attribute(c.attr)}, label);
    }
    if (label == 1) {
      std::vector<std::uint32_t> absent;
      for (std::uint32_t o = 0; o < spec_.objects; ++o)
        if (!view.count_obj(o)) absent.push_back(o);
      if (absent.empty()) return std::nullopt;
      const auto o = absent[uniform_index(rng, absent.size())];
      const auto a = static_cast<std::uint32_t>(uniform_index(rng, spec_.attributes));
      return std::make_pair(TokenSequence{v_.object(o), is, v_.attribute(a)}, label);
    }
    const Cell& c = g.cells[uniform_index(rng, g.cells.size())];
    std::vector<std::uint32_t> wrong;
    for (std::uint32_t a = 0; a < spec_.attributes; ++a)
      if (!view.has_pair(c.obj, a)) wrong.push_back(a);
    if (wrong.empty()) return std::nullopt;
    const auto a = wrong[uniform_index(rng, wrong.size())];
    return std::make_pair(TokenSequence{v_.object(c.obj), is, v_.attribute(a)}, label);
  }

  TokenId random_marker(Rng& rng, std::optional<TokenId> avoid) const {
    while (true) {
      const TokenId m = v_.marker(uniform_index(rng, spec_.markers));
      if (!avoid || m != *avoid) return m;
    }
  }

 private:
  const TaskSpec& spec_;
  const Vocabulary& v_;
  std::vector<TokenId> objects_, attrs_, positions_, numbers_;
};

class Generator {
 public:
  Generator(const TaskSpec& spec, std::uint64_t seed)
      : spec_(spec), vocab_(spec), builder_(spec, vocab_), rng_(mix_seed(seed, "generate")) {}

  DatasetSplit make_split(SplitKind kind, std::size_t per_category) {
    DatasetSplit split;
    split.split = kind;
    split.task = spec_.kind;
    const auto cats = active_categories(spec_);
    if (spec_.kind == TaskKind::Mcq) {
      for (const auto& cat : cats)
        for (std::size_t k = 0; k < per_category; ++k) split.instances.push_back(mcq(cat));
    } else {
      const std::size_t total = per_category * cats.size();
      const std::size_t images = (total + spec_.pairs_per_image - 1) / spec_.pairs_per_image;
      for (std::size_t k = 0; k < images; ++k) paired_image(split);
    }
    return split;
  }

 private:
  ImageGrid fresh_image() {
    while (true) {
      ImageGrid g = builder_.random_image(rng_);
      if (used_images_.insert(image_key(g)).second) return g;
    }
  }

  Instance mcq(const std::string& category) {
    while (true) {
      ImageGrid g = builder_.random_image(rng_);
      if (used_images_.count(image_key(g))) continue;
      auto d = builder_.draft(category, g, rng_, kMcqDistractors);
      if (!d) continue;
      used_images_.insert(image_key(g));
      Instance inst;
      inst.id = next_id_++;
      inst.image = std::move(g);
      inst.category = category;
      const bool cued = std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < spec_.cue_rate;
      std::optional<TokenId> q_marker;
      if (cued) {
        q_marker = builder_.random_marker(rng_, std::nullopt);
        inst.question.push_back(*q_marker);
        inst.cue = q_marker;
      }
      inst.question.insert(inst.question.end(), d->body.begin(), d->body.end());
      const std::size_t n = d->distractors.size() + 1;
      inst.gold = uniform_index(rng_, n);
      std::size_t next = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const TokenId ans = c == inst.gold ? d->answer : d->distractors[next++];
        TokenId mark = (cued && c == inst.gold) ? *q_marker : builder_.random_marker(rng_, q_marker);
        inst.candidates.push_back({ans, mark});
      }
      return inst;
    }
  }

  void paired_image(DatasetSplit& split) {
    ImageGrid g = fresh_image();
    const auto cats = categories(spec_.kind);
    for (std::size_t p = 0; p < spec_.pairs_per_image; ++p) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const std::size_t c = uniform_index(rng_, cats.size());
        Instance inst;
        inst.image = g;
        if (spec_.kind == TaskKind::Entailment) {
          auto h = builder_.hypothesis(g, c, rng_);
          if (!h) continue;
          inst.question = h->first;
          inst.gold = h->second;
          inst.category = cats[c];
          for (const char* lbl : {"entail", "neutral", "contradict"})
            inst.candidates.push_back({vocab_.word(lbl)});
        } else {
          auto d = builder_.draft(cats[c], g, rng_, 0);
          if (!d) continue;
          inst.question = d->body;
          inst.category = cats[c];
          const auto& av = vocab_.answer_vocab();
          for (TokenId t : av) inst.candidates.push_back({t});
          inst.gold = static_cast<std::size_t>(std::find(av.begin(), av.end(), d->answer) - av.begin());
        }
        inst.id = next_id_++;
        split.instances.push_back(std::move(inst));
        break;
      }
    }
  }

  const TaskSpec& spec_;
  Vocabulary vocab_;
  Builder builder_;
  Rng rng_;
  std::unordered_set<std::uint64_t> used_images_;
  std::uint64_t next_id_ = 0;
};

}  // namespace

DatasetSplits generate_task(const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  Generator gen(spec, seed);
  DatasetSplits out;
  out.spec = spec;
  out.train = gen.make_split(SplitKind::Train, spec.train_per_category);
  out.val = gen.make_split(SplitKind::Val, spec.val_per_category);
  out.test = gen.make_split(SplitKind::Test, spec.test_per_category);
  return out;
}

std::optional<std::size_t> description_oracle(const TokenSequence& description,
                                              const Instance& instance, const Vocabulary& vocab,
                                              std::size_t grid) {
  ImageGrid g{grid, std::vector<Cell>(grid * grid)};
  for (std::size_t k = 0; k + 2 < description.size(); k += 3) {
    const std::size_t pos = vocab.position_index(description[k + 2]);
    g.cells.at(pos) = {static_cast<std::uint32_t>(vocab.object_index(description[k])),
                       static_cast<std::uint32_t>(vocab.attribute_index(description[k + 1]))};
  }
  GridView view{g};
  TokenSequence q = instance.question;
  if (!q.empty() && vocab.is_marker(q.front())) q.erase(q.begin());
  auto w = [&](const char* s) { return vocab.word(s); };
  auto obj = [&](TokenId t) { return static_cast<std::uint32_t>(vocab.object_index(t)); };
  auto attr = [&](TokenId t) { return static_cast<std::uint32_t>(vocab.attribute_index(t)); };
  auto starts = [&](std::initializer_list<TokenId> prefix) {
    return q.size() >= prefix.size() && std::equal(prefix.begin(), prefix.end(), q.begin());
  };
  auto pick = [&](TokenId answer) -> std::optional<std::size_t> {
    for (std::size_t c = 0; c < instance.candidates.size(); ++c)
      if (!instance.candidates[c].empty() && instance.candidates[c].front() == answer) return c;
    return std::nullopt;
  };

  if (q.size() == 3 && vocab.is_object(q[0]) && q[1] == w("is")) {
    const std::size_t label = view.has_pair(obj(q[0]), attr(q[2])) ? 0
                              : view.count_obj(obj(q[0]))          ? 2
                                                                   : 1;
    return label;
  }
  if (starts({w("what"), w("color"), w("is")})) {
    auto i = view.find_obj(obj(q[3]));
    return i ? pick(vocab.attribute(g.cells[*i].attr)) : std::nullopt;
  }
  if (starts({w("what"), w("is"), w("left"), w("of")}) ||
      starts({w("what"), w("is"), w("right"), w("of")})) {
    auto i = view.find_obj(obj(q[4]));
    if (!i) return std::nullopt;
    const std::size_t j = q[2] == w("left") ? *i - 1 : *i + 1;
    return pick(vocab.object(g.cells[j].obj));
  }
  if (starts({w("how"), w("many")})) return pick(vocab.number(view.count_attr(attr(q[2]))));
  if (starts({w("where"), w("is")})) {
    auto i = view.find_obj(obj(q[2]));
    return i ? pick(vocab.position(*i)) : std::nullopt;
  }
  if (starts({w("which"), w("is"), w("not")})) {
    for (std::size_t c = 0; c < instance.candidates.size(); ++c)
      if (!view.count_obj(obj(instance.candidates[c].front()))) return c;
    return std::nullopt;
  }
  if (starts({w("more")})) {
    const auto a = attr(q[1]), b = attr(q[3]);
    return pick(vocab.attribute(view.count_attr(a) > view.count_attr(b) ? a : b));
  }
  if (starts({w("if"), w("one"), w("is")})) {
    auto i = view.find_attr(attr(q[3]));
    return i ? pick(vocab.object(g.cells[*i].obj)) : std::nullopt;
  }
  if (starts({w("is"), w("there")})) return pick(w(view.count_obj(obj(q[2])) ? "yes" : "no"));
  return std::nullopt;
}

std::string content_hash(const DatasetSplit& split) { return sha256_hex(to_jsonl(split)); }

std::string sha256_hex(std::string_view text) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest.data());
  std::string hex;
  char buf[3];
  for (unsigned char b : digest) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    hex += buf;
  }
  return hex;
}

}  // namespace mad::data
