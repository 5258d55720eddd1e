#include "mad/train/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mad/error.hpp"

namespace mad::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::SpecInvalid, "lr must be positive");
  if (epochs == 0 || batch == 0 || grad_accum == 0)
    throw Error(ErrorCode::SpecInvalid, "epochs, batch and grad_accum must be positive");
  if (weight_decay < 0.0) throw Error(ErrorCode::SpecInvalid, "weight_decay must be >= 0");
  if (warmup < 0.0 || warmup >= 1.0) throw Error(ErrorCode::SpecInvalid, "warmup must be in [0,1)");
}

std::string to_string(ShotSetting s) {
  switch (s) {
    case ShotSetting::Zero: return "0";
    case ShotSetting::Hundred: return "100";
    case ShotSetting::Thousand: return "1000";
    case ShotSetting::Full: return "full";
  }
  return "?";
}

std::string to_string(EvalSplit s) { return s == EvalSplit::Standard ? "standard" : "sm"; }

std::string to_string(TeacherChoice t) {
  switch (t) {
    case TeacherChoice::Paired: return "paired";
    case TeacherChoice::MixedText: return "mixed-text";
    case TeacherChoice::MixedVision: return "mixed-vision";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::ParseError, "bad value '" + value + "' for " + key);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  bad_value(key, v);
}

std::string on_off(bool b) { return b ? "on" : "off"; }

data::TaskKind to_task_kind(const std::string& key, const std::string& v) {
  for (auto k : {data::TaskKind::Mcq, data::TaskKind::Entailment, data::TaskKind::OpenAnswer})
    if (data::to_string(k) == v) return k;
  bad_value(key, v);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "task.kind") task.kind = to_task_kind(key, v);
  else if (key == "task.grid") task.grid = to_size(key, v);
  else if (key == "task.objects") task.objects = to_size(key, v);
  else if (key == "task.attributes") task.attributes = to_size(key, v);
  else if (key == "task.markers") task.markers = to_size(key, v);
  else if (key == "task.cue_rate") task.cue_rate = to_double(key, v);
  else if (key == "task.train_per_category") task.train_per_category = to_size(key, v);
  else if (key == "task.val_per_category") task.val_per_category = to_size(key, v);
  else if (key == "task.test_per_category") task.test_per_category = to_size(key, v);
  else if (key == "task.pairs_per_image") task.pairs_per_image = to_size(key, v);
  else if (key == "task.categories") {
    task.category_subset.clear();
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ','))
      if (!trim(item).empty()) task.category_subset.push_back(trim(item));
  } else if (key == "data_seed") data_seed = to_u64(key, v);
  else if (key == "teacher_seed") teacher_seed = to_u64(key, v);
  else if (key == "seed") train.seed = to_u64(key, v);
  else if (key == "shots") {
    if (v == "0") shots = ShotSetting::Zero;
    else if (v == "100") shots = ShotSetting::Hundred;
    else if (v == "1000") shots = ShotSetting::Thousand;
    else if (v == "full") shots = ShotSetting::Full;
    else bad_value(key, v);
  } else if (key == "split") {
    if (v == "standard") split = EvalSplit::Standard;
    else if (v == "sm") split = EvalSplit::ShortcutMitigated;
    else bad_value(key, v);
  } else if (key == "teacher") {
    if (v == "paired") teacher = TeacherChoice::Paired;
    else if (v == "mixed-text") teacher = TeacherChoice::MixedText;
    else if (v == "mixed-vision") teacher = TeacherChoice::MixedVision;
    else bad_value(key, v);
  } else if (key == "student.dim") student.body.dim = to_size(key, v);
  else if (key == "student.layers") student.body.layers = to_size(key, v);
  else if (key == "student.heads") student.body.heads = to_size(key, v);
  else if (key == "student.mlp_ratio") student.body.mlp_ratio = to_size(key, v);
  else if (key == "student.max_text") student.max_text = to_size(key, v);
  else if (key == "teacher.dim") tower.body.dim = to_size(key, v);
  else if (key == "teacher.layers") tower.body.layers = to_size(key, v);
  else if (key == "teacher.heads") tower.body.heads = to_size(key, v);
  else if (key == "teacher.mlp_ratio") tower.body.mlp_ratio = to_size(key, v);
  else if (key == "teacher.out_dim") tower.out_dim = to_size(key, v);
  else if (key == "teacher.steps") teacher_steps = to_size(key, v);
  else if (key == "distill.w") distill.w = to_double(key, v);
  else if (key == "distill.m") distill.m = to_size(key, v);
  else if (key == "distill.ts") distill.enable_ts = to_bool(key, v);
  else if (key == "distill.cw") distill.enable_cw = to_bool(key, v);
  else if (key == "distill.af") distill.enable_af = to_bool(key, v);
  else if (key == "distill.vision") distill.distill_vision = to_bool(key, v);
  else if (key == "distill.text") distill.distill_text = to_bool(key, v);
  else if (key == "train.optimizer") {
    if (v == "adam") train.optimizer = OptimizerKind::Adam;
    else if (v == "sgd") train.optimizer = OptimizerKind::Sgd;
    else bad_value(key, v);
  } else if (key == "train.lr") train.lr = to_double(key, v);
  else if (key == "train.weight_decay") train.weight_decay = to_double(key, v);
  else if (key == "train.epochs") train.epochs = to_size(key, v);
  else if (key == "train.af_epochs") train.af_epochs = to_size(key, v);
  else if (key == "train.batch") train.batch = to_size(key, v);
  else if (key == "train.grad_accum") train.grad_accum = to_size(key, v);
  else if (key == "train.warmup") train.warmup = to_double(key, v);
  else if (key == "train.af_full_split") train.af_full_split = to_bool(key, v);
  else throw Error(ErrorCode::ParseError, "unknown config key '" + key + "'");
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  auto kv = [&](const std::string& k, const std::string& v) { o << k << '=' << v << '\n'; };
  kv("task.kind", data::to_string(task.kind));
  kv("task.grid", std::to_string(task.grid));
  kv("task.objects", std::to_string(task.objects));
  kv("task.attributes", std::to_string(task.attributes));
  kv("task.markers", std::to_string(task.markers));
  kv("task.cue_rate", number(task.cue_rate));
  kv("task.train_per_category", std::to_string(task.train_per_category));
  kv("task.val_per_category", std::to_string(task.val_per_category));
  kv("task.test_per_category", std::to_string(task.test_per_category));
  kv("task.pairs_per_image", std::to_string(task.pairs_per_image));
  std::string cats;
  for (const auto& c : task.category_subset) cats += (cats.empty() ? "" : ",") + c;
  kv("task.categories", cats);
  kv("data_seed", std::to_string(data_seed));
  kv("teacher_seed", std::to_string(teacher_seed));
  kv("seed", std::to_string(train.seed));
  kv("shots", to_string(shots));
  kv("split", to_string(split));
  kv("teacher", to_string(teacher));
  kv("student.dim", std::to_string(student.body.dim));
  kv("student.layers", std::to_string(student.body.layers));
  kv("student.heads", std::to_string(student.body.heads));
  kv("student.mlp_ratio", std::to_string(student.body.mlp_ratio));
  kv("student.max_text", std::to_string(student.max_text));
  kv("teacher.dim", std::to_string(tower.body.dim));
  kv("teacher.layers", std::to_string(tower.body.layers));
  kv("teacher.heads", std::to_string(tower.body.heads));
  kv("teacher.mlp_ratio", std::to_string(tower.body.mlp_ratio));
  kv("teacher.out_dim", std::to_string(tower.out_dim));
  kv("teacher.steps", std::to_string(teacher_steps));
  kv("distill.w", number(distill.w));
  kv("distill.m", std::to_string(distill.m));
  kv("distill.ts", on_off(distill.enable_ts));
  kv("distill.cw", on_off(distill.enable_cw));
  kv("distill.af", on_off(distill.enable_af));
  kv("distill.vision", on_off(distill.distill_vision));
  kv("distill.text", on_off(distill.distill_text));
  kv("train.optimizer", train.optimizer == OptimizerKind::Adam ? "adam" : "sgd");
  kv("train.lr", number(train.lr));
  kv("train.weight_decay", number(train.weight_decay));
  kv("train.epochs", std::to_string(train.epochs));
  kv("train.af_epochs", std::to_string(train.af_epochs));
  kv("train.batch", std::to_string(train.batch));
  kv("train.grad_accum", std::to_string(train.grad_accum));
  kv("train.warmup", number(train.warmup));
  kv("train.af_full_split", on_off(train.af_full_split));
  return o.str();
}

std::string RunConfig::hash() const { return data::sha256_hex(to_text()); }

void RunConfig::validate() const {
  data::validate(task);
  train.validate();
  distill.validate(student.max_text);
  if (student.body.dim % student.body.heads != 0 || tower.body.dim % tower.body.heads != 0)
    throw Error(ErrorCode::SpecInvalid, "model width must divide by the head count");
  if (teacher_steps == 0) throw Error(ErrorCode::SpecInvalid, "teacher.steps must be positive");
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw Error(ErrorCode::ParseError, "line " + std::to_string(n) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  for (const auto& [k, v] : parse_key_values(text)) c.set(k, v);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

}  // namespace mad::train
