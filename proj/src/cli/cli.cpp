#include "mad/cli/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mad/analysis/analysis.hpp"
#include "mad/data/sampling.hpp"
#include "mad/error.hpp"
#include "mad/train/experiment.hpp"
#include "mad/train/grad_audit.hpp"
#include "mad/train/zero_shot.hpp"

namespace mad::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using train::RunConfig;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "mad-out";
  std::uint64_t seed = 0;
  std::string split, shots, teacher, ts, cw, af;
  double w = 0.05;
  std::size_t m = 2;
  std::vector<std::string> sets;

  // Verb-specific; recorded in the manifest so a replay sees the same values.
  std::string teacher_dir;
  std::string weights;
  std::string before, after;
  std::string ladder = "table2";
  std::size_t seeds = 5;
  std::string format = "csv";
  std::size_t instance = 0;
  bool all_queries = false;
  std::size_t instances = 50;
  bool all_teachers = false;
};

// Names and accessors of the recorded verb options.
struct Recorded {
  std::string name;
  CLI::Option* option = nullptr;
  std::function<json()> get;
  std::function<void(const json&)> put;
};

std::vector<Recorded> recorded_options(Options& o) {
  auto str = [](std::string& f) {
    return std::pair{std::function<json()>([&f] { return json(f); }),
                     std::function<void(const json&)>([&f](const json& j) { f = j.get<std::string>(); })};
  };
  auto num = [](std::size_t& f) {
    return std::pair{std::function<json()>([&f] { return json(f); }),
                     std::function<void(const json&)>([&f](const json& j) { f = j.get<std::size_t>(); })};
  };
  auto flag = [](bool& f) {
    return std::pair{std::function<json()>([&f] { return json(f); }),
                     std::function<void(const json&)>([&f](const json& j) { f = j.get<bool>(); })};
  };
  std::vector<Recorded> out;
  auto add = [&](const std::string& name, auto accessors) {
    out.push_back({name, nullptr, accessors.first, accessors.second});
  };
  add("teacher-dir", str(o.teacher_dir));
  add("weights", str(o.weights));
  add("before", str(o.before));
  add("after", str(o.after));
  add("ladder", str(o.ladder));
  add("seeds", num(o.seeds));
  add("format", str(o.format));
  add("instance", num(o.instance));
  add("all-queries", flag(o.all_queries));
  add("instances", num(o.instances));
  add("all", flag(o.all_teachers));
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

class Session {
 public:
  Session(std::string verb, Options& opts, std::vector<Recorded>& recorded, std::ostream& out)
      : verb_(std::move(verb)), opts_(opts), recorded_(recorded), out_(out) {}

  // Config precedence: defaults, then the config file (or a manifest's
  // config), then --set pairs, then dedicated flags.
  void resolve_config() {
    if (!opts_.config_path.empty()) {
      const std::string text = read_text(opts_.config_path);
      const auto first = text.find_first_not_of(" \t\r\n");
      if (first != std::string::npos && text[first] == '{') {
        json manifest;
        try {
          manifest = json::parse(text);
        } catch (const json::exception& e) {
          throw Error(ErrorCode::ParseError, opts_.config_path + ": " + e.what());
        }
        if (!manifest.contains("config"))
          throw Error(ErrorCode::ParseError, opts_.config_path + ": manifest has no config");
        config_ = train::parse_run_config(manifest["config"].get<std::string>());
        if (manifest.contains("options"))
          for (auto& r : recorded_)
            if (r.option && r.option->count() == 0 && manifest["options"].contains(r.name))
              r.put(manifest["options"][r.name]);
      } else {
        config_ = train::parse_run_config(text);
      }
    }
    for (const auto& kv : opts_.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Error(ErrorCode::Usage, "--set expects key=value, got '" + kv + "'");
      config_.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (given("--seed")) config_.set("seed", std::to_string(opts_.seed));
    if (!opts_.split.empty()) config_.set("split", opts_.split);
    if (!opts_.shots.empty()) config_.set("shots", opts_.shots);
    if (!opts_.teacher.empty()) config_.set("teacher", opts_.teacher);
    if (!opts_.ts.empty()) config_.set("distill.ts", opts_.ts);
    if (!opts_.cw.empty()) config_.set("distill.cw", opts_.cw);
    if (!opts_.af.empty()) config_.set("distill.af", opts_.af);
    if (given("--w")) config_.distill.w = opts_.w;
    if (given("--m")) config_.distill.m = opts_.m;
    config_.validate();
  }

  void set_flags(std::map<std::string, CLI::Option*> flags) { flags_ = std::move(flags); }

  const RunConfig& config() const { return config_; }
  const fs::path& dir() const { return dir_; }
  std::ostream& out() { return out_; }
  Options& opts() { return opts_; }

  void open_out_dir() {
    dir_ = opts_.out_dir;
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir_.string() + ": " + ec.message());
    write_manifest("running", "");
  }

  void set_data_hash(std::string hash) { data_hash_ = std::move(hash); }

  // Failures before the output directory was opened still leave a manifest.
  void write_manifest(const std::string& status, const std::string& message) {
    if (dir_.empty()) {
      dir_ = opts_.out_dir;
      fs::create_directories(dir_);
    }
    json j;
    j["tool"] = "mad";
    j["verb"] = verb_;
    j["config"] = config_.to_text();
    j["config_hash"] = config_.hash();
    j["seeds"] = {{"data", config_.data_seed}, {"teacher", config_.teacher_seed}, {"train", config_.train.seed}};
    j["data_hash"] = data_hash_;
    json options = json::object();
    for (const auto& r : recorded_) options[r.name] = r.get();
    j["options"] = options;
    j["status"] = status;
    if (!message.empty()) j["error"] = message;
    write_text(dir_ / "manifest.json", dump(j));
  }

  train::RunData data() {
    auto d = train::prepare_data(config_);
    set_data_hash(d.hash);
    return d;
  }

  // Teachers come from --teacher-dir when given, otherwise they are trained
  // deterministically from the config.
  train::TeacherSet teachers(bool alternatives) {
    train::TeacherSet set;
    if (!opts_.teacher_dir.empty()) {
      const fs::path root = opts_.teacher_dir;
      set.paired = models::load_teacher(config_.task, root / "paired");
      if (alternatives) {
        auto alt = models::load_teacher(config_.task, root / "alternatives");
        set.alt_text = alt.text;
        set.alt_vision = alt.vision;
      }
      return set;
    }
    return train::build_teachers(config_, alternatives);
  }

 private:
  bool given(const std::string& flag) const {
    const auto it = flags_.find(flag);
    return it != flags_.end() && it->second->count() > 0;
  }

  std::string verb_;
  Options& opts_;
  std::vector<Recorded>& recorded_;
  std::ostream& out_;
  RunConfig config_;
  fs::path dir_;
  std::string data_hash_;
  std::map<std::string, CLI::Option*> flags_;
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// Mean and per-category mean over a set of runs.
json mean_metrics(const std::vector<train::Metrics>& runs) {
  json j;
  double acc = 0.0;
  std::map<std::string, double> cats;
  for (const auto& m : runs) {
    acc += m.accuracy;
    for (const auto& [k, v] : m.per_category) cats[k] += v;
  }
  const double n = static_cast<double>(runs.size());
  j["accuracy"] = acc / n;
  j["per_category"] = json::object();
  for (const auto& [k, v] : cats) j["per_category"][k] = v / n;
  return j;
}

void write_run(const fs::path& dir, const train::RunRecord& rec) {
  fs::create_directories(dir);
  train::write_metrics_csv(rec, dir / "metrics.csv");
  write_text(dir / "summary.json", train::summary_json(rec));
}

int cmd_gen_data(Session& s) {
  const auto d = s.data();
  const auto& dir = s.dir();
  data::write_jsonl(d.splits.train, dir / "train.jsonl");
  data::write_jsonl(d.splits.val, dir / "val.jsonl");
  data::write_jsonl(d.splits.test, dir / "test.jsonl");
  json j;
  j["kind"] = data::to_string(s.config().task.kind);
  j["train"] = d.splits.train.size();
  j["val"] = d.splits.val.size();
  j["test"] = d.splits.test.size();
  if (s.config().shots != train::ShotSetting::Zero) {
    const std::string name = "train_" + train::to_string(s.config().shots) + ".jsonl";
    data::write_jsonl(d.train, dir / name);
    j["low_shot"] = d.train.size();
  }
  if (s.config().task.kind == data::TaskKind::Mcq) {
    const auto sm = data::mitigate_shortcuts(d.splits.val, data::Vocabulary(s.config().task));
    data::write_jsonl(sm.split, dir / "val_sm.jsonl");
    j["val_sm_without_cue"] = sm.without_cue;
  }
  j["data_hash"] = d.hash;
  write_text(dir / "data.json", dump(j));
  s.out() << "wrote " << d.splits.train.size() << "/" << d.splits.val.size() << "/" << d.splits.test.size()
          << " instances to " << dir.string() << "\n";
  return 0;
}

int cmd_make_teacher(Session& s) {
  const auto& cfg = s.config();
  const bool alternatives = s.opts().all_teachers || cfg.teacher != train::TeacherChoice::Paired;
  const auto tc = train::teacher_train_config(cfg);
  json j;
  models::TeacherReport report;
  auto paired = models::make_toy_teacher(cfg.task, cfg.teacher_seed, tc, &report);
  models::save_teacher(paired, s.dir() / "teacher" / "paired");
  j["paired"] = {{"heldout_accuracy", report.heldout_accuracy}, {"final_loss", report.final_loss},
                 {"steps", report.steps}};
  s.out() << "paired teacher: held-out matching " << fixed(report.heldout_accuracy) << "\n";
  if (alternatives) {
    models::TeacherReport rt, rv;
    auto text = models::make_alt_text_teacher(cfg.task, cfg.teacher_seed, tc, &rt);
    auto vision = models::make_alt_vision_teacher(cfg.task, cfg.teacher_seed, tc, &rv);
    models::TeacherPair alt{vision, text, paired.temperature};
    models::save_teacher(alt, s.dir() / "teacher" / "alternatives");
    j["alt_text"] = {{"heldout_accuracy", rt.heldout_accuracy}, {"final_loss", rt.final_loss}, {"steps", rt.steps}};
    j["alt_vision"] = {{"heldout_accuracy", rv.heldout_accuracy}, {"final_loss", rv.final_loss}, {"steps", rv.steps}};
    s.out() << "alternative text teacher: " << fixed(rt.heldout_accuracy) << ", alternative vision teacher: "
            << fixed(rv.heldout_accuracy) << "\n";
  }
  write_text(s.dir() / "teacher.json", dump(j));
  return 0;
}

int cmd_train(Session& s) {
  const auto& cfg = s.config();
  const auto d = s.data();
  train::TeacherSet set;
  models::TeacherPair pair;
  const bool needs = train::uses_teacher(cfg.distill);
  if (needs) {
    set = s.teachers(cfg.teacher != train::TeacherChoice::Paired);
    pair = set.pick(cfg.teacher);
  }
  std::unique_ptr<models::Student> student;
  const auto rec = train::run_experiment(cfg, d, needs ? &pair : nullptr, &student);
  write_run(s.dir(), rec);
  models::save_student(*student, s.dir() / "student.madw");
  s.out() << "accuracy " << fixed(rec.metrics.accuracy) << " on " << train::to_string(cfg.split) << " val ("
          << d.eval.size() << " instances)\n";
  return 0;
}

std::unique_ptr<models::Student> load_student(const RunConfig& cfg, const std::string& path) {
  models::StudentConfig sc = cfg.student;
  sc.teacher_dim = cfg.tower.out_dim;
  return models::load_student(cfg.task, sc, path);
}

int cmd_eval(Session& s) {
  if (s.opts().weights.empty()) throw Error(ErrorCode::Usage, "eval needs --weights");
  const auto& cfg = s.config();
  const auto d = s.data();
  auto student = load_student(cfg, s.opts().weights);
  train::RunRecord rec;
  rec.metrics = train::evaluate(*student, d.eval);
  rec.metrics.seed = cfg.train.seed;
  rec.config_hash = cfg.hash();
  write_text(s.dir() / "summary.json", train::summary_json(rec));
  s.out() << "accuracy " << fixed(rec.metrics.accuracy) << " on " << train::to_string(cfg.split) << " val\n";
  return 0;
}

int cmd_zero_shot(Session& s) {
  const auto& cfg = s.config();
  const auto d = s.data();
  auto set = s.teachers(false);
  json j;
  j["kind"] = data::to_string(cfg.task.kind);
  j["instances"] = d.eval.size();
  switch (cfg.task.kind) {
    case data::TaskKind::Mcq:
      for (auto mode : {train::MatchMode::IA, train::MatchMode::IQA}) {
        const auto m = train::zero_shot_match(set.paired, d.eval, mode);
        j[train::to_string(mode)] = {{"accuracy", m.accuracy}, {"per_category", m.per_category}};
        s.out() << train::to_string(mode) << " accuracy " << fixed(m.accuracy) << "\n";
      }
      break;
    case data::TaskKind::Entailment: {
      const auto sims = train::hypothesis_similarities(set.paired, d.eval);
      const auto labels = train::zero_shot_entailment_kmeans(sims);
      std::size_t hit = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == d.eval.instances[i].gold;
      const double acc = static_cast<double>(hit) / static_cast<double>(labels.size());
      j["kmeans_accuracy"] = acc;
      s.out() << "k-means accuracy " << fixed(acc) << "\n";
      break;
    }
    case data::TaskKind::OpenAnswer: {
      train::AnswerFilter filter(*set.paired.text, data::Vocabulary(cfg.task).answer_vocab());
      for (std::size_t k : {1, 3, 10}) {
        const double r = train::recall_at_k(filter, d.eval, std::min(k, filter.size()));
        j["recall_at_" + std::to_string(k)] = r;
        s.out() << "recall@" << k << " " << fixed(r) << "\n";
      }
      break;
    }
  }
  write_text(s.dir() / "zero_shot.json", dump(j));
  return 0;
}

struct Rung {
  std::string name;
  bool vision, text, ts, cw, af;
};

const std::vector<Rung>& table2_ladder() {
  static const std::vector<Rung> rungs = {
      {"baseline", false, false, false, false, false}, {"v-only", true, false, false, false, false},
      {"md", true, true, false, false, false},         {"ts", true, true, true, false, false},
      {"cw", true, true, true, true, false},           {"mad", true, true, true, true, true},
  };
  return rungs;
}

int cmd_ablate(Session& s) {
  if (s.opts().ladder != "table2") throw Error(ErrorCode::Usage, "unknown ladder '" + s.opts().ladder + "'");
  if (s.opts().seeds == 0) throw Error(ErrorCode::Usage, "--seeds must be at least 1");
  const RunConfig& base = s.config();
  auto set = s.teachers(base.teacher != train::TeacherChoice::Paired);
  auto pair = set.pick(base.teacher);
  s.set_data_hash(train::prepare_data(base).hash);
  const data::Vocabulary vocab(base.task);

  json ladder = json::array();
  for (const auto& rung : table2_ladder()) {
    std::vector<train::Metrics> standard, shortcut;
    json per_seed = json::array();
    RunConfig cfg = base;
    cfg.distill.distill_vision = rung.vision;
    cfg.distill.distill_text = rung.text;
    cfg.distill.enable_ts = rung.ts;
    cfg.distill.enable_cw = rung.cw;
    cfg.distill.enable_af = rung.af;
    for (std::size_t k = 0; k < s.opts().seeds; ++k) {
      cfg.train.seed = base.train.seed + k;
      const auto d = train::prepare_data(cfg);
      std::unique_ptr<models::Student> student;
      const auto rec = train::run_experiment(cfg, d, train::uses_teacher(cfg.distill) ? &pair : nullptr, &student);
      write_run(s.dir() / rung.name / ("seed_" + std::to_string(cfg.train.seed)), rec);
      standard.push_back(rec.metrics);
      json entry = {{"seed", cfg.train.seed}, {"accuracy", rec.metrics.accuracy}};
      if (base.task.kind == data::TaskKind::Mcq) {
        shortcut.push_back(train::evaluate(*student, data::mitigate_shortcuts(d.splits.val, vocab).split));
        entry["sm_accuracy"] = shortcut.back().accuracy;
      }
      per_seed.push_back(entry);
    }
    cfg.train.seed = base.train.seed;
    json j = mean_metrics(standard);
    j["rung"] = rung.name;
    j["config_hash"] = cfg.hash();
    if (!shortcut.empty()) j["sm_accuracy"] = mean_metrics(shortcut)["accuracy"];
    j["runs"] = per_seed;
    write_text(s.dir() / (rung.name + ".json"), dump(j));
    s.out() << rung.name << " mean accuracy " << fixed(j["accuracy"].get<double>());
    if (!shortcut.empty()) s.out() << ", SM " << fixed(j["sm_accuracy"].get<double>());
    s.out() << "\n";
    ladder.push_back({{"rung", rung.name}, {"accuracy", j["accuracy"]}});
  }
  write_text(s.dir() / "ladder.json", dump(ladder));
  return 0;
}

int cmd_analyze(Session& s) {
  const auto& cfg = s.config();
  const auto format = analysis::parse_format(s.opts().format);
  const auto d = s.data();
  if (d.eval.size() == 0) throw Error(ErrorCode::SpecInvalid, "empty evaluation split");
  if (s.opts().instance >= d.eval.size())
    throw Error(ErrorCode::Usage, "--instance out of range (eval split has " + std::to_string(d.eval.size()) + ")");
  auto set = s.teachers(cfg.teacher != train::TeacherChoice::Paired);
  auto pair = set.pick(cfg.teacher);

  auto obtain = [&](const std::string& weights, bool distilled) {
    if (!weights.empty()) return load_student(cfg, weights);
    RunConfig c = cfg;
    if (!distilled) {
      c.distill.distill_vision = c.distill.distill_text = false;
      c.distill.enable_ts = c.distill.enable_cw = c.distill.enable_af = false;
    }
    std::unique_ptr<models::Student> student;
    train::run_experiment(c, d, train::uses_teacher(c.distill) ? &pair : nullptr, &student);
    return student;
  };
  auto before = obtain(s.opts().before, false);
  auto after = obtain(s.opts().after, true);

  const analysis::MIOptions mi_opts{s.opts().all_queries};
  const auto mi_before = analysis::modality_importance(*before, d.eval, mi_opts);
  const auto mi_after = analysis::modality_importance(*after, d.eval, mi_opts);
  const auto gap = analysis::mi_gap_report(mi_before, mi_after);

  const auto& inst = d.eval.instances[s.opts().instance];
  const auto tout = models::teacher_encode(pair, inst);
  const analysis::SelectionContext ctx{&tout, &d.stats, cfg.distill.m};
  const auto attn_before = analysis::attention_dump(*before, inst, inst.gold, "before", ctx);
  const auto attn_after = analysis::attention_dump(*after, inst, inst.gold, "after", ctx);

  const std::string ext = format == analysis::ExportFormat::Csv ? ".csv" : ".json";
  analysis::export_report(mi_before, s.dir() / ("mi_before" + ext), format);
  analysis::export_report(mi_after, s.dir() / ("mi_after" + ext), format);
  analysis::export_report(gap, s.dir() / ("gap" + ext), format);
  analysis::export_report(attn_before, s.dir() / ("attn_before" + ext), format);
  analysis::export_report(attn_after, s.dir() / ("attn_after" + ext), format);
  for (const auto& row : gap)
    s.out() << "layer " << row.layer << " gap before " << fixed(row.gap_before) << " after "
            << fixed(row.gap_after) << "\n";
  return 0;
}

int cmd_grad_check(Session& s) {
  const auto audit = train::gradient_audit(s.opts().instances, s.config().train.seed);
  json j;
  j["instances"] = audit.instances;
  j["tolerance"] = 1e-4;
  for (const auto& t : audit.terms) {
    j["max_relative_error"][t.term] = t.max_error;
    std::ostringstream e;
    e.precision(3);
    e << std::scientific << t.max_error;
    s.out() << t.term << " max relative error " << e.str() << (t.max_error < 1e-4 ? "" : "  FAIL") << "\n";
  }
  j["passed"] = audit.passed();
  write_text(s.dir() / "grad_check.json", dump(j));
  return audit.passed() ? 0 : 2;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options opts;
  auto recorded = recorded_options(opts);
  CLI::App app{"Distill frozen unimodal teachers into a cross-modal student on synthetic vision-language tasks", "mad"};
  app.require_subcommand(1);

  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(Session&);
  };
  const Verb verbs[] = {
      {"gen-data", "Generate the synthetic splits as JSONL", cmd_gen_data},
      {"make-teacher", "Train and save the frozen teachers", cmd_make_teacher},
      {"train", "Train one student and evaluate it", cmd_train},
      {"eval", "Evaluate saved student weights", cmd_eval},
      {"zero-shot", "Evaluate the teacher without training", cmd_zero_shot},
      {"ablate", "Run the distillation ablation ladder over several seeds", cmd_ablate},
      {"analyze", "Export modality importance and attention records", cmd_analyze},
      {"grad-check", "Finite-difference check of every loss term", cmd_grad_check},
  };
  std::map<std::string, std::map<std::string, CLI::Option*>> flags;
  const auto on_off = CLI::IsMember({"on", "off"});
  for (const auto& v : verbs) {
    auto* sub = app.add_subcommand(v.name, v.help);
    auto& f = flags[v.name];
    sub->add_option("--config", opts.config_path, "Config file (key=value) or a run manifest to replay");
    sub->add_option("--out-dir", opts.out_dir, "Output directory")->capture_default_str();
    f["--seed"] = sub->add_option("--seed", opts.seed, "Training seed");
    sub->add_option("--split", opts.split, "Evaluation split")->check(CLI::IsMember({"standard", "sm"}));
    sub->add_option("--shots", opts.shots, "Training shots")->check(CLI::IsMember({"0", "100", "1000", "full"}));
    sub->add_option("--teacher", opts.teacher, "Teacher combination")
        ->check(CLI::IsMember({"paired", "mixed-text", "mixed-vision"}));
    sub->add_option("--ts", opts.ts, "Token selection on|off")->check(on_off);
    sub->add_option("--cw", opts.cw, "Confidence weighting on|off")->check(on_off);
    sub->add_option("--af", opts.af, "Adaptive finetuning on|off")->check(on_off);
    f["--w"] = sub->add_option("--w", opts.w, "Distillation weight (default 0.05)");
    f["--m"] = sub->add_option("--m", opts.m, "Selected tokens per pairing (default 2)");
    sub->add_option("--set", opts.sets, "Override any config key: key=value (repeatable)");
    sub->add_option("--teacher-dir", opts.teacher_dir, "Load teachers saved by make-teacher");
  }
  auto* sub = app.get_subcommand("eval");
  sub->add_option("--weights", opts.weights, "Student weights file");
  sub = app.get_subcommand("ablate");
  sub->add_option("--ladder", opts.ladder, "Ladder name (table2)")->capture_default_str();
  sub->add_option("--seeds", opts.seeds, "Number of seeds")->capture_default_str();
  sub = app.get_subcommand("analyze");
  sub->add_option("--before", opts.before, "Weights of the reference student (default: train without distillation)");
  sub->add_option("--after", opts.after, "Weights of the distilled student (default: train with the config)");
  sub->add_option("--format", opts.format, "Export format: csv or json")->capture_default_str();
  sub->add_option("--instance", opts.instance, "Evaluation instance for the attention records");
  sub->add_flag("--all-queries", opts.all_queries, "Average attention over every query row");
  app.get_subcommand("grad-check")->add_option("--instances", opts.instances, "Instances to check")->capture_default_str();
  app.get_subcommand("make-teacher")->add_flag("--all", opts.all_teachers, "Also train the alternative teachers");

  std::vector<const char*> argv = {"mad"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return 0;
    }
    err << "mad: " << e.what() << "\n" << app.help();
    return 1;
  }

  const Verb* chosen = nullptr;
  for (const auto& v : verbs)
    if (app.got_subcommand(v.name)) chosen = &v;
  auto* sc = app.get_subcommand(chosen->name);
  for (auto& r : recorded) r.option = sc->get_option_no_throw("--" + r.name);

  Session session(chosen->name, opts, recorded, out);
  session.set_flags(flags[chosen->name]);
  try {
    session.resolve_config();
    session.open_out_dir();
    const int code = chosen->fn(session);
    session.write_manifest(code == 0 ? "ok" : "failed", "");
    return code;
  } catch (const Error& e) {
    err << "mad: " << e.what() << "\n";
    try {
      session.write_manifest("error", e.what());
    } catch (const std::exception&) {
    }
    return e.code() == ErrorCode::Usage ? 1 : 2;
  } catch (const std::exception& e) {
    err << "mad: " << e.what() << "\n";
    try {
      session.write_manifest("error", e.what());
    } catch (const std::exception&) {
    }
    return 2;
  }
}

}  // namespace mad::cli
