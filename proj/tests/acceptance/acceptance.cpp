// Runs the eleven acceptance criteria and prints one PASS/FAIL line each.
// Exit status is 0 only when every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "mad/analysis/analysis.hpp"
#include "mad/cli/cli.hpp"
#include "mad/data/sampling.hpp"
#include "mad/error.hpp"
#include "mad/train/experiment.hpp"
#include "mad/train/grad_audit.hpp"
#include "mad/train/zero_shot.hpp"

using namespace mad;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void run_criterion(int id, const std::string& name, const std::function<Outcome()>& fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("threw ") + e.what()});
  }
}

train::RunConfig acceptance_config() {
  return train::load_run_config(fs::path(MAD_CONFIG_DIR) / "acceptance.cfg");
}

// ---- 1 ----------------------------------------------------------------------
Outcome gradient_exactness() {
  const auto t0 = Clock::now();
  const auto audit = train::gradient_audit(50, 0);
  const double secs = seconds_since(t0);
  std::string detail;
  for (const auto& t : audit.terms) detail += fmt("%s %.1e, ", t.term.c_str(), t.max_error);
  detail += fmt("%zu instances in %.1fs", audit.instances, secs);
  return {audit.passed(1e-4) && audit.instances == 50 && secs < 60.0, detail};
}

// ---- 2 ----------------------------------------------------------------------
Outcome baseline_recovery(const train::RunConfig& base, train::TeacherSet& teachers) {
  train::RunConfig cfg = base;
  cfg.train.epochs = 2;
  cfg.train.af_epochs = 1;
  cfg.train.seed = 7;
  auto run = [&](bool distill, bool af, double w) {
    train::RunConfig c = cfg;
    c.distill.distill_vision = c.distill.distill_text = c.distill.enable_ts = c.distill.enable_cw = distill;
    c.distill.enable_af = af;
    c.distill.w = w;
    const auto d = train::prepare_data(c);
    std::unique_ptr<models::Student> student;
    auto rec = train::run_experiment(c, d, &teachers.paired, &student);
    return std::pair{std::move(rec), std::move(student)};
  };
  std::string detail;
  bool ok = true;
  for (bool af : {false, true}) {
    auto [plain, s_plain] = run(false, af, 0.05);
    auto [zero, s_zero] = run(true, af, 0.0);
    bool same = plain.log.size() == zero.log.size() && plain.metrics.loss_curve == zero.metrics.loss_curve &&
                s_plain->params().same_values(s_zero->params()) &&
                plain.metrics.predictions == zero.metrics.predictions;
    for (std::size_t i = 0; same && i < plain.log.size(); ++i)
      same = plain.log[i].loss.L_final == zero.log[i].loss.L_final;
    ok = ok && same;
    detail += fmt("AF %s: %zu steps %s; ", af ? "on" : "off", plain.log.size(), same ? "bitwise equal" : "DIFFER");
  }
  return {ok, detail + "weights, per-step losses and predictions compared"};
}

// ---- 3 ----------------------------------------------------------------------
double oracle_max_prob(const std::vector<double>& logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  long double z = 0.0L;
  for (double x : logits) z += std::exp(static_cast<long double>(x - top));
  return static_cast<double>(1.0L / z);
}

Outcome gate_oracle() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  const double w_prime = distill::adaptive_weight(0.05, 2);
  std::size_t agree = 0, total = 0, opened = 0;
  bool dichotomy = true;
  auto check = [&](const std::vector<double>& t, const std::vector<double>& s, int expect) {
    const double got = distill::confidence_gate(t, s, w_prime);
    dichotomy = dichotomy && (got == 0.0 || got == w_prime);
    int want = expect;
    if (want < 0) want = oracle_max_prob(t) / oracle_max_prob(s) > 1.0 ? 1 : 0;
    agree += (got == w_prime) == (want == 1);
    opened += got == w_prime;
    ++total;
  };
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> t(4), s(4);
    for (double& x : t) x = u(rng);
    for (double& x : s) x = u(rng);
    check(t, s, -1);
  }
  // Exact r = 1: identical vectors and constant vectors (max prob exactly 1/4).
  std::size_t boundary = 0;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> t(4);
    for (double& x : t) x = u(rng);
    check(t, t, 0);
    const double a = u(rng), b = u(rng);
    check({a, a, a, a}, {b, b, b, b}, 0);
    boundary += 2;
  }
  return {agree == total && dichotomy,
          fmt("%zu/%zu agree (%zu random, %zu exact r=1), gate open on %zu, values in {0, w'}: %s", agree, total,
              total - boundary, boundary, opened, dichotomy ? "yes" : "no")};
}

// ---- 4 ----------------------------------------------------------------------
Outcome selection_oracle() {
  std::mt19937_64 rng(13);
  std::size_t agree = 0, ties_ok = 0, tie_cases = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 19;
    const std::size_t m = 1 + rng() % std::min<std::size_t>(n, 5);
    std::vector<double> s(n);
    // A third of the vectors draw from four values so ties are frequent.
    for (double& x : s) x = i % 3 == 0 ? static_cast<double>(rng() % 4) : std::uniform_real_distribution<double>()(rng);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<long>(m));
    std::sort(want.begin(), want.end());
    agree += distill::select_tokens(s, m) == want;
  }
  for (std::size_t n = 1; n <= 12; ++n)
    for (std::size_t m = 1; m <= n; ++m) {
      std::vector<double> s(n, 0.5);
      std::vector<std::size_t> want(m);
      std::iota(want.begin(), want.end(), 0);
      ties_ok += distill::select_tokens(s, m) == want;
      ++tie_cases;
    }
  return {agree == 1000 && ties_ok == tie_cases,
          fmt("%zu/1000 random vectors agree with the full-sort oracle; all-ties %zu/%zu pick the lowest indices",
              agree, ties_ok, tie_cases)};
}

// ---- 5 ----------------------------------------------------------------------
Outcome score_invariances() {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 2.0), logc(-3.0, 3.0);
  double worst = 0.0;
  bool same_pick = true;
  for (int i = 0; i < 500; ++i) {
    const std::size_t z = 2 + rng() % 10;
    std::vector<double> vr(z), si(z);
    for (double& x : vr) x = u(rng);
    for (double& x : si) x = u(rng);
    const double c = std::pow(10.0, logc(rng));
    const auto base = distill::combine_scores(vr, si);
    auto scaled_vr = vr, scaled_si = si;
    for (double& x : scaled_vr) x *= c;
    for (double& x : scaled_si) x *= c;
    for (const auto& other : {distill::combine_scores(scaled_vr, si), distill::combine_scores(vr, scaled_si)}) {
      for (std::size_t j = 0; j < z; ++j) worst = std::max(worst, std::abs(other.s_j[j] - base.s_j[j]));
      same_pick = same_pick && distill::select_tokens(other.s_j, std::min<std::size_t>(2, z)) ==
                                   distill::select_tokens(base.s_j, std::min<std::size_t>(2, z));
    }
  }
  // Zero addend: uniform 1/z plus the other normalized list.
  bool zero_rule = true;
  for (std::size_t z : {1, 3, 7}) {
    std::vector<double> si(z);
    for (double& x : si) x = u(rng) + 0.1;
    const double norm = std::accumulate(si.begin(), si.end(), 0.0);
    const auto a = distill::combine_scores(std::vector<double>(z, 0.0), si);
    const auto b = distill::combine_scores(si, std::vector<double>(z, 0.0));
    const auto both = distill::combine_scores(std::vector<double>(z, 0.0), std::vector<double>(z, 0.0));
    for (std::size_t j = 0; j < z; ++j) {
      const double want = 1.0 / static_cast<double>(z) + si[j] / norm;
      zero_rule = zero_rule && std::abs(a.s_j[j] - want) < 1e-12 && std::abs(b.s_j[j] - want) < 1e-12 &&
                  std::abs(both.s_j[j] - 2.0 / static_cast<double>(z)) < 1e-12;
    }
  }
  return {worst <= 1e-12 && same_pick && zero_rule,
          fmt("max |dS_j| under positive scaling %.1e over 1000 scalings, selections unchanged: %s, zero-addend rule: %s",
              worst, same_pick ? "yes" : "no", zero_rule ? "holds" : "broken")};
}

// ---- 8 ----------------------------------------------------------------------
Outcome kmeans_bands() {
  std::mt19937_64 rng(19);
  double worst = 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double sigma = 0.05 + 0.05 * static_cast<double>(trial % 4);
    const double gap = 4.0 * sigma;
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<std::pair<double, std::size_t>> pts;
    for (std::size_t label = 0; label < 3; ++label)
      for (int k = 0; k < 300; ++k)
        pts.push_back({0.3 + gap * static_cast<double>(2 - label) + noise(rng), label});
    std::shuffle(pts.begin(), pts.end(), rng);
    std::vector<double> sims;
    for (const auto& p : pts) sims.push_back(p.first);
    const auto labels = train::zero_shot_entailment_kmeans(sims);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) hit += labels[i] == pts[i].second;
    worst = std::min(worst, static_cast<double>(hit) / static_cast<double>(pts.size()));
  }
  bool degenerate = false;
  try {
    const std::vector<double> flat(100, 0.42);
    train::zero_shot_entailment_kmeans(flat);
  } catch (const Error& e) {
    degenerate = e.code() == ErrorCode::DegenerateInput;
  }
  return {worst >= 0.95 && degenerate,
          fmt("worst accuracy %.4f over 20 draws of 900 points (bands 4 sigma apart), constant input raises "
              "DegenerateInput: %s",
              worst, degenerate ? "yes" : "no")};
}

// ---- 10 ---------------------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome cli_replay(train::TeacherSet& teachers) {
  const fs::path root = fs::temp_directory_path() / "mad_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  models::save_teacher(teachers.paired, root / "teachers" / "paired");
  const std::string cfg = (fs::path(MAD_CONFIG_DIR) / "acceptance.cfg").string();
  std::ostringstream out, err;
  auto mad = [&](std::vector<std::string> args) { return cli::run(args, out, err); };
  const std::string td = (root / "teachers").string();
  std::vector<std::pair<std::vector<std::string>, std::string>> runs = {
      {{"train", "--config", cfg, "--teacher-dir", td, "--seed", "3", "--set", "train.epochs=3"}, "summary.json"},
      {{"train", "--config", cfg, "--teacher-dir", td, "--split", "sm", "--ts", "off", "--w", "0.1", "--set",
        "train.epochs=2"},
       "summary.json"},
      {{"zero-shot", "--config", cfg, "--teacher-dir", td}, "zero_shot.json"},
      {{"gen-data", "--config", cfg, "--shots", "full"}, "data.json"},
  };
  std::size_t identical = 0;
  std::string bad;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path first = root / ("run" + std::to_string(i)), again = root / ("replay" + std::to_string(i));
    auto args = runs[i].first;
    args.insert(args.end(), {"--out-dir", first.string()});
    const int a = mad(args);
    const int b = mad({args.front(), "--config", (first / "manifest.json").string(), "--out-dir", again.string()});
    const std::string x = slurp(first / runs[i].second), y = slurp(again / runs[i].second);
    bool same = a == 0 && b == 0 && !x.empty() && x == y;
    if (args.front() == "train") same = same && slurp(first / "metrics.csv") == slurp(again / "metrics.csv");
    identical += same;
    if (!same) bad += " " + args.front() + "(exit " + std::to_string(a) + "/" + std::to_string(b) + ")";
  }
  fs::remove_all(root);
  return {identical == runs.size(),
          fmt("%zu/%zu CLI runs replayed from their manifests byte-for-byte%s", identical, runs.size(), bad.c_str())};
}

// ---- 6, 7, 9, 11: shared training runs --------------------------------------
struct Rung {
  std::string name;
  bool vision, text, ts, cw, af;
};

const std::vector<Rung> kLadder = {
    {"baseline", false, false, false, false, false}, {"vision-only", true, false, false, false, false},
    {"MD", true, true, false, false, false},         {"MD+TS", true, true, true, false, false},
    {"MD+TS+CW", true, true, true, true, false},     {"MAD", true, true, true, true, true},
};

train::RunConfig rung_config(const train::RunConfig& base, const Rung& r, std::uint64_t seed) {
  train::RunConfig c = base;
  c.distill.distill_vision = r.vision;
  c.distill.distill_text = r.text;
  c.distill.enable_ts = r.ts;
  c.distill.enable_cw = r.cw;
  c.distill.enable_af = r.af;
  c.train.seed = seed;
  return c;
}

struct SeedRuns {
  std::vector<double> standard;  // per rung
  double baseline_sm = 0.0, mad_sm = 0.0;
  analysis::MIReport mi_baseline, mi_mad;
};

double mean_gap(const analysis::MIReport& r) {
  double g = 0.0;
  for (std::size_t l = 0; l < r.layers; ++l) g += r.layer_gap(l);
  return g / static_cast<double>(r.layers);
}

// Brute-force MI on a handful of instances, one pairing per forward pass.
double mi_oracle_error(models::Student& student, const data::DatasetSplit& split) {
  data::DatasetSplit few = split;
  few.instances.resize(10);
  const auto got = analysis::modality_importance(student, few);
  std::vector<double> vis(got.vision.size(), 0.0), txt(got.text.size(), 0.0);
  std::size_t sequences = 0;
  for (const auto& inst : few.instances)
    for (std::size_t c = 0; c < inst.candidates.size(); ++c) {
      const auto text = inst.pair_text(c);
      Tape tape;
      const models::StudentInput in[] = {{&inst.image, &text}};
      const auto b = student.forward(tape, in);
      const std::size_t regions = inst.image.cells.size();
      for (std::size_t l = 0; l < b.attention.size(); ++l)
        for (std::size_t h = 0; h < b.attention[l]->heads; ++h) {
          const auto row = b.attention[l]->row(0, h, 1 + regions);
          for (std::size_t k = 0; k < row.size(); ++k) {
            if (k >= 1 && k <= regions) vis[l * got.heads + h] += row[k];
            if (k >= 2 + regions) txt[l * got.heads + h] += row[k];
          }
        }
      ++sequences;
    }
  double worst = 0.0;
  for (std::size_t i = 0; i < vis.size(); ++i) {
    worst = std::max(worst, std::abs(vis[i] / static_cast<double>(sequences) - got.vision[i]));
    worst = std::max(worst, std::abs(txt[i] / static_cast<double>(sequences) - got.text[i]));
  }
  return worst;
}

}  // namespace

// Failed criteria are reported; --strict also turns them into a nonzero exit.
int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::string(argv[1]) == "--strict";
  const auto t_all = Clock::now();
  const train::RunConfig base = acceptance_config();
  std::printf("acceptance config hash %s\n", base.hash().c_str());
  std::fflush(stdout);

  run_criterion(1, "gradient exactness", gradient_exactness);

  const auto t_teach = Clock::now();
  train::TeacherSet teachers = train::build_teachers(base, true);
  std::printf("       teachers trained in %.1fs\n", seconds_since(t_teach));

  run_criterion(2, "baseline recovery at w=0", [&] { return baseline_recovery(base, teachers); });
  run_criterion(3, "confidence gate oracle", gate_oracle);
  run_criterion(4, "token selection oracle", selection_oracle);
  run_criterion(5, "score combination invariances", score_invariances);

  // Ladder runs shared by criteria 6, 7 and 9.
  const std::size_t seeds = 5;
  std::vector<SeedRuns> per_seed(seeds);
  double ladder_secs = 0.0;  // training and evaluation of the 30 ladder runs
  double mi_oracle = -1.0;
  std::string ladder_error;
  try {
    for (std::size_t s = 0; s < seeds; ++s) {
      for (const auto& rung : kLadder) {
        const auto cfg = rung_config(base, rung, s);
        const auto d = train::prepare_data(cfg);
        std::unique_ptr<models::Student> student;
        const auto t0 = Clock::now();
        const auto rec =
            train::run_experiment(cfg, d, train::uses_teacher(cfg.distill) ? &teachers.paired : nullptr, &student);
        ladder_secs += seconds_since(t0);
        per_seed[s].standard.push_back(rec.metrics.accuracy);
        const bool is_base = rung.name == "baseline", is_mad = rung.name == "MAD";
        if (is_base || is_mad) {
          const auto sm = data::mitigate_shortcuts(d.splits.val, data::Vocabulary(cfg.task)).split;
          const double sm_acc = train::evaluate(*student, sm).accuracy;
          const auto mi = analysis::modality_importance(*student, d.splits.val);
          (is_base ? per_seed[s].baseline_sm : per_seed[s].mad_sm) = sm_acc;
          (is_base ? per_seed[s].mi_baseline : per_seed[s].mi_mad) = mi;
          if (is_base && s == 0) mi_oracle = mi_oracle_error(*student, d.splits.val);
        }
      }
      std::printf("       seed %zu:", s);
      for (std::size_t r = 0; r < kLadder.size(); ++r)
        std::printf(" %s %.3f", kLadder[r].name.c_str(), per_seed[s].standard[r]);
      std::printf(" | SM baseline %.3f MAD %.3f\n", per_seed[s].baseline_sm, per_seed[s].mad_sm);
      std::fflush(stdout);
    }
  } catch (const std::exception& e) {
    ladder_error = e.what();
  }
  auto mean_of = [&](auto get) {
    double acc = 0.0;
    for (const auto& s : per_seed) acc += get(s);
    return acc / static_cast<double>(seeds);
  };

  run_criterion(6, "ablation ladder direction", [&]() -> Outcome {
    if (!ladder_error.empty()) return {false, "ladder threw " + ladder_error};
    std::vector<double> means;
    std::string detail;
    for (std::size_t r = 0; r < kLadder.size(); ++r) {
      means.push_back(mean_of([&](const SeedRuns& s) { return s.standard[r]; }));
      detail += fmt("%s %.4f, ", kLadder[r].name.c_str(), means.back());
    }
    bool monotone = true;
    for (std::size_t r = 1; r < means.size(); ++r) monotone = monotone && means[r - 1] <= means[r];
    const double lift = means.back() - means.front();
    detail += fmt("monotone: %s, MAD - baseline %+.2f points, %.0fs (limit 300s)", monotone ? "yes" : "no",
                  100.0 * lift, ladder_secs);
    return {monotone && lift >= 0.05 && ladder_secs < 300.0, detail};
  });

  run_criterion(7, "shortcut-mitigated direction", [&]() -> Outcome {
    if (!ladder_error.empty()) return {false, "ladder threw " + ladder_error};
    const auto d = train::prepare_data(base);
    const data::Vocabulary vocab(base.task);
    const auto sm = data::mitigate_shortcuts(d.splits.val, vocab).split;
    auto heuristic = [&](const data::DatasetSplit& split) {
      std::size_t hit = 0;
      for (const auto& inst : split.instances) hit += data::cue_heuristic(inst, vocab) == inst.gold;
      return static_cast<double>(hit) / static_cast<double>(split.size());
    };
    const double h_std = heuristic(d.splits.val), h_sm = heuristic(sm);
    const double chance = 1.0 / static_cast<double>(d.splits.val.instances.front().candidates.size());
    const double base_drop = mean_of([](const SeedRuns& s) { return s.standard.front() - s.baseline_sm; });
    const double mad_drop = mean_of([](const SeedRuns& s) { return s.standard.back() - s.mad_sm; });
    return {h_std >= 0.90 && h_sm <= chance + 0.10 && mad_drop <= base_drop,
            fmt("cue heuristic %.4f standard / %.4f SM (chance %.2f); mean drop baseline %.4f, MAD %.4f", h_std, h_sm,
                chance, base_drop, mad_drop)};
  });

  run_criterion(8, "zero-shot k-means bands", kmeans_bands);

  run_criterion(9, "modality importance direction", [&]() -> Outcome {
    if (!ladder_error.empty()) return {false, "ladder threw " + ladder_error};
    const double before = mean_of([](const SeedRuns& s) { return mean_gap(s.mi_baseline); });
    const double after = mean_of([](const SeedRuns& s) { return mean_gap(s.mi_mad); });
    return {after < before && mi_oracle >= 0.0 && mi_oracle <= 1e-9,
            fmt("mean per-layer |text - vision| gap: no distillation %.4f, MAD %.4f; oracle error %.1e on 10 "
                "instances",
                before, after, mi_oracle)};
  });

  run_criterion(10, "CLI replay determinism", [&] { return cli_replay(teachers); });

  run_criterion(11, "mixed-teacher flexibility", [&]() -> Outcome {
    if (!ladder_error.empty()) return {false, "ladder threw " + ladder_error};
    const double baseline = mean_of([](const SeedRuns& s) { return s.standard.front(); });
    const double paired = mean_of([](const SeedRuns& s) { return s.standard.back(); });
    std::string detail = fmt("baseline %.4f, paired %.4f", baseline, paired);
    bool ok = paired > baseline;
    for (auto choice : {train::TeacherChoice::MixedText, train::TeacherChoice::MixedVision}) {
      auto pair = teachers.pick(choice);
      double acc = 0.0;
      for (std::size_t s = 0; s < seeds; ++s) {
        auto cfg = rung_config(base, kLadder.back(), s);
        cfg.teacher = choice;
        const auto d = train::prepare_data(cfg);
        acc += train::run_experiment(cfg, d, &pair, nullptr).metrics.accuracy;
      }
      acc /= static_cast<double>(seeds);
      ok = ok && acc > baseline;
      detail += fmt(", %s %.4f", train::to_string(choice).c_str(), acc);
    }
    return {ok, detail + " (MAD, mean over 5 seeds)"};
  });

  std::printf("%d of 11 criteria failed; total %.0fs\n", failures, seconds_since(t_all));
  return strict && failures != 0 ? 1 : 0;
}
