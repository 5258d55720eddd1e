#include "mad/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "mad/error.hpp"

namespace mad::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

OptimizerConfig optimizer_config(const TrainConfig& t) {
  OptimizerConfig c;
  c.kind = t.optimizer;
  c.lr = t.lr;
  c.weight_decay = t.weight_decay;
  return c;
}

void add_into(distill::DistillLossBreakdown& acc, const distill::DistillLossBreakdown& b, double f) {
  acc.L_t += f * b.L_t;
  acc.L_d_v += f * b.L_d_v;
  acc.L_d_t += f * b.L_d_t;
  acc.L_dt_prime += f * b.L_dt_prime;
  acc.w_r += f * b.w_r;
  acc.L_final += f * b.L_final;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Epoch-wise shuffled batches of instance indices.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

// Splits one optimizer batch into grad_accum micro-batches.
std::vector<std::vector<std::size_t>> micro_batches(const std::vector<std::size_t>& batch,
                                                    std::size_t parts) {
  parts = std::min(parts, batch.size());
  std::vector<std::vector<std::size_t>> out(parts);
  for (std::size_t i = 0; i < batch.size(); ++i) out[i * parts / batch.size()].push_back(batch[i]);
  return out;
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss))
    throw Error(ErrorCode::Diverged, "loss is not finite at step " + std::to_string(step));
}

struct AdaptForward {
  AdaptLosses losses;
  // Unmasked, correctly paired sequences (present when requested).
  Var clean_img, clean_cls;
};

AdaptForward adapt_forward(Tape& tape, Student& student, std::span<const data::Instance* const> batch,
                           Rng& rng, double mask_rate, bool with_clean) {
  const std::size_t n = batch.size();
  if (n < 2) throw Error(ErrorCode::BatchTooSmall, "image-text matching needs at least 2 instances");
  std::bernoulli_distribution masked(mask_rate);
  std::vector<data::TokenSequence> clean(n), noisy(n);
  std::vector<std::size_t> rows, targets;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    clean[i] = batch[i]->pair_text(batch[i]->gold);
    noisy[i] = clean[i];
    for (std::size_t k = 0; k < noisy[i].size(); ++k) {
      if (mask_rate > 0.0 && masked(rng)) {
        rows.push_back(offset + k);
        targets.push_back(noisy[i][k]);
        noisy[i][k] = data::Vocabulary::kMask;
      }
    }
    offset += noisy[i].size();
  }
  const std::size_t shift = 1 + uniform_index(rng, n - 1);
  std::vector<models::StudentInput> inputs;
  for (std::size_t i = 0; i < n; ++i) inputs.push_back({&batch[i]->image, &noisy[i]});
  for (std::size_t i = 0; i < n; ++i) inputs.push_back({&batch[(i + shift) % n]->image, &clean[i]});
  if (with_clean)
    for (std::size_t i = 0; i < n; ++i) inputs.push_back({&batch[i]->image, &clean[i]});
  auto out = student.forward(tape, inputs);

  AdaptForward f;
  if (rows.empty()) {
    f.losses.mlm = tape.constant(Tensor::scalar(0.0));
  } else {
    Var feats = select_rows(out.tokens, rows);
    f.losses.mlm = cross_entropy_rows(student.masked_token_logits(tape, feats), targets);
  }
  std::vector<double> labels(2 * n, 0.0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n), 1.0);
  f.losses.itm = bce_with_logits(student.match_logits(tape, slice_rows(out.cls, 0, 2 * n)), labels);
  if (with_clean) {
    f.clean_img = slice_rows(out.img, 2 * n, n);
    f.clean_cls = slice_rows(out.cls, 2 * n, n);
  }
  return f;
}

}  // namespace

Metrics metrics_from_logits(const data::DatasetSplit& split,
                            const std::vector<std::vector<double>>& logits) {
  if (logits.size() != split.size())
    throw Error(ErrorCode::ShapeMismatch, "one logit vector per instance expected");
  Metrics m;
  std::map<std::string, std::pair<std::size_t, std::size_t>> cats;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& inst = split.instances[i];
    if (logits[i].size() != inst.candidates.size())
      throw Error(ErrorCode::ShapeMismatch, "logit count differs from candidate count");
    const std::size_t p = argmax(logits[i]);
    m.predictions.push_back(p);
    const bool ok = p == inst.gold;
    hits += ok;
    auto& c = cats[inst.category];
    c.first += ok;
    ++c.second;
  }
  m.accuracy = split.size() ? static_cast<double>(hits) / static_cast<double>(split.size()) : 0.0;
  for (const auto& [name, c] : cats)
    m.per_category[name] = static_cast<double>(c.first) / static_cast<double>(c.second);
  return m;
}

bool uses_teacher(const distill::DistillationConfig& c) {
  return c.distill_vision || c.distill_text || c.enable_ts;
}

RunRecord train(Student& student, const Guidance& guidance, const data::DatasetSplit& split,
                const distill::DistillationConfig& dconfig, const TrainConfig& tconfig) {
  const auto start = Clock::now();
  tconfig.validate();
  dconfig.validate(student.config().max_text);
  if (split.size() == 0) throw Error(ErrorCode::SpecInvalid, "training split is empty");
  const bool distilling = uses_teacher(dconfig);
  if (distilling && (!guidance.teacher || !guidance.stats))
    throw Error(ErrorCode::SpecInvalid, "distillation needs a teacher and keyword statistics");
  std::vector<models::TeacherOutputs> teacher_out;
  if (distilling) teacher_out = models::teacher_encode_all(*guidance.teacher, split);

  Optimizer opt(student.params().pointers(), optimizer_config(tconfig));
  Rng order_rng(mix_seed(tconfig.seed, "train-order"));
  const std::size_t per_epoch = (split.size() + tconfig.batch - 1) / tconfig.batch;
  const std::size_t total = per_epoch * tconfig.epochs;

  RunRecord rec;
  rec.stages.push_back({"task", 0, total});
  rec.metrics.seed = tconfig.seed;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& batch : epoch_batches(split.size(), tconfig.batch, order_rng)) {
      student.params().zero_grad();
      distill::DistillLossBreakdown mean_b;
      const double inv = 1.0 / static_cast<double>(batch.size());
      try {
        for (const auto& micro : micro_batches(batch, tconfig.grad_accum)) {
          Tape tape;
          std::vector<const data::Instance*> ptrs;
          for (std::size_t i : micro) ptrs.push_back(&split.instances[i]);
          auto outs = student.encode_many(tape, ptrs);
          std::vector<Var> totals;
          for (std::size_t k = 0; k < micro.size(); ++k) {
            const auto& inst = *ptrs[k];
            Var task = cross_entropy(outs[k].logits, inst.gold);
            if (distilling) {
              auto ml = distill::mad_loss(tape, student, task, inst, teacher_out[micro[k]], outs[k],
                                          dconfig, *guidance.stats);
              add_into(mean_b, ml.breakdown, inv);
              totals.push_back(ml.total);
            } else {
              const double t = task.value().item();
              add_into(mean_b, {t, 0.0, 0.0, 0.0, 0.0, t}, inv);
              totals.push_back(task);
            }
          }
          Var loss = scale(sum(stack(totals)), inv);
          check_finite(loss.value().item(), step);
          tape.backward(loss);
        }
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFinite)
          throw Error(ErrorCode::Diverged, "step " + std::to_string(step) + ": " + e.what());
        throw;
      }
      opt.step(warmup_cosine(step, total, tconfig.warmup));
      rec.log.push_back({step, mean_b});
      epoch_loss += mean_b.L_final / static_cast<double>(per_epoch);
      ++step;
    }
    rec.metrics.loss_curve.push_back(epoch_loss);
  }
  rec.metrics.wall_seconds = seconds_since(start);
  return rec;
}

AdaptLosses l_adapt_losses(Tape& tape, Student& student,
                           std::span<const data::Instance* const> batch, Rng& rng, double mask_rate) {
  return adapt_forward(tape, student, batch, rng, mask_rate, false).losses;
}

RunRecord adaptive_finetune(Student& student, const Guidance& guidance,
                            const data::DatasetSplit& full_split,
                            const data::DatasetSplit& target_split,
                            const distill::DistillationConfig& dconfig, const TrainConfig& tconfig) {
  if (!dconfig.enable_af) return train(student, guidance, target_split, dconfig, tconfig);
  const auto start = Clock::now();
  tconfig.validate();
  const data::DatasetSplit& stage1 = tconfig.af_full_split ? full_split : target_split;
  if (stage1.size() < 2) throw Error(ErrorCode::BatchTooSmall, "adaptation split has fewer than 2 instances");
  const bool distilling = (dconfig.distill_vision || dconfig.distill_text) && dconfig.w > 0.0;
  if (distilling && !guidance.teacher)
    throw Error(ErrorCode::SpecInvalid, "distillation needs a teacher");
  std::vector<models::TeacherOutputs> teacher_out;
  if (distilling) teacher_out = models::teacher_encode_all(*guidance.teacher, stage1);

  Optimizer opt(student.params().pointers(), optimizer_config(tconfig));
  Rng order_rng(mix_seed(tconfig.seed, "adapt-order"));
  Rng mask_rng(mix_seed(tconfig.seed, "adapt-mask"));
  const std::size_t per_epoch = (stage1.size() + tconfig.batch - 1) / tconfig.batch;
  const std::size_t total = per_epoch * tconfig.af_epochs;
  RunRecord rec;
  rec.stages.push_back({"adapt", 0, total});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tconfig.af_epochs; ++epoch) {
    for (auto batch : epoch_batches(stage1.size(), tconfig.batch, order_rng)) {
      // A trailing singleton cannot form a mismatched pair; fold it back in.
      if (batch.size() < 2) batch.push_back(batch.front() == 0 ? 1 : 0);
      student.params().zero_grad();
      Tape tape;
      std::vector<const data::Instance*> ptrs;
      for (std::size_t i : batch) ptrs.push_back(&stage1.instances[i]);
      auto f = adapt_forward(tape, student, ptrs, mask_rng, 0.15, distilling);
      distill::DistillLossBreakdown b;
      b.L_t = f.losses.mlm.value().item() + f.losses.itm.value().item();
      Var loss = add(f.losses.mlm, f.losses.itm);
      if (distilling) {
        Var vp = student.project_to_teacher(tape, f.clean_img);
        Var tp = student.project_to_teacher(tape, f.clean_cls);
        std::vector<Var> terms;
        for (std::size_t k = 0; k < batch.size(); ++k) {
          const auto& t = teacher_out[batch[k]];
          models::TeacherOutputs gold;
          gold.image = t.image;
          gold.text = Tensor({1, t.text.shape()[1]},
                             std::vector<double>(t.text.row(ptrs[k]->gold).begin(),
                                                 t.text.row(ptrs[k]->gold).end()));
          auto md = distill::md_loss(tape, gold, slice_rows(vp, k, 1), slice_rows(tp, k, 1));
          if (dconfig.distill_vision) {
            b.L_d_v += md.vision.value().item() / static_cast<double>(batch.size());
            terms.push_back(md.vision);
          }
          if (dconfig.distill_text) {
            b.L_d_t += md.text.value().item() / static_cast<double>(batch.size());
            terms.push_back(md.text);
          }
        }
        const double per = static_cast<double>(terms.size()) / static_cast<double>(batch.size());
        loss = add(loss, scale(mean(stack(terms)), dconfig.w * per));
        b.w_r = dconfig.w;
      }
      b.L_final = b.L_t + b.w_r * (b.L_d_v + b.L_d_t);
      check_finite(loss.value().item(), step);
      tape.backward(loss);
      opt.step(warmup_cosine(step, total, tconfig.warmup));
      rec.log.push_back({step, b});
      ++step;
    }
  }

  // Stage 2 starts from a fresh optimizer state.
  RunRecord task = train(student, guidance, target_split, dconfig, tconfig);
  for (auto& entry : task.log) {
    entry.step += step;
    rec.log.push_back(entry);
  }
  rec.stages.push_back({"task", step, task.stages.front().steps});
  rec.metrics = task.metrics;
  rec.metrics.wall_seconds = seconds_since(start);
  return rec;
}

std::vector<std::vector<double>> predict_logits(Student& student, const data::DatasetSplit& split) {
  std::vector<std::vector<double>> out;
  constexpr std::size_t chunk = 32;
  for (std::size_t b = 0; b < split.size(); b += chunk) {
    Tape tape;
    std::vector<const data::Instance*> ptrs;
    for (std::size_t i = b; i < std::min(split.size(), b + chunk); ++i) ptrs.push_back(&split.instances[i]);
    for (const auto& o : student.encode_many(tape, ptrs)) {
      const auto v = o.logits.value().data();
      out.emplace_back(v.begin(), v.end());
    }
  }
  return out;
}

Metrics evaluate(Student& student, const data::DatasetSplit& split) {
  const auto start = Clock::now();
  Metrics m = metrics_from_logits(split, predict_logits(student, split));
  m.wall_seconds = seconds_since(start);
  return m;
}

void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << distill::breakdown_csv_header() << '\n';
  for (const auto& e : record.log) out << distill::breakdown_csv_row(e.step, e.loss) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

std::string summary_json(const RunRecord& record) {
  nlohmann::ordered_json j;
  j["accuracy"] = record.metrics.accuracy;
  j["per_category"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : record.metrics.per_category) j["per_category"][k] = v;
  j["seed"] = record.metrics.seed;
  j["config_hash"] = record.config_hash;
  return j.dump(2) + "\n";
}

}  // namespace mad::train
