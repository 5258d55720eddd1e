#include "mad/train/adapters.hpp"

#include <algorithm>
#include <numeric>

#include "mad/error.hpp"

namespace mad::train {

std::string to_string(AdapterHead head) {
  switch (head) {
    case AdapterHead::Linear1: return "linear-1";
    case AdapterHead::Linear3: return "linear-3";
    case AdapterHead::Transformer1: return "transformer-1";
  }
  return "?";
}

Adapter::Adapter(AdapterHead head, std::size_t teacher_dim, std::uint64_t seed)
    : head_(head), dim_(teacher_dim) {
  Rng rng(mix_seed(seed, "adapter"));
  const std::size_t d = teacher_dim, in = 2 * teacher_dim;
  switch (head) {
    case AdapterHead::Linear1:
      params_.add("out.w", fan_in_weight(in, 1, rng));
      params_.add("out.b", Tensor::zeros({1}));
      break;
    case AdapterHead::Linear3:
      params_.add("l1.w", fan_in_weight(in, in, rng));
      params_.add("l1.b", Tensor::zeros({in}));
      params_.add("l2.w", fan_in_weight(in, in, rng));
      params_.add("l2.b", Tensor::zeros({in}));
      params_.add("out.w", fan_in_weight(in, 1, rng));
      params_.add("out.b", Tensor::zeros({1}));
      break;
    case AdapterHead::Transformer1:
      // Rows [V_t, T_t] per pairing, tagged by a learned type embedding.
      params_.add("type", normal_tensor({2, d}, 0.1, rng));
      body_ = std::make_unique<models::TransformerStack>(
          params_, "body", models::TransformerConfig{d, 1, 2, 2}, rng);
      params_.add("out.w", fan_in_weight(in, 1, rng));
      params_.add("out.b", Tensor::zeros({1}));
      break;
  }
}

Var Adapter::logits(Tape& tape, const models::TeacherOutputs& teacher) {
  const std::size_t c = teacher.text.shape()[0];
  if (teacher.image.size() != dim_) throw Error(ErrorCode::ShapeMismatch, "teacher width differs");
  Tensor pairs = Tensor::zeros({c, 2 * dim_});
  for (std::size_t k = 0; k < c; ++k) {
    std::copy(teacher.image.data().begin(), teacher.image.data().end(), pairs.row(k).begin());
    std::copy(teacher.text.row(k).begin(), teacher.text.row(k).end(), pairs.row(k).begin() + dim_);
  }
  Var x = tape.constant(pairs);
  auto p = [&](const char* name) { return tape.parameter(params_.get(name)); };
  Var h;
  switch (head_) {
    case AdapterHead::Linear1: h = x; break;
    case AdapterHead::Linear3:
      h = gelu(models::linear(tape, x, params_.get("l1.w"), params_.get("l1.b")));
      h = gelu(models::linear(tape, h, params_.get("l2.w"), params_.get("l2.b")));
      break;
    case AdapterHead::Transformer1: {
      std::vector<std::size_t> types, segments(c, 2);
      for (std::size_t k = 0; k < c; ++k) types.insert(types.end(), {0, 1});
      Var rows = reshape(x, {2 * c, dim_});
      rows = add(rows, embedding_lookup(p("type"), types));
      h = reshape(body_->forward(tape, rows, segments).hidden, {c, 2 * dim_});
      break;
    }
  }
  Var y = models::linear(tape, h, params_.get("out.w"), params_.get("out.b"));
  return reshape(y, {c});
}

Metrics adapter_baseline(TeacherPair& teacher, const data::DatasetSplit& train_split,
                         const data::DatasetSplit& eval_split, AdapterHead head,
                         const TrainConfig& tconfig) {
  tconfig.validate();
  if (train_split.size() == 0) throw Error(ErrorCode::SpecInvalid, "training split is empty");
  const auto train_out = models::teacher_encode_all(teacher, train_split);
  const auto eval_out = models::teacher_encode_all(teacher, eval_split);
  Adapter adapter(head, teacher.dim(), tconfig.seed);
  OptimizerConfig oc;
  oc.kind = tconfig.optimizer;
  oc.lr = tconfig.lr;
  oc.weight_decay = tconfig.weight_decay;
  Optimizer opt(adapter.params().pointers(), oc);
  Rng rng(mix_seed(tconfig.seed, "adapter-order"));
  const std::size_t n = train_split.size();
  const std::size_t total = tconfig.epochs * ((n + tconfig.batch - 1) / tconfig.batch);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Metrics m;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < n; b += tconfig.batch) {
      const std::size_t e = std::min(n, b + tconfig.batch);
      adapter.params().zero_grad();
      Tape tape;
      std::vector<Var> losses;
      for (std::size_t i = b; i < e; ++i)
        losses.push_back(cross_entropy(adapter.logits(tape, train_out[order[i]]),
                                       train_split.instances[order[i]].gold));
      Var loss = mean(stack(losses));
      tape.backward(loss);
      opt.step(warmup_cosine(step++, total, tconfig.warmup));
      epoch_loss += loss.value().item() * static_cast<double>(e - b) / static_cast<double>(n);
    }
    m.loss_curve.push_back(epoch_loss);
  }
  std::vector<std::vector<double>> logits;
  for (const auto& t : eval_out) {
    Tape tape;
    const auto v = adapter.logits(tape, t).value().data();
    logits.emplace_back(v.begin(), v.end());
  }
  Metrics out = metrics_from_logits(eval_split, logits);
  out.loss_curve = m.loss_curve;
  out.seed = tconfig.seed;
  return out;
}

}  // namespace mad::train
