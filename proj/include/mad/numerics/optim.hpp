#pragma once

#include <vector>

#include "mad/numerics/tensor.hpp"

namespace mad {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 3e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Updates every non-frozen parameter from its accumulated gradient. The
// learning rate of a step may be scaled (warmup / decay schedules).
class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerConfig config);

  void step(double lr_scale = 1.0);
  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Learning-rate multiplier: linear warmup over the first warmup_frac of the
// steps, then cosine decay to zero.
double warmup_cosine(std::size_t step, std::size_t total, double warmup_frac = 0.05);

}  // namespace mad
