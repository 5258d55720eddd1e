#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mad/numerics/params.hpp"
#include "mad/numerics/tape.hpp"

namespace mad::models {

struct TransformerConfig {
  std::size_t dim = 32;
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
};

// Pre-norm transformer blocks (self-attention + GELU MLP, residual around
// each). Parameters live in the owning model's store under `prefix`.
class TransformerStack {
 public:
  TransformerStack(ParameterStore& store, const std::string& prefix, const TransformerConfig& config,
                   Rng& rng);

  struct Output {
    Var hidden;
    std::vector<std::shared_ptr<const AttentionMaps>> attention;  // one per layer
  };

  // x is [n, dim]; attention never crosses segment boundaries.
  Output forward(Tape& tape, Var x, std::span<const std::size_t> segments) const;
  const TransformerConfig& config() const noexcept { return config_; }

 private:
  struct Layer {
    Parameter *ln1_g, *ln1_b, *w_qkv, *b_qkv, *w_out, *b_out;
    Parameter *ln2_g, *ln2_b, *w_up, *b_up, *w_down, *b_down;
  };
  TransformerConfig config_;
  std::vector<Layer> layers_;
};

// x @ w + b for [n, in] inputs.
Var linear(Tape& tape, Var x, Parameter& w, Parameter& b);

}  // namespace mad::models
