#include "mad/models/transformer.hpp"

#include "mad/error.hpp"

namespace mad::models {

TransformerStack::TransformerStack(ParameterStore& store, const std::string& prefix,
                                   const TransformerConfig& config, Rng& rng)
    : config_(config) {
  if (config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0)
    throw Error(ErrorCode::SpecInvalid, "dim must be a positive multiple of heads");
  const std::size_t d = config.dim, h = config.dim * config.mlp_ratio;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l) + ".";
    Layer layer{};
    layer.ln1_g = &store.add(p + "ln1.gamma", Tensor::filled({d}, 1.0));
    layer.ln1_b = &store.add(p + "ln1.beta", Tensor::zeros({d}));
    layer.w_qkv = &store.add(p + "attn.w_qkv", fan_in_weight(d, 3 * d, rng));
    layer.b_qkv = &store.add(p + "attn.b_qkv", Tensor::zeros({3 * d}));
    layer.w_out = &store.add(p + "attn.w_out", fan_in_weight(d, d, rng));
    layer.b_out = &store.add(p + "attn.b_out", Tensor::zeros({d}));
    layer.ln2_g = &store.add(p + "ln2.gamma", Tensor::filled({d}, 1.0));
    layer.ln2_b = &store.add(p + "ln2.beta", Tensor::zeros({d}));
    layer.w_up = &store.add(p + "mlp.w_up", fan_in_weight(d, h, rng));
    layer.b_up = &store.add(p + "mlp.b_up", Tensor::zeros({h}));
    layer.w_down = &store.add(p + "mlp.w_down", fan_in_weight(h, d, rng));
    layer.b_down = &store.add(p + "mlp.b_down", Tensor::zeros({d}));
    layers_.push_back(layer);
  }
}

TransformerStack::Output TransformerStack::forward(Tape& tape, Var x,
                                                   std::span<const std::size_t> segments) const {
  Output out;
  for (const Layer& l : layers_) {
    Var a = layer_norm(x, tape.parameter(*l.ln1_g), tape.parameter(*l.ln1_b));
    auto attn = multi_head_attention(linear(tape, a, *l.w_qkv, *l.b_qkv), segments, config_.heads);
    out.attention.push_back(attn.maps);
    x = add(x, linear(tape, attn.output, *l.w_out, *l.b_out));
    Var m = layer_norm(x, tape.parameter(*l.ln2_g), tape.parameter(*l.ln2_b));
    m = gelu(linear(tape, m, *l.w_up, *l.b_up));
    x = add(x, linear(tape, m, *l.w_down, *l.b_down));
  }
  out.hidden = x;
  return out;
}

Var linear(Tape& tape, Var x, Parameter& w, Parameter& b) {
  Var y = matmul(x, tape.parameter(w));
  if (y.shape().size() == 1) return add(y, tape.parameter(b));
  return add_row(y, tape.parameter(b));
}

}  // namespace mad::models
