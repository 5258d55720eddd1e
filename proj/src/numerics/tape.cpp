#include "mad/numerics/tape.hpp"

#include "mad/error.hpp"

namespace mad {

const Tensor& Var::value() const {
  if (!tape) throw Error(ErrorCode::NotOnTape, "unbound variable");
  return tape->value(*this);
}

void Tape::check(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw Error(ErrorCode::NotOnTape, "variable does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) {
  return record(std::move(value), false, nullptr);
}

Var Tape::parameter(Parameter& param) {
  if (param.frozen) return constant(param.value);
  Var v = record(param.value, true, nullptr);
  nodes_.back().param = &param;
  return v;
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  if (!value.all_finite()) {
    throw Error(ErrorCode::NonFinite,
                "op produced NaN/Inf at node " + std::to_string(nodes_.size()));
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::grad_of(std::uint32_t id) { return grad_buffer(id); }

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (nodes_[loss.id].value.size() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss, got " +
                                              shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::int64_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    if (n.param) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace mad
