#include <algorithm>
#include <cmath>
#include <numbers>

#include "mad/error.hpp"
#include "mad/numerics/tape.hpp"

namespace mad {

namespace {

constexpr double kLayerNormEps = 1e-5;

Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) {
    throw Error(ErrorCode::NotOnTape, "operands live on different tapes");
  }
  a.tape->check(a);
  a.tape->check(b);
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (!a.tape) throw Error(ErrorCode::NotOnTape, "unbound variable");
  a.tape->check(a);
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " +
                                              shape_string(a.shape()) + " vs " +
                                              shape_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": expected rank " +
                                              std::to_string(rank) + ", got " +
                                              shape_string(a.shape()));
  }
}

// Treat rank-1 as a single row.
std::size_t row_count(const Tensor& t) { return t.rank() <= 1 ? 1 : t.shape()[0]; }
std::size_t row_width(const Tensor& t) {
  return t.rank() == 0 ? 1 : (t.rank() == 1 ? t.shape()[0] : t.cols());
}

void axpy(std::span<double> dst, std::span<const double> src, double alpha) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  axpy(out.data(), bv.data(), 1.0);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    if (tp.needs_grad(a)) axpy(tp.grad_buffer(a).data(), g.data(), 1.0);
                    if (tp.needs_grad(b)) axpy(tp.grad_buffer(b).data(), g.data(), 1.0);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  axpy(out.data(), bv.data(), -1.0);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    if (tp.needs_grad(a)) axpy(tp.grad_buffer(a).data(), g.data(), 1.0);
                    if (tp.needs_grad(b)) axpy(tp.grad_buffer(b).data(), g.data(), -1.0);
                  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& av = tp.value_of(a);
                    const Tensor& bv = tp.value_of(b);
                    if (tp.needs_grad(a)) {
                      auto ga = tp.grad_buffer(a).data();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                    }
                    if (tp.needs_grad(b)) {
                      auto gb = tp.grad_buffer(b).data();
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                    }
                  });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.data()) v *= c;
  return t.record(std::move(out), t.requires_grad(a),
                  [a = a.id, c](Tape& tp, std::uint32_t self) {
                    axpy(tp.grad_buffer(a).data(), tp.grad_of(self).data(), c);
                  });
}

Var add_row(Var x, Var b) {
  Tape& t = same_tape(x, b);
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(b);
  if (bv.rank() != 1 || row_width(xv) != bv.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "add_row: " + shape_string(xv.shape()) + " + " + shape_string(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = row_count(xv), d = bv.size();
  for (std::size_t r = 0; r < n; ++r) {
    double* o = out.data().data() + r * d;
    for (std::size_t c = 0; c < d; ++c) o[c] += bv[c];
  }
  return t.record(std::move(out), t.requires_grad(x) || t.requires_grad(b),
                  [x = x.id, b = b.id, n, d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    if (tp.needs_grad(x)) axpy(tp.grad_buffer(x).data(), g.data(), 1.0);
                    if (tp.needs_grad(b)) {
                      auto gb = tp.grad_buffer(b).data();
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                    }
                  });
}

Var mul_row(Var x, Var gm) {
  Tape& t = same_tape(x, gm);
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gm);
  if (gv.rank() != 1 || row_width(xv) != gv.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "mul_row: " + shape_string(xv.shape()) + " * " + shape_string(gv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = row_count(xv), d = gv.size();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= gv[c];
  return t.record(std::move(out), t.requires_grad(x) || t.requires_grad(gm),
                  [x = x.id, gm = gm.id, n, d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& xv = tp.value_of(x);
                    const Tensor& gv = tp.value_of(gm);
                    if (tp.needs_grad(x)) {
                      auto gx = tp.grad_buffer(x).data();
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * gv[c];
                    }
                    if (tp.needs_grad(gm)) {
                      auto gg = tp.grad_buffer(gm).data();
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xv[r * d + c];
                    }
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(bv, 2, "matmul rhs");
  if (av.rank() != 1 && av.rank() != 2) require_rank(av, 2, "matmul lhs");
  const std::size_t n = row_count(av), k = row_width(av);
  const std::size_t m = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul: " + shape_string(av.shape()) + " @ " + shape_string(bv.shape()));
  }
  Shape out_shape = av.rank() == 1 ? Shape{m} : Shape{n, m};
  Tensor out = Tensor::zeros(out_shape);
  const double* A = av.data().data();
  const double* B = bv.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* bp = B + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return t.record(
      std::move(out), t.requires_grad(a) || t.requires_grad(b),
      [a = a.id, b = b.id, n, k, m](Tape& tp, std::uint32_t self) {
        const double* G = tp.grad_of(self).data().data();
        const double* A = tp.value_of(a).data().data();
        const double* B = tp.value_of(b).data().data();
        if (tp.needs_grad(a)) {
          double* GA = tp.grad_buffer(a).data().data();
          for (std::size_t i = 0; i < n; ++i) {
            const double* gi = G + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double* bp = B + p * m;
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j) acc += gi[j] * bp[j];
              GA[i * k + p] += acc;
            }
          }
        }
        if (tp.needs_grad(b)) {
          double* GB = tp.grad_buffer(b).data().data();
          for (std::size_t i = 0; i < n; ++i) {
            const double* gi = G + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              double* gbp = GB + p * m;
              for (std::size_t j = 0; j < m; ++j) gbp[j] += aip * gi[j];
            }
          }
        }
      });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : t.value(a).data()) s += v;
  return t.record(Tensor::scalar(s), t.requires_grad(a),
                  [a = a.id](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad_of(self)[0];
                    for (double& v : tp.grad_buffer(a).data()) v += g;
                  });
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  const double n = static_cast<double>(av.size());
  return t.record(Tensor::scalar(s / n), t.requires_grad(a),
                  [a = a.id, n](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad_of(self)[0] / n;
                    for (double& v : tp.grad_buffer(a).data()) v += g;
                  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), t.requires_grad(a),
                  [a = a.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& x = tp.value_of(a);
                    auto ga = tp.grad_buffer(a).data();
                    for (std::size_t i = 0; i < ga.size(); ++i)
                      if (x[i] > 0.0) ga[i] += g[i];
                  });
}

Var gelu(Var a) {
  // tanh approximation; smooth everywhere so finite differences stay clean
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.data()) {
    const double x = v;
    v = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return t.record(std::move(out), t.requires_grad(a),
                  [a = a.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& xv = tp.value_of(a);
                    auto ga = tp.grad_buffer(a).data();
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                      const double x = xv[i];
                      const double th = std::tanh(c * (x + k * x * x * x));
                      const double d = 0.5 * (1.0 + th) +
                                       0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
                      ga[i] += g[i] * d;
                    }
                  });
}

namespace {

Var layer_norm_impl(Var x, const Var* gamma, const Var* beta) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  if (xv.rank() != 1 && xv.rank() != 2) require_rank(xv, 2, "layer_norm");
  const std::size_t n = row_count(xv), d = row_width(xv);
  if (gamma) {
    same_tape(x, *gamma);
    same_tape(x, *beta);
    const Tensor& gv = t.value(*gamma);
    const Tensor& bv = t.value(*beta);
    if (gv.rank() != 1 || gv.size() != d || bv.rank() != 1 || bv.size() != d) {
      throw Error(ErrorCode::ShapeMismatch, "layer_norm affine width mismatch");
    }
  }
  Tensor out = Tensor::zeros(xv.shape());
  // normalised values and inverse std per row, saved for backward
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = gamma ? h * t.value(*gamma)[c] + t.value(*beta)[c] : h;
    }
  }
  const bool rg = t.requires_grad(x) || (gamma && (t.requires_grad(*gamma) || t.requires_grad(*beta)));
  const std::uint32_t gid = gamma ? gamma->id : 0;
  const std::uint32_t bid = beta ? beta->id : 0;
  const bool affine = gamma != nullptr;
  return t.record(
      std::move(out), rg,
      [x = x.id, gid, bid, affine, n, d, xhat, inv_std](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.grad_of(self);
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = g.data().data() + r * d;
          const double* hr = xhat->data() + r * d;
          for (std::size_t c = 0; c < d; ++c)
            dh[c] = affine ? gr[c] * tp.value_of(gid)[c] : gr[c];
          if (affine) {
            if (tp.needs_grad(gid)) {
              auto gg = tp.grad_buffer(gid).data();
              for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * hr[c];
            }
            if (tp.needs_grad(bid)) {
              auto gb = tp.grad_buffer(bid).data();
              for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
            }
          }
          if (tp.needs_grad(x)) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              m1 += dh[c];
              m2 += dh[c] * hr[c];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            double* gx = tp.grad_buffer(x).data().data() + r * d;
            const double is = (*inv_std)[r];
            for (std::size_t c = 0; c < d; ++c) gx[c] += is * (dh[c] - m1 - hr[c] * m2);
          }
        }
      });
}

}  // namespace

Var layer_norm(Var x) { return layer_norm_impl(x, nullptr, nullptr); }
Var layer_norm(Var x, Var gamma, Var beta) { return layer_norm_impl(x, &gamma, &beta); }

Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = t.value(table);
  require_rank(tv, 2, "embedding_lookup");
  const std::size_t vocab = tv.shape()[0], d = tv.shape()[1];
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw Error(ErrorCode::IndexOutOfRange, "embedding id " + std::to_string(ids[i]) +
                                                  " >= " + std::to_string(vocab));
    }
    std::copy_n(tv.data().data() + ids[i] * d, d, out.data().data() + i * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return t.record(std::move(out), t.requires_grad(table),
                  [table = table.id, idv = std::move(idv), d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    auto gt = tp.grad_buffer(table).data();
                    for (std::size_t i = 0; i < idv.size(); ++i)
                      for (std::size_t c = 0; c < d; ++c) gt[idv[i] * d + c] += g[i * d + c];
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_rows of nothing");
  Tape& t = tape_of(parts[0]);
  const std::size_t d = row_width(t.value(parts[0]));
  std::size_t n = 0;
  bool rg = false;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& pv = t.value(p);
    if (pv.rank() == 0 || pv.rank() > 2 || row_width(pv) != d) {
      throw Error(ErrorCode::ShapeMismatch, "concat_rows width mismatch: " + shape_string(pv.shape()));
    }
    offsets.push_back(n * d);
    n += row_count(pv);
    rg = rg || t.requires_grad(p);
    ids.push_back(p.id);
  }
  Tensor out = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = t.value(parts[i]);
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  return t.record(std::move(out), rg,
                  [ids = std::move(ids), offsets = std::move(offsets)](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (!tp.needs_grad(ids[i])) continue;
                      auto gp = tp.grad_buffer(ids[i]).data();
                      axpy(gp, g.data().subspan(offsets[i], gp.size()), 1.0);
                    }
                  });
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw Error(ErrorCode::ShapeMismatch, "stack of nothing");
  Tape& t = tape_of(scalars[0]);
  std::vector<double> vals;
  std::vector<std::uint32_t> ids;
  bool rg = false;
  for (Var s : scalars) {
    same_tape(scalars[0], s);
    const Tensor& sv = t.value(s);
    if (sv.size() != 1) throw Error(ErrorCode::ShapeMismatch, "stack needs scalars");
    vals.push_back(sv[0]);
    ids.push_back(s.id);
    rg = rg || t.requires_grad(s);
  }
  return t.record(Tensor::vector(std::move(vals)), rg,
                  [ids = std::move(ids)](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    for (std::size_t i = 0; i < ids.size(); ++i)
                      if (tp.needs_grad(ids[i])) tp.grad_buffer(ids[i])[0] += g[i];
                  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "select_rows");
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  Tensor out = Tensor::zeros({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw Error(ErrorCode::IndexOutOfRange,
                  "row " + std::to_string(rows[i]) + " of " + std::to_string(n));
    }
    std::copy_n(xv.data().data() + rows[i] * d, d, out.data().data() + i * d);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return t.record(std::move(out), t.requires_grad(x),
                  [x = x.id, rv = std::move(rv), d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    auto gx = tp.grad_buffer(x).data();
                    for (std::size_t i = 0; i < rv.size(); ++i)
                      for (std::size_t c = 0; c < d; ++c) gx[rv[i] * d + c] += g[i * d + c];
                  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  return select_rows(x, rows);
}

Var row(Var x, std::size_t index) {
  const std::size_t idx[] = {index};
  Var r = select_rows(x, idx);
  return reshape(r, {r.value().shape()[1]});
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  if (shape_numel(shape) != xv.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "reshape " + shape_string(xv.shape()) + " -> " + shape_string(shape));
  }
  return t.record(xv.reshaped(std::move(shape)), t.requires_grad(x),
                  [x = x.id](Tape& tp, std::uint32_t self) {
                    axpy(tp.grad_buffer(x).data(), tp.grad_of(self).data(), 1.0);
                  });
}

namespace {

void softmax_inplace(std::span<double> v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    s += x;
  }
  for (double& x : v) x /= s;
}

void check_finite_input(const Tensor& v, const char* op) {
  if (!v.all_finite()) throw Error(ErrorCode::NonFinite, std::string(op) + " input is not finite");
}

}  // namespace

Var softmax(Var logits) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  require_rank(lv, 1, "softmax");
  check_finite_input(lv, "softmax");
  Tensor out = lv;
  softmax_inplace(out.data());
  return t.record(std::move(out), t.requires_grad(logits),
                  [l = logits.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& p = tp.value_of(self);
                    double dot = 0.0;
                    for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
                    auto gl = tp.grad_buffer(l).data();
                    for (std::size_t i = 0; i < p.size(); ++i) gl[i] += p[i] * (g[i] - dot);
                  });
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "softmax_rows");
  check_finite_input(xv, "softmax_rows");
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r) softmax_inplace(out.row(r));
  return t.record(std::move(out), t.requires_grad(x),
                  [x = x.id, n, d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& p = tp.value_of(self);
                    auto gx = tp.grad_buffer(x).data();
                    for (std::size_t r = 0; r < n; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * p[r * d + c];
                      for (std::size_t c = 0; c < d; ++c)
                        gx[r * d + c] += p[r * d + c] * (g[r * d + c] - dot);
                    }
                  });
}

Var log_softmax(Var logits) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  require_rank(lv, 1, "log_softmax");
  check_finite_input(lv, "log_softmax");
  double mx = lv[0];
  for (double v : lv.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : lv.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Tensor out = lv;
  for (double& v : out.data()) v -= lse;
  return t.record(std::move(out), t.requires_grad(logits),
                  [l = logits.id](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& lp = tp.value_of(self);
                    double gs = 0.0;
                    for (double v : g.data()) gs += v;
                    auto gl = tp.grad_buffer(l).data();
                    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[i] - std::exp(lp[i]) * gs;
                  });
}

Var cross_entropy(Var logits, std::size_t target) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  require_rank(lv, 1, "cross_entropy");
  if (target >= lv.size()) throw Error(ErrorCode::IndexOutOfRange, "cross_entropy target");
  const std::size_t n = lv.size();
  Var as_rows = reshape(logits, {1, n});
  const std::size_t tg[] = {target};
  return cross_entropy_rows(as_rows, tg);
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  require_rank(lv, 2, "cross_entropy_rows");
  check_finite_input(lv, "cross_entropy_rows");
  const std::size_t n = lv.shape()[0], c = lv.shape()[1];
  if (targets.size() != n) throw Error(ErrorCode::ShapeMismatch, "cross_entropy_rows targets");
  auto probs = std::make_shared<std::vector<double>>(lv.values());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw Error(ErrorCode::IndexOutOfRange, "cross_entropy target");
    std::span<double> pr(probs->data() + r * c, c);
    double mx = pr[0];
    for (double v : pr) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : pr) s += std::exp(v - mx);
    loss += mx + std::log(s) - pr[targets[r]];
    softmax_inplace(pr);
  }
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return t.record(Tensor::scalar(loss / static_cast<double>(n)), t.requires_grad(logits),
                  [l = logits.id, probs, tv = std::move(tv), n, c](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad_of(self)[0] / static_cast<double>(n);
                    auto gl = tp.grad_buffer(l).data();
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t k = 0; k < c; ++k)
                        gl[r * c + k] += g * ((*probs)[r * c + k] - (k == tv[r] ? 1.0 : 0.0));
                  });
}

Var bce_with_logits(Var logits, std::span<const double> targets) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  check_finite_input(lv, "bce_with_logits");
  if (targets.size() != lv.size()) throw Error(ErrorCode::ShapeMismatch, "bce targets");
  const std::size_t n = lv.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = lv[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  std::vector<double> tv(targets.begin(), targets.end());
  return t.record(Tensor::scalar(loss / static_cast<double>(n)), t.requires_grad(logits),
                  [l = logits.id, tv = std::move(tv), n](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad_of(self)[0] / static_cast<double>(n);
                    const Tensor& lv = tp.value_of(l);
                    auto gl = tp.grad_buffer(l).data();
                    for (std::size_t i = 0; i < n; ++i) {
                      const double s = 1.0 / (1.0 + std::exp(-lv[i]));
                      gl[i] += g * (s - tv[i]);
                    }
                  });
}

Var l1_distance(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 1, "l1_distance");
  require_same_shape(av, bv, "l1_distance");
  if (av.size() == 0) throw Error(ErrorCode::ShapeMismatch, "l1_distance of empty vectors");
  const std::size_t n = av.size();
  Var a2 = reshape(a, {1, n});
  Var b2 = reshape(b, {1, n});
  return reshape(l1_distance_rows(a2, b2), {});
}

Var l1_distance_rows(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 2, "l1_distance_rows");
  require_same_shape(av, bv, "l1_distance_rows");
  const std::size_t n = av.shape()[0], d = av.shape()[1];
  if (d == 0) throw Error(ErrorCode::ShapeMismatch, "l1_distance_rows of empty rows");
  Tensor out = Tensor::zeros({n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::abs(av[r * d + c] - bv[r * d + c]);
    out[r] = s / static_cast<double>(d);
  }
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [a = a.id, b = b.id, n, d](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& av = tp.value_of(a);
                    const Tensor& bv = tp.value_of(b);
                    const double inv = 1.0 / static_cast<double>(d);
                    const bool ga_on = tp.needs_grad(a), gb_on = tp.needs_grad(b);
                    double* ga = ga_on ? tp.grad_buffer(a).data().data() : nullptr;
                    double* gb = gb_on ? tp.grad_buffer(b).data().data() : nullptr;
                    for (std::size_t r = 0; r < n; ++r) {
                      const double gr = g[r] * inv;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double s = sign_of(av[r * d + c] - bv[r * d + c]) * gr;
                        if (ga) ga[r * d + c] += s;
                        if (gb) gb[r * d + c] -= s;
                      }
                    }
                  });
}

Var cosine_similarity(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 1, "cosine_similarity");
  require_same_shape(av, bv, "cosine_similarity");
  const double cs = eval::cosine_similarity(av.data(), bv.data());
  return t.record(Tensor::scalar(cs), t.requires_grad(a) || t.requires_grad(b),
                  [a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
                    const double g = tp.grad_of(self)[0];
                    const Tensor& av = tp.value_of(a);
                    const Tensor& bv = tp.value_of(b);
                    const double cs = tp.value_of(self)[0];
                    double na = 0.0, nb = 0.0;
                    for (std::size_t i = 0; i < av.size(); ++i) {
                      na += av[i] * av[i];
                      nb += bv[i] * bv[i];
                    }
                    na = std::sqrt(na);
                    nb = std::sqrt(nb);
                    if (tp.needs_grad(a)) {
                      auto ga = tp.grad_buffer(a).data();
                      for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += g * (bv[i] / (na * nb) - cs * av[i] / (na * na));
                    }
                    if (tp.needs_grad(b)) {
                      auto gb = tp.grad_buffer(b).data();
                      for (std::size_t i = 0; i < gb.size(); ++i)
                        gb[i] += g * (av[i] / (na * nb) - cs * bv[i] / (nb * nb));
                    }
                  });
}

std::span<const double> AttentionMaps::row(std::size_t segment, std::size_t head,
                                           std::size_t query) const {
  const std::size_t len = segment_length[segment];
  const std::size_t off = prob_offset[segment * heads + head] + query * len;
  return std::span<const double>(probs).subspan(off, len);
}

AttentionOutput multi_head_attention(Var qkv, std::span<const std::size_t> segments,
                                     std::size_t heads) {
  Tape& t = tape_of(qkv);
  const Tensor& xv = t.value(qkv);
  require_rank(xv, 2, "multi_head_attention");
  const std::size_t n = xv.shape()[0], w = xv.shape()[1];
  if (heads == 0 || w % (3 * heads) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "qkv width not divisible by 3*heads");
  }
  const std::size_t d = w / 3, dh = d / heads;
  auto maps = std::make_shared<AttentionMaps>();
  maps->heads = heads;
  std::size_t begin = 0, prob_total = 0;
  for (std::size_t len : segments) {
    if (len == 0) throw Error(ErrorCode::ShapeMismatch, "empty attention segment");
    maps->segment_begin.push_back(begin);
    maps->segment_length.push_back(len);
    for (std::size_t h = 0; h < heads; ++h) {
      maps->prob_offset.push_back(prob_total);
      prob_total += len * len;
    }
    begin += len;
  }
  if (begin != n) throw Error(ErrorCode::ShapeMismatch, "segments do not cover qkv rows");
  maps->probs.assign(prob_total, 0.0);

  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* X = xv.data().data();
  Tensor out = Tensor::zeros({n, d});
  double* O = out.data().data();
  for (std::size_t s = 0; s < maps->segments(); ++s) {
    const std::size_t b0 = maps->segment_begin[s], len = maps->segment_length[s];
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = maps->probs.data() + maps->prob_offset[s * heads + h];
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = X + (b0 + i) * w + qo;
        double* pi = P + i * len;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = X + (b0 + j) * w + ko;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          pi[j] = acc * sc;
        }
        softmax_inplace(std::span<double>(pi, len));
        double* oi = O + (b0 + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const double* vj = X + (b0 + j) * w + vo;
          const double pij = pi[j];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  Var result = t.record(
      std::move(out), t.requires_grad(qkv),
      [x = qkv.id, maps, d, dh, w, sc](Tape& tp, std::uint32_t self) {
        const double* G = tp.grad_of(self).data().data();
        const double* X = tp.value_of(x).data().data();
        double* GX = tp.grad_buffer(x).data().data();
        const std::size_t heads = maps->heads;
        std::vector<double> dp;
        for (std::size_t s = 0; s < maps->segments(); ++s) {
          const std::size_t b0 = maps->segment_begin[s], len = maps->segment_length[s];
          dp.assign(len, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = maps->probs.data() + maps->prob_offset[s * heads + h];
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const double* gi = G + (b0 + i) * d + h * dh;
              const double* pi = P + i * len;
              // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = X + (b0 + j) * w + vo;
                double* gvj = GX + (b0 + j) * w + vo;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += gi[c] * vj[c];
                  gvj[c] += pi[j] * gi[c];
                }
                dp[j] = acc;
                dot += acc * pi[j];
              }
              // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik), scaled into q and k
              const double* qi = X + (b0 + i) * w + qo;
              double* gqi = GX + (b0 + i) * w + qo;
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = pi[j] * (dp[j] - dot) * sc;
                const double* kj = X + (b0 + j) * w + ko;
                double* gkj = GX + (b0 + j) * w + ko;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
  return {result, maps};
}

Var transpose(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "transpose");
  const std::size_t n = xv.shape()[0], m = xv.shape()[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = xv[i * m + j];
  return t.record(std::move(out), t.requires_grad(x),
                  [x = x.id, n, m](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    auto gx = tp.grad_buffer(x).data();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += g[j * n + i];
                  });
}

Var normalize_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "normalize_rows");
  const std::size_t n = xv.shape()[0], d = xv.shape()[1];
  Tensor out = Tensor::zeros({n, d});
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += xv[r * d + c] * xv[r * d + c];
    norms[r] = std::sqrt(ss);
    if (norms[r] < 1e-12) throw Error(ErrorCode::ZeroNorm, "normalize_rows: zero row");
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] / norms[r];
  }
  return t.record(std::move(out), t.requires_grad(x),
                  [x = x.id, n, d, norms = std::move(norms)](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& y = tp.value_of(self);
                    auto gx = tp.grad_buffer(x).data();
                    for (std::size_t r = 0; r < n; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
                      for (std::size_t c = 0; c < d; ++c)
                        gx[r * d + c] += (g[r * d + c] - dot * y[r * d + c]) / norms[r];
                    }
                  });
}

namespace eval {

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::ShapeMismatch, "softmax of empty vector");
  for (double v : logits) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "softmax input is not finite");
  }
  std::vector<double> out(logits.begin(), logits.end());
  softmax_inplace(out);
  return out;
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "l1_distance length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "cosine_similarity length mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) throw Error(ErrorCode::ZeroNorm, "cosine of a zero vector");
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

}  // namespace eval

}  // namespace mad
