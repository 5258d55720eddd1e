#include "mad/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mad {

double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps) {
  Parameter p("x", x);
  return finite_difference_check(
      [&](Tape& tape) { return f(tape, tape.parameter(p)); }, {&p}, GradCheckOptions{eps, 0, 0});
}

double finite_difference_check(const ScalarGraph& f, const std::vector<Parameter*>& params,
                               const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(f(tape));
  }
  auto evaluate = [&] {
    Tape tape;
    return f(tape).value().item();
  };
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (Parameter* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param && n > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + options.eps;
      const double up = evaluate();
      p->value[i] = orig - options.eps;
      const double down = evaluate();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double analytic = p->grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return worst;
}

}  // namespace mad
