#pragma once

#include <functional>
#include <vector>

#include "mad/numerics/tape.hpp"

namespace mad {

// Builds a scalar on a fresh tape from a single input variable.
using ScalarFn = std::function<Var(Tape&, Var)>;
// Builds a scalar on a fresh tape from whatever parameters it closes over.
using ScalarGraph = std::function<Var(Tape&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per parameter; 0 probes every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

// Same measure as finite_difference_check, taken over the coordinates of the
// given parameters. Parameter values are restored afterwards; their grad
// buffers are left zeroed.
double finite_difference_check(const ScalarGraph& f, const std::vector<Parameter*>& params,
                               const GradCheckOptions& options = {});

}  // namespace mad
