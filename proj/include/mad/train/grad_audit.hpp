#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mad::train {

struct TermError {
  std::string term;  // L_t, L_d_v, L_d_t, L_dt_prime, L_adapt, L_final
  double max_error = 0.0;
};

struct GradAudit {
  std::vector<TermError> terms;
  std::size_t instances = 0;
  bool passed(double tolerance = 1e-4) const;
};

// Finite-difference check of every loss term against the tape gradients of a
// small random student, one instance at a time. Even instances use a sharp
// teacher so the confidence gate opens; odd ones use the default temperature.
GradAudit gradient_audit(std::size_t instances = 50, std::uint64_t seed = 0,
                         std::size_t coords_per_param = 2);

}  // namespace mad::train
