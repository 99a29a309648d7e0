#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/tensor.hpp"

namespace fsrl {

struct FdOptions {
  double h = 1e-5;
  double tol = 1e-6;
  // Relative error uses max(|analytic|, |numeric|, denom_floor) as the
  // denominator, i.e. agreement below denom_floor*tol absolute also passes.
  double denom_floor = 1e-4;
  // Sample points are rejected when any kink distance seen during evaluation
  // falls below kink_factor * h.
  double kink_factor = 10.0;
};

struct GradCheckReport {
  struct ParamEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
  };
  bool rejected = false;       // sample was kink-unsafe; resample and retry
  double min_kink_distance = 0.0;
  double max_rel_err = 0.0;
  std::vector<ParamEntry> per_param;
  bool pass = false;
};

// Central-difference gradient oracle. build_loss must deterministically
// rebuild the scalar loss from the current parameter values; it is invoked
// once on a tape for the analytic gradients and 2x per parameter scalar for
// the numeric probes. Kink-safe sampling: the report comes back rejected if
// any evaluation passed within kink_factor*h of an activation kink.
GradCheckReport finite_diff_check(const std::function<Tensor()>& build_loss,
                                  std::span<const std::pair<std::string, Tensor>> params,
                                  const FdOptions& opt = {});

}  // namespace fsrl
