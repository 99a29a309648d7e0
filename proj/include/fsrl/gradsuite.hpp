#pragma once

#include <cstdint>
#include <string>

#include "fsrl/gradcheck.hpp"

namespace fsrl {

// Finite-difference audits of the trainable paths, on randomized small
// instances with kink-safe resampling. The jump_relu L0 estimator is a
// straight-through surrogate and is excluded from exact checks by design.
struct GradSuiteResult {
  std::string name;
  int64_t instances = 0;
  int64_t resamples = 0;  // kink-rejected sample points that were redrawn
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
  double seconds = 0.0;
};

// Reconstruction + L1 objective gradients w.r.t. all four SAE tensors.
GradSuiteResult run_sae_loss_grad_suite(uint64_t seed, int64_t instances, double tol);

// Steered SimPO + L1 objective gradients w.r.t. (W_a, b_a, theta) through a
// small random frozen transformer, soft_threshold variant.
GradSuiteResult run_adapter_simpo_grad_suite(uint64_t seed, int64_t instances, double tol);

}  // namespace fsrl
