#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fsrl/tensor.hpp"

namespace fsrl {

// Adam with optional warmup + cosine decay. Shared by every trainer.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Schedule: lr ramps linearly over warmup_ratio*total_steps, then follows
  // a cosine to lr_floor_frac*lr at total_steps. total_steps==0 disables the
  // schedule (constant lr).
  int64_t total_steps = 0;
  double warmup_ratio = 0.0;
  double lr_floor_frac = 0.0;
};

class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg);

  // Applies one update from the accumulated gradients, then zeroes them.
  // A per-parameter lr multiplier can be set by name (dual-lr schemes).
  void step();
  void set_lr_scale(const std::string& param_name, double scale);
  double current_lr() const;  // lr of the step that would run next
  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
    double lr_scale = 1.0;
  };
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace fsrl
