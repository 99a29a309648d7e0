#include "fsrl/opt.hpp"

#include <cmath>

namespace fsrl {

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg) : cfg_(cfg) {
  for (auto& [name, p] : params) {
    Slot s;
    s.name = name;
    s.param = p;
    s.m.assign(static_cast<size_t>(p.numel()), 0.0);
    s.v.assign(static_cast<size_t>(p.numel()), 0.0);
    slots_.push_back(std::move(s));
  }
}

double Adam::current_lr() const {
  const int64_t t = t_;  // 0-based index of the next step
  if (cfg_.total_steps <= 0) return cfg_.lr;
  const double warm = cfg_.warmup_ratio * static_cast<double>(cfg_.total_steps);
  if (warm > 0.0 && static_cast<double>(t) < warm)
    return cfg_.lr * (static_cast<double>(t) + 1.0) / warm;
  const double span = static_cast<double>(cfg_.total_steps) - warm;
  const double progress = span > 0.0
      ? std::min(1.0, (static_cast<double>(t) - warm) / span)
      : 1.0;
  const double floor = cfg_.lr * cfg_.lr_floor_frac;
  return floor + (cfg_.lr - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void Adam::set_lr_scale(const std::string& param_name, double scale) {
  for (Slot& s : slots_)
    if (s.name == param_name) {
      s.lr_scale = scale;
      return;
    }
  throw std::invalid_argument("Adam::set_lr_scale: unknown parameter " + param_name);
}

void Adam::step() {
  const double lr = current_lr();
  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    s.param.ensure_grad_alloc();
    auto g = s.param.grad();
    auto w = s.param.values();
    const double step_lr = lr * s.lr_scale;
    for (size_t i = 0; i < g.size(); ++i) {
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      w[i] -= step_lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    s.param.zero_grad();
  }
}

}  // namespace fsrl
