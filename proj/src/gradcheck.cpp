#include "fsrl/gradcheck.hpp"

#include <cmath>

namespace fsrl {

GradCheckReport finite_diff_check(const std::function<Tensor()>& build_loss,
                                  std::span<const std::pair<std::string, Tensor>> params,
                                  const FdOptions& opt) {
  GradCheckReport report;
  const double margin = opt.kink_factor * opt.h;

  // Analytic pass.
  for (const auto& [name, p] : params) {
    p.ensure_grad_alloc();
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    KinkScope kinks;
    Tensor loss = build_loss();
    if (!std::isfinite(loss.item()))
      throw TrainError("finite_diff_check: loss is not finite at the sample point");
    report.min_kink_distance = kinks.min_distance();
    if (kinks.min_distance() < margin) {
      report.rejected = true;
      return report;
    }
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      p.ensure_grad_alloc();
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    }
  }

  // Numeric probes.
  auto eval = [&](double* slot, double delta) {
    const double saved = *slot;
    *slot = saved + delta;
    double f;
    {
      NoGradGuard ng;
      KinkScope kinks;
      f = build_loss().item();
      if (kinks.min_distance() < report.min_kink_distance)
        report.min_kink_distance = kinks.min_distance();
      if (kinks.min_distance() < margin) report.rejected = true;
    }
    *slot = saved;
    if (!std::isfinite(f))
      throw TrainError("finite_diff_check: loss is not finite at a probe point");
    return f;
  };

  report.max_rel_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;  // non-const handle for in-place probes
    GradCheckReport::ParamEntry entry;
    entry.name = params[pi].first;
    auto vals = p.values();
    for (int64_t j = 0; j < p.numel(); ++j) {
      double* slot = &vals[static_cast<size_t>(j)];
      const double fp = eval(slot, opt.h);
      const double fm = eval(slot, -opt.h);
      if (report.rejected) return report;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[pi][static_cast<size_t>(j)];
      const double abs_err = std::fabs(a - numeric);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), opt.denom_floor});
      const double rel = abs_err / denom;
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace fsrl
