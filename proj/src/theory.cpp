#include "fsrl/theory.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

namespace fsrl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<double> adapter_preact(const SteeringAdapter& adapter, std::span<const double> x) {
  std::vector<double> z(static_cast<size_t>(adapter.d_sae), 0.0);
  const auto wa = adapter.W_a.values();
  const auto ba = adapter.b_a.values();
  for (int64_t i = 0; i < adapter.d_sae; ++i) {
    double acc = ba[static_cast<size_t>(i)];
    const double* row = wa.data() + i * adapter.d;
    for (int64_t j = 0; j < adapter.d; ++j) acc += row[j] * x[static_cast<size_t>(j)];
    z[static_cast<size_t>(i)] = acc;
  }
  return z;
}

double soft_thresh(double z, double t) {
  const double mag = std::fabs(z) - t;
  return mag > 0.0 ? (z > 0.0 ? mag : -mag) : 0.0;
}

}  // namespace

std::vector<double> steering_delta(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                   std::span<const double> x) {
  std::vector<double> z = adapter_preact(adapter, x);
  const auto th = adapter.theta.values();
  std::vector<double> v(z.size());
  for (size_t i = 0; i < z.size(); ++i) v[i] = soft_thresh(z[i], th[i]);
  std::vector<double> delta(static_cast<size_t>(sae.d), 0.0);
  const auto wd = sae.W_dec.values();
  for (int64_t r = 0; r < sae.d; ++r) {
    double acc = 0.0;
    const double* row = wd.data() + r * sae.d_sae;
    for (int64_t i = 0; i < sae.d_sae; ++i) acc += row[i] * v[static_cast<size_t>(i)];
    delta[static_cast<size_t>(r)] = acc;
  }
  return delta;
}

AffineLocalForm local_affine_form(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                  std::span<const double> x0) {
  if (adapter.variant != AdapterVariant::soft_threshold)
    throw ConfigError("local_affine_form: requires the soft_threshold adapter variant");
  if (static_cast<int64_t>(x0.size()) != sae.d || adapter.d != sae.d ||
      adapter.d_sae != sae.d_sae)
    throw ShapeError("local_affine_form: dimension mismatch between sae, adapter and x0");

  AffineLocalForm form;
  form.d = sae.d;
  form.d_sae = sae.d_sae;
  form.x0.assign(x0.begin(), x0.end());
  form.z0 = adapter_preact(adapter, x0);

  const auto th = adapter.theta.values();
  form.mask.m.assign(static_cast<size_t>(sae.d_sae), 0);
  for (int64_t i = 0; i < sae.d_sae; ++i) {
    const double dist = std::fabs(form.z0[static_cast<size_t>(i)]) - th[static_cast<size_t>(i)];
    if (dist == 0.0)
      throw DataError(strprintf(
          "degenerate reference point: |z0_%lld| equals its threshold exactly",
          static_cast<long long>(i)));
    if (dist > 0.0) {
      form.mask.m[static_cast<size_t>(i)] = 1;
      form.mask.k += 1;
    }
  }

  // A = W_dec diag(m) W_a
  const auto wd = sae.W_dec.values();
  const auto wa = adapter.W_a.values();
  form.A.assign(static_cast<size_t>(sae.d * sae.d), 0.0);
  for (int64_t i = 0; i < sae.d_sae; ++i) {
    if (!form.mask.m[static_cast<size_t>(i)]) continue;
    for (int64_t r = 0; r < sae.d; ++r) {
      const double wdi = wd[static_cast<size_t>(r * sae.d_sae + i)];
      if (wdi == 0.0) continue;
      const double* arow = wa.data() + i * sae.d;
      double* out = form.A.data() + r * sae.d;
      for (int64_t c = 0; c < sae.d; ++c) out[c] += wdi * arow[c];
    }
  }

  // c = W_dec (psi(z0) - diag(m) W_a x0); the decoder bias is dropped under
  // the direction-decoding convention.
  std::vector<double> inner(static_cast<size_t>(sae.d_sae));
  for (int64_t i = 0; i < sae.d_sae; ++i) {
    const double z = form.z0[static_cast<size_t>(i)];
    double val = soft_thresh(z, th[static_cast<size_t>(i)]);
    if (form.mask.m[static_cast<size_t>(i)]) {
      val -= z - adapter.b_a.values()[static_cast<size_t>(i)];  // (W_a x0)_i
    }
    inner[static_cast<size_t>(i)] = val;
  }
  form.c.assign(static_cast<size_t>(sae.d), 0.0);
  for (int64_t r = 0; r < sae.d; ++r) {
    double acc = 0.0;
    const double* row = wd.data() + r * sae.d_sae;
    for (int64_t i = 0; i < sae.d_sae; ++i) acc += row[i] * inner[static_cast<size_t>(i)];
    form.c[static_cast<size_t>(r)] = acc;
  }

  form.safe_radius = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < sae.d_sae; ++i) {
    double sq = 0.0;
    const double* row = wa.data() + i * sae.d;
    for (int64_t j = 0; j < sae.d; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    if (norm == 0.0) continue;  // this coordinate can never cross its kink
    const double dist =
        std::fabs(std::fabs(form.z0[static_cast<size_t>(i)]) - th[static_cast<size_t>(i)]);
    form.safe_radius = std::min(form.safe_radius, dist / norm);
  }
  return form;
}

double affine_identity_error(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                             const AffineLocalForm& form, std::span<const double> delta) {
  if (static_cast<int64_t>(delta.size()) != form.d)
    throw ShapeError("affine_identity_error: delta dimension mismatch");
  std::vector<double> x(form.x0);
  for (size_t j = 0; j < x.size(); ++j) x[j] += delta[j];
  std::vector<double> lhs = steering_delta(sae, adapter, x);
  std::vector<double> base = steering_delta(sae, adapter, form.x0);
  double worst = 0.0;
  for (int64_t r = 0; r < form.d; ++r) {
    double adelta = 0.0;
    const double* arow = form.A.data() + r * form.d;
    for (int64_t c = 0; c < form.d; ++c) adelta += arow[c] * delta[static_cast<size_t>(c)];
    worst = std::max(worst, std::fabs(lhs[static_cast<size_t>(r)] -
                                      base[static_cast<size_t>(r)] - adelta));
  }
  return worst;
}

int64_t numerical_rank(std::span<const double> mat, int64_t rows, int64_t cols,
                       int64_t tol_dim) {
  if (rows <= 0 || cols <= 0 ||
      static_cast<int64_t>(mat.size()) != rows * cols)
    throw ShapeError("numerical_rank: bad matrix dimensions");
  for (double v : mat)
    if (!std::isfinite(v)) throw TrainError("numerical_rank: non-finite entry");
  Eigen::Map<const RowMat> m(mat.data(), rows, cols);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return 0;
  const double smax = sv(0);
  if (smax == 0.0) return 0;
  const double dim = static_cast<double>(tol_dim > 0 ? tol_dim : std::max(rows, cols));
  const double tol = dim * smax * 1e-12;
  int64_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  return rank;
}

RankReport rank_bound_check(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                            std::span<const double> x0) {
  AffineLocalForm form = local_affine_form(sae, adapter, x0);
  RankReport rep;
  rep.k = form.mask.k;
  rep.numerical_rank = numerical_rank(form.A, form.d, form.d,
                                      std::max(form.d, form.d_sae));
  rep.bound = std::min<int64_t>(rep.k, form.d);
  rep.holds = rep.numerical_rank <= rep.bound;
  return rep;
}

std::vector<double> induced_weight_update(std::span<const double> w, int64_t d_out,
                                          const AffineLocalForm& form) {
  if (d_out <= 0 || static_cast<int64_t>(w.size()) != d_out * form.d)
    throw ShapeError(strprintf("induced_weight_update: W must be [%lld x %lld]",
                               static_cast<long long>(d_out),
                               static_cast<long long>(form.d)));
  std::vector<double> dw(static_cast<size_t>(d_out * form.d), 0.0);
  for (int64_t i = 0; i < d_out; ++i) {
    const double* wrow = w.data() + i * form.d;
    double* out = dw.data() + i * form.d;
    for (int64_t l = 0; l < form.d; ++l) {
      const double wil = wrow[l];
      if (wil == 0.0) continue;
      const double* arow = form.A.data() + l * form.d;
      for (int64_t c = 0; c < form.d; ++c) out[c] += wil * arow[c];
    }
  }
  return dw;
}

TheoryRunResult run_theory_trials(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                  uint64_t seed, int64_t trials, int64_t deltas_per_trial) {
  if (trials < 1) throw ConfigError("run_theory_trials: trials must be >= 1");
  Rng rng = Rng::stream(seed, "theory-trials");
  const int64_t d = sae.d;
  const int64_t d_out = std::max<int64_t>(1, d / 2);

  TheoryRunResult result;
  result.d_sae = sae.d_sae;
  std::vector<std::vector<double>> dw_samples;

  for (int64_t t = 0; t < trials; ++t) {
    // Degenerate reference points have measure zero; resample if hit.
    AffineLocalForm form;
    for (int attempt = 0;; ++attempt) {
      std::vector<double> x0(static_cast<size_t>(d));
      for (double& v : x0) v = rng.normal();
      try {
        form = local_affine_form(sae, adapter, x0);
        break;
      } catch (const DataError&) {
        if (attempt > 64) throw;
      }
    }

    TheoryTrial trial;
    trial.k = form.mask.k;
    trial.safe_radius = form.safe_radius;
    trial.rank_a = numerical_rank(form.A, d, d, std::max(d, sae.d_sae));
    trial.rank_holds = trial.rank_a <= std::min<int64_t>(trial.k, d);

    const double r_max = std::isfinite(form.safe_radius)
                             ? 0.999 * form.safe_radius
                             : 1.0;
    for (int64_t j = 0; j < deltas_per_trial; ++j) {
      std::vector<double> delta(static_cast<size_t>(d));
      double sq = 0.0;
      for (double& v : delta) {
        v = rng.normal();
        sq += v * v;
      }
      const double norm = std::sqrt(sq);
      const double target = rng.uniform01() * r_max;
      if (norm > 0.0)
        for (double& v : delta) v *= target / norm;
      trial.affine_max_err =
          std::max(trial.affine_max_err, affine_identity_error(sae, adapter, form, delta));
    }

    std::vector<double> w(static_cast<size_t>(d_out * d));
    for (double& v : w) v = rng.normal();
    std::vector<double> dw = induced_weight_update(w, d_out, form);
    trial.rank_wa = numerical_rank(dw, d_out, d, std::max(d_out, d));
    trial.wa_bound = std::min<int64_t>(d_out, trial.k);
    trial.wa_holds = trial.rank_wa <= trial.wa_bound;

    if (!trial.rank_holds) result.rank_violations += 1;
    if (!trial.wa_holds) result.wa_violations += 1;
    result.max_affine_err = std::max(result.max_affine_err, trial.affine_max_err);
    result.mean_k += static_cast<double>(trial.k);
    if (dw_samples.size() < 64) dw_samples.push_back(std::move(dw));
    result.trials.push_back(trial);
  }
  result.mean_k /= static_cast<double>(trials);

  // r_eff over sampled inputs: rank of the stacked vec(dW) rows.
  result.r_eff_samples = static_cast<int64_t>(dw_samples.size());
  if (!dw_samples.empty()) {
    const int64_t cols = d_out * d;
    std::vector<double> stacked;
    stacked.reserve(dw_samples.size() * static_cast<size_t>(cols));
    for (const auto& row : dw_samples) stacked.insert(stacked.end(), row.begin(), row.end());
    result.r_eff = numerical_rank(stacked, result.r_eff_samples, cols);
  }
  return result;
}

}  // namespace fsrl
