#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fsrl/adapter.hpp"
#include "fsrl/sae.hpp"

namespace fsrl {

// Empirical verification of the local linear structure of steering: within a
// region where no adapter pre-activation crosses its threshold, the update
// x -> x + W_dec psi(W_a x + b_a) is exactly affine,
//   x_steered = (I + A) x + c,  A = W_dec diag(m) W_a,
// with m the active mask at the reference point; rank(A) <= min(k, d), and
// pushing the update through a downstream linear map W gives the low-rank
// weight update dW = W A.

struct ActiveMask {
  std::vector<uint8_t> m;  // 1 where |z0_i| > theta_i
  int64_t k = 0;
};

struct AffineLocalForm {
  std::vector<double> A;   // [d*d], row-major
  std::vector<double> c;   // [d]
  std::vector<double> x0;  // reference point
  std::vector<double> z0;  // W_a x0 + b_a
  ActiveMask mask;
  // Largest perturbation norm guaranteed not to cross any kink:
  // min_i ||z0_i| - theta_i| / ||row_i(W_a)||_2 over rows with nonzero norm.
  double safe_radius = 0.0;
  int64_t d = 0;
  int64_t d_sae = 0;
};

// Requires the soft_threshold variant. Throws DataError("degenerate
// reference point ...") when some |z0_i| equals theta_i exactly.
AffineLocalForm local_affine_form(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                  std::span<const double> x0);

// Delta(x) = W_dec psi(W_a x + b_a), the steering correction at x.
std::vector<double> steering_delta(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                   std::span<const double> x);

// max_j | Delta(x0+delta)_j - Delta(x0)_j - (A delta)_j |
double affine_identity_error(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                             const AffineLocalForm& form, std::span<const double> delta);

// Numerical rank: count of singular values > tol_dim * sigma_max * 1e-12.
// tol_dim defaults to max(rows, cols) when <= 0.
int64_t numerical_rank(std::span<const double> mat, int64_t rows, int64_t cols,
                       int64_t tol_dim = 0);

struct RankReport {
  int64_t k = 0;
  int64_t numerical_rank = 0;
  int64_t bound = 0;  // min(k, d)
  bool holds = false;
};

RankReport rank_bound_check(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                            std::span<const double> x0);

// dW = W A for a downstream map W [d_out x d]; returned row-major [d_out*d].
std::vector<double> induced_weight_update(std::span<const double> w, int64_t d_out,
                                          const AffineLocalForm& form);

struct TheoryTrial {
  int64_t k = 0;
  int64_t rank_a = 0;
  bool rank_holds = false;
  double affine_max_err = 0.0;
  double safe_radius = 0.0;
  int64_t rank_wa = 0;
  int64_t wa_bound = 0;  // min(d_out, k)
  bool wa_holds = false;
};

struct TheoryRunResult {
  std::vector<TheoryTrial> trials;
  int64_t rank_violations = 0;
  int64_t wa_violations = 0;
  double max_affine_err = 0.0;
  double mean_k = 0.0;
  int64_t d_sae = 0;
  // Effective rank across inputs, estimated as the numerical rank of the
  // span of sampled vec(dW) matrices.
  int64_t r_eff = 0;
  int64_t r_eff_samples = 0;
};

// Runs the full suite on random reference points (resampling degenerate
// ones): affine identity inside safe_radius, rank(A) <= min(k,d), and
// rank(W A) <= min(d_out, k) for a random downstream W with d_out = d/2.
TheoryRunResult run_theory_trials(const SparseAutoencoder& sae, const SteeringAdapter& adapter,
                                  uint64_t seed, int64_t trials, int64_t deltas_per_trial);

}  // namespace fsrl
