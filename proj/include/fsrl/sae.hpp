#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/lm.hpp"
#include "fsrl/rng.hpp"
#include "fsrl/tensor.hpp"

namespace fsrl {

// Sparse autoencoder over hook activations:
//   f = relu(W_enc x + b_enc),  x_hat = W_dec f + b_dec,
//   loss = ||x - x_hat||^2 + alpha ||f||_1.
// Decoder columns are renormalized to unit L2 norm after every optimizer
// step so the L1 penalty cannot be dodged by scaling.
struct SparseAutoencoder {
  Tensor W_enc;  // [d_sae, d]
  Tensor b_enc;  // [d_sae]
  Tensor W_dec;  // [d, d_sae]
  Tensor b_dec;  // [d]
  int64_t d = 0;
  int64_t d_sae = 0;

  static SparseAutoencoder init(int64_t d, int64_t d_sae, Rng& rng);

  // x: [m, d] rows of activations -> [m, d_sae]; entries are >= 0.
  Tensor encode(const Tensor& x) const;
  // f: [m, d_sae] -> [m, d]; linear.
  Tensor decode(const Tensor& f) const;

  void renorm_decoder_columns();
  double max_decoder_column_norm_error() const;  // max_i | ||col_i|| - 1 |

  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  uint64_t param_hash() const;
  void set_trainable(bool trainable);
};

// Mean over rows of per-sample reconstruction + sparsity loss.
Tensor sae_loss(const SparseAutoencoder& sae, const Tensor& x, double alpha_sae);

struct SAETrainConfig {
  double alpha_sae = 3e-4;
  double lr = 1e-3;
  int64_t steps = 1500;
  int64_t batch = 64;
  int64_t d_sae_ratio = 8;  // d_sae = ratio * d_model
  int64_t eval_every = 100;
  double heldout_frac = 0.1;

  void validate() const;
};

struct SAEMetrics {
  std::vector<std::pair<int64_t, double>> train_loss;  // (step, batch objective)
  struct Eval {
    int64_t step;
    double mse;      // held-out mean squared error per activation entry
    double mean_l0;  // held-out mean count of strictly positive features
  };
  std::vector<Eval> evals;
  double init_mse = 0.0;
  double final_mse = 0.0;
  double final_mean_l0 = 0.0;
};

struct SAETrainResult {
  SparseAutoencoder sae;
  SAEMetrics metrics;
};

// Collects hook activations from all token positions of the corpus under the
// frozen model (no steering), one row per token.
std::vector<std::vector<double>> collect_hook_activations(
    const LM& lm, const std::vector<std::vector<int32_t>>& corpus);

// Trains on shuffled activations gathered from the corpus. Fails unless the
// final held-out MSE is below half the initial MSE, or on divergence.
SAETrainResult train_sae(const LM& lm, const std::vector<std::vector<int32_t>>& corpus,
                         const SAETrainConfig& cfg, uint64_t seed);

}  // namespace fsrl
