#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fsrl/adapter.hpp"
#include "fsrl/lm.hpp"
#include "fsrl/prefdata.hpp"
#include "fsrl/sae.hpp"

namespace fsrl {

// Length-normalized reference-free preference loss
//   -log sigmoid( beta/|y_w| log pi(y_w|x) - beta/|y_l| log pi(y_l|x) - gamma )
// with gamma = gamma_ratio * beta.
struct SimPOConfig {
  double beta = 10.0;
  double gamma_ratio = 0.5;
  double alpha_steer = 0.1;  // coefficient of the steering sparsity penalty
  double lr = 2.5e-3;
  int64_t epochs = 2;
  int64_t batch = 8;
  double warmup_ratio = 0.1;  // cosine schedule after linear warmup
  int64_t eval_every = 50;
  double ste_eps = 1e-3;          // rectangle-kernel width for jump_relu L0
  double theta_lr_scale = 1000.0; // dual-lr: thresholds need a much larger step

  double gamma() const { return gamma_ratio * beta; }
  void validate() const;
};

// Margin-level loss on plain doubles (numerically stable softplus form).
double simpo_loss_from_margins(double avg_lp_chosen, double avg_lp_rejected, double beta,
                               double gamma);

// Optional edit of the steering vector before decoding (ablation masks,
// top-k truncation). Applied per forward to v [seq, d_sae].
using SteeringTransform = std::function<Tensor(const Tensor& v)>;

struct SteeringStats {
  int64_t tokens = 0;
  int64_t nonzeros = 0;    // exact nonzero entries over all tokens
  double l1_sum = 0.0;
  double mean_l0() const { return tokens ? static_cast<double>(nonzeros) / tokens : 0.0; }
  double mean_l1() const { return tokens ? l1_sum / static_cast<double>(tokens) : 0.0; }
};

// Graph handles exported by the steering intervention, for penalty terms.
struct SteeredForwardHooks {
  std::vector<Tensor> steering_vectors;  // v per forward (post-transform)
  std::vector<Tensor> preactivations;    // z per forward
  SteeringStats stats;
};

Intervention make_steering_intervention(const SparseAutoencoder* sae,
                                        const SteeringAdapter* adapter,
                                        const SteeringTransform* vtransform = nullptr,
                                        SteeredForwardHooks* hooks = nullptr);

struct BatchLossParts {
  Tensor preference;  // -mean log sigmoid(margin)
  Tensor total;       // preference + alpha_steer * penalty (== preference unsteered)
  double mean_l0 = 0.0;
  double mean_l1 = 0.0;
  int64_t tokens = 0;
};

// Builds the differentiable batch objective. sae/adapter may be null for the
// unsteered model (baseline loss reporting or full fine-tuning). Steering is
// applied at every token position of prompt and response.
BatchLossParts simpo_batch_loss(const LM& lm, const SparseAutoencoder* sae,
                                const SteeringAdapter* adapter,
                                std::span<const PreferenceTriplet> batch,
                                const SimPOConfig& cfg);

struct EvalResult {
  double loss = 0.0;
  double adapter_mean_l0 = 0.0;
  double adapter_mean_l1 = 0.0;
  int64_t tokens = 0;
};

// Mean SimPO loss over a dataset (no sparsity penalty), no gradients.
EvalResult eval_simpo_loss(const LM& lm, const SparseAutoencoder* sae,
                           const SteeringAdapter* adapter,
                           std::span<const PreferenceTriplet> data, const SimPOConfig& cfg,
                           const SteeringTransform* vtransform = nullptr);

struct TrainStepRow {
  int64_t step;
  double loss;  // total objective on the batch
  double l0;    // mean steering l0 per token on the batch
  double l1;    // mean steering l1 per token on the batch
};

struct AdapterTrainMetrics {
  std::vector<TrainStepRow> steps;
  double unsteered_val_loss = 0.0;
  double final_val_loss = 0.0;
  double final_val_mean_l0 = 0.0;
  double final_val_mean_l1 = 0.0;
  bool improved = false;  // final_val_loss < unsteered_val_loss
};

struct TrainAdapterResult {
  SteeringAdapter adapter;
  AdapterTrainMetrics metrics;
};

// Trains the adapter against SimPO + alpha_steer * sparsity on the frozen
// model/SAE. Fails on divergence, on epochs < 1, or (when
// require_improvement) if the final validation loss does not drop strictly
// below the unsteered model's. Any mutation of frozen parameters is a fatal
// invariant breach.
TrainAdapterResult train_adapter(const LM& lm, const SparseAutoencoder& sae,
                                 SteeringAdapter adapter,
                                 std::span<const PreferenceTriplet> train_set,
                                 std::span<const PreferenceTriplet> val_set,
                                 const SimPOConfig& cfg, uint64_t seed,
                                 bool require_improvement = true);

struct BaselineTrainMetrics {
  std::vector<TrainStepRow> steps;
  double init_val_loss = 0.0;
  double final_val_loss = 0.0;
};

struct BaselineTrainResult {
  LM model;  // fine-tuned thawed copy; the input model is untouched
  BaselineTrainMetrics metrics;
};

// Full-model SimPO fine-tune of a thawed copy. The default learning rate sits
// a factor 25 below the adapter's, mirroring the full-model/adapter ratio.
BaselineTrainResult train_full_baseline(const LM& frozen_lm,
                                        std::span<const PreferenceTriplet> train_set,
                                        std::span<const PreferenceTriplet> val_set,
                                        const SimPOConfig& cfg, double baseline_lr,
                                        uint64_t seed);

}  // namespace fsrl
