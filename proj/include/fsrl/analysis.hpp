#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsrl/adapter.hpp"
#include "fsrl/lm.hpp"
#include "fsrl/prefdata.hpp"
#include "fsrl/sae.hpp"
#include "fsrl/simpo.hpp"

namespace fsrl {

// ---- feature category masks ----

struct FeatureCategoryMask {
  std::string name;
  std::vector<int64_t> members;  // sorted, unique, < d_sae
};

struct MaskConfig {
  double ratio = 2.0;      // class mean must exceed ratio * elsewhere mean
  int64_t max_docs = 512;  // cap on labeled documents scanned
};

// Ground-truth token classes stand in for an explanation classifier: a
// feature joins category C when its mean SAE activation on class-C tokens
// exceeds ratio times its mean activation elsewhere. Deterministic and
// order-invariant up to rounding.
std::vector<FeatureCategoryMask> derive_category_masks(
    const LM& lm, const SparseAutoencoder& sae, std::span<const PreferenceTriplet> labeled,
    const MaskConfig& cfg);

// Text format: optional leading '#' comment lines (the config snapshot),
// then one "name: sorted indices" line per mask.
void write_masks(const std::string& path, std::span<const FeatureCategoryMask> masks,
                 const std::string& config_snapshot_json = "");
std::vector<FeatureCategoryMask> read_masks(const std::string& path);

// ---- composition (active-feature share per category) ----

struct CompositionValue {
  double proportion = 0.0;  // mean over tokens of |active n mask| / |active|
  int64_t used = 0;
  int64_t skipped = 0;  // tokens with an empty active set
};

CompositionValue composition_metric(std::span<const std::vector<int64_t>> active_sets,
                                    std::span<const int64_t> mask_sorted);

struct CompositionReport {
  std::string context;  // prompt_only | prompt_chosen | prompt_rejected
  std::string mask;
  double sae_baseline_pct = 0.0;
  double baseline_se_pct = 0.0;
  double steered_pct = 0.0;
  double steered_se_pct = 0.0;
  double relative_change_pct = 0.0;
  double relative_change_se_pct = 0.0;
  int64_t tokens = 0;
  int64_t skipped_baseline = 0;
  int64_t skipped_steered = 0;
  bool valid = false;
  std::string note;  // reason when not valid
};

// Per context and mask: share of SAE-active features (f_i > 0, unsteered
// model) in the mask vs share of adapter-active features (v_i != 0), with
// token-level bootstrap standard errors and multiplicative relative change.
std::vector<CompositionReport> composition_report(
    const LM& lm, const SparseAutoencoder& sae, const SteeringAdapter& adapter,
    std::span<const PreferenceTriplet> data, std::span<const FeatureCategoryMask> masks,
    int64_t bootstrap_resamples, uint64_t seed);

// ---- causal category ablation ----

struct AblationRow {
  std::string condition;  // "none", mask names, "union", "all_features"
  int64_t features_ablated = 0;
  double loss = 0.0;
  double loss_per_feature = 0.0;
  bool has_loss_per_feature = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double unsteered_loss = 0.0;
  double full_loss = 0.0;
  // L(A u B) - L(A) - L(B) + L(full): the pairwise interaction term,
  // reported (not sign-asserted) when exactly two masks are given.
  double interaction = 0.0;
  bool has_interaction = false;
};

AblationResult ablate_categories(const LM& lm, const SparseAutoencoder& sae,
                                 const SteeringAdapter& adapter,
                                 std::span<const PreferenceTriplet> val_set,
                                 std::span<const FeatureCategoryMask> masks,
                                 const SimPOConfig& cfg);

// Steering transform that zeroes the listed features (empty = identity).
SteeringTransform make_ablation_transform(std::vector<int64_t> features, int64_t d_sae);

// ---- static top-k% baseline ----

struct TopkRow {
  double k_pct = 0.0;
  int64_t quota = 0;     // ceil(k% * d_sae) entries kept per token
  double mean_l0 = 0.0;  // effective nonzeros after truncation
  double loss = 0.0;
};

struct TopkResult {
  std::vector<TopkRow> curve;
  double full_loss = 0.0;
  double dynamic_loss = 0.0;     // untruncated adapter
  double dynamic_mean_l0 = 0.0;
};

// Keeps the `quota` largest-|v_i| entries in each row (ties: lower feature
// index wins) and zeroes the rest. quota >= row width returns v unchanged.
Tensor topk_truncate(const Tensor& v, int64_t quota);

// Keeps the ceil(k% * d_sae) largest-|v_i| entries per token (ties: lower
// feature index wins), zeroes the rest, and evaluates the SimPO loss.
TopkResult static_topk_baseline(const LM& lm, const SparseAutoencoder& sae,
                                const SteeringAdapter& adapter,
                                std::span<const PreferenceTriplet> val_set,
                                std::span<const double> k_pcts, const SimPOConfig& cfg);

// ---- usage distribution ----

struct UsageRow {
  int64_t rank = 0;
  int64_t feature = 0;
  double freq = 0.0;
};

struct UsageFit {
  int64_t n_nonzero = 0;
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

struct UsageResult {
  std::vector<UsageRow> ranked;  // descending frequency; index ascending on ties
  UsageFit fit;                  // ln(freq) vs rank over nonzero frequencies
};

// Core: rank frequencies and fit the exponential-decay line. Throws unless
// at least two features have nonzero usage.
UsageResult usage_from_frequencies(std::vector<double> freqs);

struct UsageAnalysis {
  std::string context;
  std::string subset;  // "all" or a mask name
  UsageResult result;
  bool valid = false;
  std::string note;
};

struct UsageSummary {
  double adapter_mean_l0 = 0.0;
  double sae_mean_l0 = 0.0;  // reported side by side, per the analysis contract
  int64_t tokens = 0;
};

struct UsageReport {
  std::vector<UsageAnalysis> analyses;
  UsageSummary summary;
};

UsageReport analyze_usage(const LM& lm, const SparseAutoencoder& sae,
                          const SteeringAdapter& adapter,
                          std::span<const PreferenceTriplet> data,
                          std::span<const FeatureCategoryMask> masks);

// ---- sweeps ----

struct SweepSpec {
  std::string kind;  // "alpha_steer" | "layer" | "variant"
  std::vector<double> numeric_values;      // alpha_steer / layer values
  std::vector<std::string> string_values;  // variant names
  int64_t epochs = 1;  // training epochs per sweep run
};

struct SweepRow {
  std::string label;
  double final_val_loss = 0.0;
  double mean_l0 = 0.0;
  std::string status;  // "ok" or "error: ..."
};

// One adapter trained per configuration with a fixed seed; failures are
// recorded and the sweep continues. Layer sweeps retrain an SAE at each
// intervention layer from the corpus.
std::vector<SweepRow> run_sweep(const LM& lm, const SparseAutoencoder* sae,
                                const std::vector<std::vector<int32_t>>& corpus,
                                std::span<const PreferenceTriplet> train_set,
                                std::span<const PreferenceTriplet> val_set,
                                const SimPOConfig& base_cfg, const SAETrainConfig& sae_cfg,
                                const SweepSpec& spec, uint64_t seed);

}  // namespace fsrl
