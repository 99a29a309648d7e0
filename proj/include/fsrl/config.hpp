#pragma once

#include <string>
#include <vector>

#include "fsrl/analysis.hpp"
#include "fsrl/lm.hpp"
#include "fsrl/prefdata.hpp"
#include "fsrl/sae.hpp"
#include "fsrl/simpo.hpp"

namespace fsrl {

struct AnalysisConfig {
  double mask_ratio = 2.0;
  int64_t bootstrap_resamples = 1000;
  std::vector<double> topk_pcts = {0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4, 12.8, 100.0};
  int64_t max_mask_docs = 512;

  void validate() const;
};

// Full run configuration. JSON file sections mirror the fields; every key is
// validated against this schema and unknown keys are rejected. CLI flags
// (--seed, --out, --kernels, ...) override file values. The JSON snapshot
// embedded in artifacts excludes output paths so identical configurations
// produce identical snapshots.
struct RunConfig {
  uint64_t seed = 1;
  std::string kernels = "parallel";  // serial | parallel
  LMConfig lm;                        // vocab_size comes from the tokenizer
  PretrainConfig lm_train;
  DataSpec data;
  SAETrainConfig sae_train;
  SimPOConfig simpo;
  std::string adapter_variant = "soft_threshold";
  double baseline_lr = 1e-4;  // default keeps the adapter:baseline lr ratio of 25
  int64_t baseline_epochs = 2;
  AnalysisConfig analysis;
  SweepSpec sweep;

  static RunConfig defaults();
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  std::string to_json_string() const;  // canonical (sorted keys)
  void validate() const;
};

}  // namespace fsrl
