#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/rng.hpp"
#include "fsrl/tensor.hpp"

namespace fsrl {

struct LMConfig {
  int64_t vocab_size = 0;
  int64_t d_model = 32;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_mlp = 128;
  int64_t context_len = 48;
  int64_t hook_layer = 2;  // residual stream INPUT to this layer is the hook

  void validate() const;
};

enum class Role : uint8_t { prompt, response };

struct TokenSequence {
  std::vector<int32_t> tokens;
  std::vector<Role> roles;

  void validate(int64_t vocab_size) const;
  int64_t response_count() const;
};

// Small pre-layernorm decoder-only transformer with learned positional
// embeddings. Acts as the frozen base model; the residual stream entering
// layer hook_layer is exposed for SAE training and steering.
struct LM {
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_g, ln2_b;
    Tensor w_fc1, b_fc1, w_fc2, b_fc2;
  };

  LMConfig cfg;
  Tensor tok_emb;  // [vocab, d_model]
  Tensor pos_emb;  // [context_len, d_model]
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;
  Tensor w_un, b_un;  // unembedding [d_model, vocab], [vocab]
  bool frozen = false;

  static LM init(const LMConfig& cfg, Rng& rng);

  void freeze();
  LM thawed_copy() const;  // trainable deep copy; the original stays frozen
  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  uint64_t param_hash() const;
};

// Maps the hook activation [seq, d_model] to its replacement (same shape).
// Gradients flow through the intervention into its own parameters; frozen
// model parameters receive none.
using Intervention = std::function<Tensor(const Tensor& hook_acts)>;

struct ForwardResult {
  Tensor logits;     // [seq, vocab]
  Tensor hook_acts;  // [seq, d_model], pre-intervention
};

ForwardResult forward_with_hook(const LM& lm, std::span<const int32_t> tokens,
                                const Intervention* intervention = nullptr);

// (1/|y|) * sum over response-role positions t>=1 of
// log softmax(logits[t-1])[tokens[t]], natural log. Position 0 must be a
// prompt token so every response token is scorable.
Tensor sequence_avg_logprob(const LM& lm, const TokenSequence& seq,
                            const Intervention* intervention = nullptr);

struct PretrainConfig {
  int64_t steps = 1500;
  int64_t batch = 8;
  double lr = 3e-3;
  int64_t eval_every = 100;
  double heldout_frac = 0.1;
};

struct PretrainMetrics {
  std::vector<std::pair<int64_t, double>> train_ce;    // (step, batch CE)
  std::vector<std::pair<int64_t, double>> heldout_ce;  // (step, held-out CE)
  double init_heldout_ce = 0.0;
  double final_heldout_ce = 0.0;
};

struct PretrainResult {
  LM lm;  // frozen
  PretrainMetrics metrics;
};

// Trains from scratch on the corpus (one token sequence per document) and
// freezes the result. Fails if the held-out cross-entropy does not drop
// strictly below that of the random initialization, or on divergence.
PretrainResult pretrain_lm(const std::vector<std::vector<int32_t>>& corpus, const LMConfig& cfg,
                           const PretrainConfig& train, uint64_t seed);

// Mean next-token cross-entropy of the model over the given sequences.
double corpus_cross_entropy(const LM& lm, std::span<const std::vector<int32_t>> docs);

}  // namespace fsrl
