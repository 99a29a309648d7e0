#include "fsrl/gradsuite.hpp"

#include <chrono>

#include "fsrl/simpo.hpp"
#include "fsrl/tokenizer.hpp"

namespace fsrl {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_s(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr int kMaxResamples = 64;

}  // namespace

GradSuiteResult run_sae_loss_grad_suite(uint64_t seed, int64_t instances, double tol) {
  const auto t0 = Clock::now();
  GradSuiteResult result{.name = "sae_loss", .instances = instances, .tol = tol};
  Rng rng = Rng::stream(seed, "gradsuite-sae");
  const int64_t d = 4, d_sae = 10, batch = 3;

  for (int64_t inst = 0; inst < instances; ++inst) {
    for (int attempt = 0;; ++attempt) {
      SparseAutoencoder sae = SparseAutoencoder::init(d, d_sae, rng);
      // Generic parameter point, not the training init.
      for (auto& [name, p] : sae.named_params())
        for (double& v : p.values()) v = rng.normal(0.0, 0.6);
      Tensor x = Tensor::randn({batch, d}, rng, 1.0);
      auto params = sae.named_params();
      GradCheckReport rep = finite_diff_check(
          [&]() { return sae_loss(sae, x, 0.1); }, params, FdOptions{.tol = tol});
      if (rep.rejected) {
        result.resamples += 1;
        if (attempt >= kMaxResamples)
          throw TrainError("sae grad suite: could not find a kink-safe sample");
        continue;
      }
      result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
      break;
    }
  }
  result.pass = result.max_rel_err <= tol;
  result.seconds = elapsed_s(t0);
  return result;
}

GradSuiteResult run_adapter_simpo_grad_suite(uint64_t seed, int64_t instances, double tol) {
  const auto t0 = Clock::now();
  GradSuiteResult result{.name = "adapter_simpo_l1", .instances = instances, .tol = tol};
  Rng rng = Rng::stream(seed, "gradsuite-adapter");

  LMConfig lmc;
  lmc.vocab_size = CharTokenizer::vocab_size();
  lmc.d_model = 8;
  lmc.n_layers = 2;
  lmc.n_heads = 2;
  lmc.d_mlp = 16;
  lmc.context_len = 16;
  lmc.hook_layer = 1;
  const int64_t d_sae = 20;

  SimPOConfig cfg;
  cfg.alpha_steer = 0.1;

  const std::string alphabet = CharTokenizer::alphabet();
  auto random_text = [&](size_t len) {
    std::string s;
    for (size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.randbelow(alphabet.size())]);
    return s;
  };

  for (int64_t inst = 0; inst < instances; ++inst) {
    for (int attempt = 0;; ++attempt) {
      LM lm = LM::init(lmc, rng);
      lm.freeze();
      SparseAutoencoder sae = SparseAutoencoder::init(lmc.d_model, d_sae, rng);
      sae.set_trainable(false);

      SteeringAdapter adapter =
          SteeringAdapter::init(lmc.d_model, d_sae, AdapterVariant::soft_threshold, rng);
      // A generic operating point: thresholds well away from zero so the
      // dead zone is exercised on both sides.
      for (double& v : adapter.W_a.values()) v = rng.normal(0.0, 0.3);
      for (double& v : adapter.b_a.values()) v = rng.normal(0.0, 0.1);
      for (double& v : adapter.theta.values()) v = rng.uniform(0.05, 0.5);

      PreferenceTriplet t;
      t.prompt = random_text(3);
      t.chosen = random_text(4);
      do {
        t.rejected = random_text(4);
      } while (t.rejected == t.chosen);
      std::vector<PreferenceTriplet> batch = {t};

      auto params = adapter.named_params();
      GradCheckReport rep = finite_diff_check(
          [&]() { return simpo_batch_loss(lm, &sae, &adapter, batch, cfg).total; }, params,
          FdOptions{.tol = tol});
      if (rep.rejected) {
        result.resamples += 1;
        if (attempt >= kMaxResamples)
          throw TrainError("adapter grad suite: could not find a kink-safe sample");
        continue;
      }
      result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
      break;
    }
  }
  result.pass = result.max_rel_err <= tol;
  result.seconds = elapsed_s(t0);
  return result;
}

}  // namespace fsrl
