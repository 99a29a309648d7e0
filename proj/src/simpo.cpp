#include "fsrl/simpo.hpp"

#include <algorithm>
#include <cmath>

#include "fsrl/opt.hpp"

namespace fsrl {

void SimPOConfig::validate() const {
  if (beta <= 0.0) throw ConfigError("simpo: beta must be > 0");
  if (gamma_ratio < 0.0) throw ConfigError("simpo: gamma_ratio must be >= 0");
  if (alpha_steer < 0.0) throw ConfigError("simpo: alpha_steer must be >= 0");
  if (lr <= 0.0) throw ConfigError("simpo: lr must be > 0");
  if (batch < 1) throw ConfigError("simpo: batch must be >= 1");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
    throw ConfigError("simpo: warmup_ratio must lie in [0,1)");
  if (ste_eps <= 0.0) throw ConfigError("simpo: ste_eps must be > 0");
  if (eval_every < 1) throw ConfigError("simpo: eval_every must be >= 1");
}

double simpo_loss_from_margins(double avg_lp_chosen, double avg_lp_rejected, double beta,
                               double gamma) {
  const double m = beta * (avg_lp_chosen - avg_lp_rejected) - gamma;
  // softplus(-m)
  return m < 0.0 ? -m + std::log1p(std::exp(m)) : std::log1p(std::exp(-m));
}

Intervention make_steering_intervention(const SparseAutoencoder* sae,
                                        const SteeringAdapter* adapter,
                                        const SteeringTransform* vtransform,
                                        SteeredForwardHooks* hooks) {
  if (!sae || !adapter) throw std::invalid_argument("steering intervention: null sae/adapter");
  return [sae, adapter, vtransform, hooks](const Tensor& x) {
    Tensor z = add(matmul(x, transpose(adapter->W_a)), adapter->b_a);
    Tensor v;
    switch (adapter->variant) {
      case AdapterVariant::soft_threshold:
        v = soft_threshold(z, adapter->theta);
        break;
      case AdapterVariant::relu:
        v = relu(z);
        break;
      case AdapterVariant::jump_relu:
        v = jump_relu(z, adapter->theta);
        break;
    }
    if (vtransform) v = (*vtransform)(v);
    if (hooks) {
      hooks->steering_vectors.push_back(v);
      hooks->preactivations.push_back(z);
      hooks->stats.tokens += v.rows();
      for (double e : v.values()) {
        if (e != 0.0) hooks->stats.nonzeros += 1;
        hooks->stats.l1_sum += std::fabs(e);
      }
    }
    return apply_steering_direct(*sae, x, v);
  };
}

BatchLossParts simpo_batch_loss(const LM& lm, const SparseAutoencoder* sae,
                                const SteeringAdapter* adapter,
                                std::span<const PreferenceTriplet> batch,
                                const SimPOConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw DataError("simpo: empty batch");
  if ((sae == nullptr) != (adapter == nullptr))
    throw std::invalid_argument("simpo: sae and adapter must be given together");

  SteeredForwardHooks hooks;
  Intervention iv;
  const Intervention* ivp = nullptr;
  if (adapter) {
    iv = make_steering_intervention(sae, adapter, nullptr, &hooks);
    ivp = &iv;
  }

  Tensor acc = Tensor::scalar(0.0);
  for (const PreferenceTriplet& t : batch) {
    Tensor sw = sequence_avg_logprob(lm, t.chosen_seq(), ivp);
    Tensor sl = sequence_avg_logprob(lm, t.rejected_seq(), ivp);
    Tensor margin = add_scalar(mul_scalar(sub(sw, sl), cfg.beta), -cfg.gamma());
    acc = add(acc, mul_scalar(log_sigmoid(margin), -1.0));
  }

  BatchLossParts parts;
  parts.preference = mul_scalar(acc, 1.0 / static_cast<double>(batch.size()));
  parts.total = parts.preference;
  if (adapter) {
    parts.tokens = hooks.stats.tokens;
    parts.mean_l0 = hooks.stats.mean_l0();
    parts.mean_l1 = hooks.stats.mean_l1();
    Tensor pen_sum = Tensor::scalar(0.0);
    if (adapter->variant == AdapterVariant::jump_relu) {
      for (const Tensor& z : hooks.preactivations)
        pen_sum = add(pen_sum, ste_l0(z, adapter->theta, cfg.ste_eps));
    } else {
      for (const Tensor& v : hooks.steering_vectors)
        pen_sum = add(pen_sum, steering_l1_t(v));
    }
    Tensor penalty = mul_scalar(pen_sum, 1.0 / static_cast<double>(hooks.stats.tokens));
    parts.total = add(parts.preference, mul_scalar(penalty, cfg.alpha_steer));
  }
  return parts;
}

EvalResult eval_simpo_loss(const LM& lm, const SparseAutoencoder* sae,
                           const SteeringAdapter* adapter,
                           std::span<const PreferenceTriplet> data, const SimPOConfig& cfg,
                           const SteeringTransform* vtransform) {
  cfg.validate();
  if (data.empty()) throw DataError("eval: empty dataset");
  if ((sae == nullptr) != (adapter == nullptr))
    throw std::invalid_argument("eval: sae and adapter must be given together");
  NoGradGuard ng;
  SteeredForwardHooks hooks;
  Intervention iv;
  const Intervention* ivp = nullptr;
  if (adapter) {
    iv = make_steering_intervention(sae, adapter, vtransform, &hooks);
    ivp = &iv;
  }
  double total = 0.0;
  for (const PreferenceTriplet& t : data) {
    const double sw = sequence_avg_logprob(lm, t.chosen_seq(), ivp).item();
    const double sl = sequence_avg_logprob(lm, t.rejected_seq(), ivp).item();
    total += simpo_loss_from_margins(sw, sl, cfg.beta, cfg.gamma());
    if (!std::isfinite(total)) throw TrainError("eval: non-finite log-probabilities");
  }
  EvalResult r;
  r.loss = total / static_cast<double>(data.size());
  r.adapter_mean_l0 = hooks.stats.mean_l0();
  r.adapter_mean_l1 = hooks.stats.mean_l1();
  r.tokens = hooks.stats.tokens;
  return r;
}

namespace {

std::vector<size_t> epoch_order(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

}  // namespace

TrainAdapterResult train_adapter(const LM& lm, const SparseAutoencoder& sae,
                                 SteeringAdapter adapter,
                                 std::span<const PreferenceTriplet> train_set,
                                 std::span<const PreferenceTriplet> val_set,
                                 const SimPOConfig& cfg, uint64_t seed,
                                 bool require_improvement) {
  cfg.validate();
  if (cfg.epochs < 1)
    throw ConfigError("train_adapter: epochs must be >= 1 (adapter would be unchanged)");
  if (train_set.empty() || val_set.empty())
    throw DataError("train_adapter: empty train or validation set");
  if (!lm.frozen) throw TrainError("train_adapter: the model must be frozen");
  if (adapter.d != lm.cfg.d_model || adapter.d != sae.d || adapter.d_sae != sae.d_sae)
    throw ShapeError("train_adapter: adapter/sae/model dimensions disagree");

  const uint64_t lm_hash = lm.param_hash();
  const uint64_t sae_hash = sae.param_hash();

  AdapterTrainMetrics metrics;
  metrics.unsteered_val_loss = eval_simpo_loss(lm, nullptr, nullptr, val_set, cfg).loss;

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(train_set.size()) + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;
  AdamConfig acfg{.lr = cfg.lr,
                  .total_steps = total_steps,
                  .warmup_ratio = cfg.warmup_ratio};
  Adam adam(adapter.named_params(), acfg);
  if (adapter.variant == AdapterVariant::jump_relu)
    adam.set_lr_scale("theta", cfg.theta_lr_scale);

  Rng batch_rng = Rng::stream(seed, "adapter-batches");
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order = epoch_order(train_set.size(), batch_rng);
    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.batch)) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch));
      std::vector<PreferenceTriplet> batch;
      batch.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) batch.push_back(train_set[order[i]]);

      Tape tape;
      BatchLossParts parts = simpo_batch_loss(lm, &sae, &adapter, batch, cfg);
      const double loss_v = parts.total.item();
      if (!std::isfinite(loss_v))
        throw TrainError(strprintf("train_adapter diverged at step %lld",
                                   static_cast<long long>(step + 1)));
      tape.backward(parts.total);
      adam.step();
      adapter.clamp_theta();
      ++step;
      metrics.steps.push_back({step, loss_v, parts.mean_l0, parts.mean_l1});
    }
  }

  if (lm.param_hash() != lm_hash || sae.param_hash() != sae_hash)
    throw std::logic_error(
        "train_adapter: frozen model/SAE parameters changed during training "
        "(fatal invariant breach)");

  EvalResult final_eval = eval_simpo_loss(lm, &sae, &adapter, val_set, cfg);
  metrics.final_val_loss = final_eval.loss;
  metrics.final_val_mean_l0 = final_eval.adapter_mean_l0;
  metrics.final_val_mean_l1 = final_eval.adapter_mean_l1;
  metrics.improved = metrics.final_val_loss < metrics.unsteered_val_loss;
  if (require_improvement && !metrics.improved)
    throw TrainError(strprintf(
        "train_adapter: validation loss %.6f did not improve on the unsteered %.6f",
        metrics.final_val_loss, metrics.unsteered_val_loss));
  return {std::move(adapter), std::move(metrics)};
}

BaselineTrainResult train_full_baseline(const LM& frozen_lm,
                                        std::span<const PreferenceTriplet> train_set,
                                        std::span<const PreferenceTriplet> val_set,
                                        const SimPOConfig& cfg, double baseline_lr,
                                        uint64_t seed) {
  cfg.validate();
  if (cfg.epochs < 1) throw ConfigError("train_full_baseline: epochs must be >= 1");
  if (baseline_lr <= 0.0) throw ConfigError("train_full_baseline: lr must be > 0");
  if (train_set.empty() || val_set.empty())
    throw DataError("train_full_baseline: empty train or validation set");

  const uint64_t frozen_hash = frozen_lm.param_hash();
  LM model = frozen_lm.thawed_copy();

  BaselineTrainMetrics metrics;
  metrics.init_val_loss = eval_simpo_loss(model, nullptr, nullptr, val_set, cfg).loss;

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(train_set.size()) + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;
  AdamConfig acfg{.lr = baseline_lr,
                  .total_steps = total_steps,
                  .warmup_ratio = cfg.warmup_ratio};
  Adam adam(model.named_params(), acfg);

  Rng batch_rng = Rng::stream(seed, "baseline-batches");
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order = epoch_order(train_set.size(), batch_rng);
    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.batch)) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch));
      std::vector<PreferenceTriplet> batch;
      batch.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) batch.push_back(train_set[order[i]]);

      Tape tape;
      BatchLossParts parts = simpo_batch_loss(model, nullptr, nullptr, batch, cfg);
      const double loss_v = parts.total.item();
      if (!std::isfinite(loss_v))
        throw TrainError(strprintf("train_full_baseline diverged at step %lld",
                                   static_cast<long long>(step + 1)));
      tape.backward(parts.total);
      adam.step();
      ++step;
      metrics.steps.push_back({step, loss_v, 0.0, 0.0});
    }
  }

  if (frozen_lm.param_hash() != frozen_hash)
    throw std::logic_error("train_full_baseline: the frozen source model changed");

  metrics.final_val_loss = eval_simpo_loss(model, nullptr, nullptr, val_set, cfg).loss;
  if (!(metrics.final_val_loss < metrics.init_val_loss))
    throw TrainError(strprintf(
        "train_full_baseline: validation loss %.6f did not improve on the initial %.6f",
        metrics.final_val_loss, metrics.init_val_loss));
  return {std::move(model), std::move(metrics)};
}

}  // namespace fsrl
