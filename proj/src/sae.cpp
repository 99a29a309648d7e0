#include "fsrl/sae.hpp"

#include <algorithm>
#include <cmath>

#include "fsrl/opt.hpp"

namespace fsrl {

SparseAutoencoder SparseAutoencoder::init(int64_t d, int64_t d_sae, Rng& rng) {
  if (d <= 0 || d_sae <= d)
    throw ConfigError(strprintf("sae: need d_sae > d > 0, got d=%lld d_sae=%lld",
                                static_cast<long long>(d), static_cast<long long>(d_sae)));
  SparseAutoencoder sae;
  sae.d = d;
  sae.d_sae = d_sae;
  sae.W_dec = Tensor::randn({d, d_sae}, rng, 1.0, true);
  sae.renorm_decoder_columns();
  // Encoder starts as the decoder transpose, the usual tied init.
  std::vector<double> enc(static_cast<size_t>(d_sae * d));
  for (int64_t i = 0; i < d_sae; ++i)
    for (int64_t j = 0; j < d; ++j)
      enc[static_cast<size_t>(i * d + j)] = sae.W_dec.at(j, i);
  sae.W_enc = Tensor::from_values({d_sae, d}, std::move(enc), true);
  sae.b_enc = Tensor::zeros({d_sae}, true);
  sae.b_dec = Tensor::zeros({d}, true);
  return sae;
}

Tensor SparseAutoencoder::encode(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != d)
    throw ShapeError(strprintf("sae encode: expected [m,%lld], got %s",
                               static_cast<long long>(d), fmt_shape(x.shape()).c_str()));
  return relu(add(matmul(x, transpose(W_enc)), b_enc));
}

Tensor SparseAutoencoder::decode(const Tensor& f) const {
  if (f.rank() != 2 || f.dim(1) != d_sae)
    throw ShapeError(strprintf("sae decode: expected [m,%lld], got %s",
                               static_cast<long long>(d_sae), fmt_shape(f.shape()).c_str()));
  return add(matmul(f, transpose(W_dec)), b_dec);
}

void SparseAutoencoder::renorm_decoder_columns() {
  auto w = W_dec.values();
  for (int64_t i = 0; i < d_sae; ++i) {
    double sq = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = w[static_cast<size_t>(j * d_sae + i)];
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm < 1e-30) continue;  // a zero direction cannot be normalized
    const double inv = 1.0 / norm;
    for (int64_t j = 0; j < d; ++j) w[static_cast<size_t>(j * d_sae + i)] *= inv;
  }
}

double SparseAutoencoder::max_decoder_column_norm_error() const {
  auto w = W_dec.values();
  double worst = 0.0;
  for (int64_t i = 0; i < d_sae; ++i) {
    double sq = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = w[static_cast<size_t>(j * d_sae + i)];
      sq += v * v;
    }
    worst = std::max(worst, std::fabs(std::sqrt(sq) - 1.0));
  }
  return worst;
}

std::vector<std::pair<std::string, Tensor>> SparseAutoencoder::named_params() {
  return {{"W_enc", W_enc}, {"b_enc", b_enc}, {"W_dec", W_dec}, {"b_dec", b_dec}};
}

std::vector<std::pair<std::string, Tensor>> SparseAutoencoder::named_params() const {
  return const_cast<SparseAutoencoder*>(this)->named_params();
}

uint64_t SparseAutoencoder::param_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : named_params()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(p.values(), h);
  }
  return h;
}

void SparseAutoencoder::set_trainable(bool trainable) {
  for (auto& [name, p] : named_params()) {
    p.set_requires_grad(trainable);
    if (!trainable) p.drop_grad();
  }
}

Tensor sae_loss(const SparseAutoencoder& sae, const Tensor& x, double alpha_sae) {
  if (alpha_sae < 0.0) throw ConfigError("sae_loss: alpha_sae must be >= 0");
  const int64_t m = x.rows();
  Tensor f = sae.encode(x);
  Tensor xhat = sae.decode(f);
  Tensor diff = sub(x, xhat);
  Tensor rec = sum(mul(diff, diff));
  Tensor l1 = sum(abs(f));
  return mul_scalar(add(rec, mul_scalar(l1, alpha_sae)), 1.0 / static_cast<double>(m));
}

void SAETrainConfig::validate() const {
  if (alpha_sae < 0.0) throw ConfigError("sae_train: alpha must be >= 0");
  if (lr <= 0.0 || steps < 1 || batch < 1 || d_sae_ratio < 2 || eval_every < 1)
    throw ConfigError("sae_train: lr/steps/batch/d_sae_ratio/eval_every out of range");
  if (heldout_frac <= 0.0 || heldout_frac >= 0.5)
    throw ConfigError("sae_train: heldout_frac out of (0,0.5)");
}

std::vector<std::vector<double>> collect_hook_activations(
    const LM& lm, const std::vector<std::vector<int32_t>>& corpus) {
  NoGradGuard ng;
  std::vector<std::vector<double>> rows;
  const int64_t d = lm.cfg.d_model;
  for (const auto& doc : corpus) {
    if (doc.empty()) continue;
    const int64_t n = std::min<int64_t>(static_cast<int64_t>(doc.size()), lm.cfg.context_len);
    std::span<const int32_t> ids(doc.data(), static_cast<size_t>(n));
    ForwardResult fr = forward_with_hook(lm, ids);
    const auto acts = fr.hook_acts.values();
    for (int64_t t = 0; t < n; ++t)
      rows.emplace_back(acts.begin() + t * d, acts.begin() + (t + 1) * d);
  }
  return rows;
}

namespace {

Tensor rows_to_tensor(const std::vector<std::vector<double>>& pool,
                      std::span<const size_t> which, int64_t d) {
  std::vector<double> flat;
  flat.reserve(which.size() * static_cast<size_t>(d));
  for (size_t idx : which) flat.insert(flat.end(), pool[idx].begin(), pool[idx].end());
  return Tensor::from_values({static_cast<int64_t>(which.size()), d}, std::move(flat));
}

struct HeldoutStats {
  double mse;
  double mean_l0;
};

HeldoutStats heldout_stats(const SparseAutoencoder& sae,
                           const std::vector<std::vector<double>>& pool,
                           std::span<const size_t> which, int64_t d) {
  NoGradGuard ng;
  Tensor x = rows_to_tensor(pool, which, d);
  Tensor f = sae.encode(x);
  Tensor xhat = sae.decode(f);
  double se = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double e = x.at(i) - xhat.at(i);
    se += e * e;
  }
  int64_t nz = 0;
  for (double v : f.values())
    if (v > 0.0) ++nz;
  const double n_rows = static_cast<double>(x.rows());
  return {se / static_cast<double>(x.numel()), static_cast<double>(nz) / n_rows};
}

}  // namespace

SAETrainResult train_sae(const LM& lm, const std::vector<std::vector<int32_t>>& corpus,
                         const SAETrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int64_t d = lm.cfg.d_model;
  const int64_t d_sae = cfg.d_sae_ratio * d;

  std::vector<std::vector<double>> pool = collect_hook_activations(lm, corpus);
  if (static_cast<int64_t>(pool.size()) < cfg.batch)
    throw DataError(strprintf("train_sae: corpus yields %zu activations, need >= batch %lld",
                              pool.size(), static_cast<long long>(cfg.batch)));

  std::vector<size_t> order(pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng = Rng::stream(seed, "sae-shuffle");
  shuffle_rng.shuffle(order);

  const size_t heldout_n = std::max<size_t>(1, static_cast<size_t>(cfg.heldout_frac *
                                                                   static_cast<double>(order.size())));
  std::vector<size_t> heldout(order.end() - static_cast<int64_t>(heldout_n), order.end());
  order.resize(order.size() - heldout_n);
  if (static_cast<int64_t>(order.size()) < cfg.batch)
    throw DataError("train_sae: not enough training activations after held-out split");

  Rng init_rng = Rng::stream(seed, "sae-init");
  SparseAutoencoder sae = SparseAutoencoder::init(d, d_sae, init_rng);

  SAEMetrics metrics;
  {
    HeldoutStats st = heldout_stats(sae, pool, heldout, d);
    metrics.init_mse = st.mse;
    metrics.evals.push_back({0, st.mse, st.mean_l0});
  }

  Adam adam(sae.named_params(), AdamConfig{.lr = cfg.lr});
  size_t cursor = 0;
  std::vector<size_t> batch_idx(static_cast<size_t>(cfg.batch));
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    for (int64_t b = 0; b < cfg.batch; ++b) {
      batch_idx[static_cast<size_t>(b)] = order[cursor];
      cursor = (cursor + 1) % order.size();
    }
    Tape tape;
    Tensor x = rows_to_tensor(pool, batch_idx, d);
    Tensor loss = sae_loss(sae, x, cfg.alpha_sae);
    const double loss_v = loss.item();
    if (!std::isfinite(loss_v))
      throw TrainError(strprintf("train_sae diverged: non-finite loss at step %lld",
                                 static_cast<long long>(step)));
    tape.backward(loss);
    adam.step();
    sae.renorm_decoder_columns();
    metrics.train_loss.emplace_back(step, loss_v);
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      HeldoutStats st = heldout_stats(sae, pool, heldout, d);
      metrics.evals.push_back({step, st.mse, st.mean_l0});
    }
  }

  metrics.final_mse = metrics.evals.back().mse;
  metrics.final_mean_l0 = metrics.evals.back().mean_l0;
  if (!(metrics.final_mse < 0.5 * metrics.init_mse))
    throw TrainError(strprintf(
        "train_sae: final held-out MSE %.6g is not below half the initial %.6g",
        metrics.final_mse, metrics.init_mse));
  sae.set_trainable(false);
  return {std::move(sae), std::move(metrics)};
}

}  // namespace fsrl
