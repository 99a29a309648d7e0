#include "fsrl/lm.hpp"

#include <cmath>

#include "fsrl/opt.hpp"

namespace fsrl {

void LMConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_mlp <= 0 ||
      context_len <= 0)
    throw ConfigError("lm config: all dimensions must be positive");
  if (hook_layer < 0 || hook_layer >= n_layers)
    throw ConfigError(strprintf("lm config: hook_layer %lld out of range [0,%lld)",
                                static_cast<long long>(hook_layer),
                                static_cast<long long>(n_layers)));
  if (d_model % n_heads != 0)
    throw ConfigError(strprintf("lm config: d_model %lld not divisible by n_heads %lld",
                                static_cast<long long>(d_model),
                                static_cast<long long>(n_heads)));
}

void TokenSequence::validate(int64_t vocab_size) const {
  if (tokens.empty()) throw DataError("token sequence is empty");
  if (roles.size() != tokens.size())
    throw DataError(strprintf("role mask length %zu does not match %zu tokens", roles.size(),
                              tokens.size()));
  for (int32_t t : tokens)
    if (t < 0 || t >= vocab_size)
      throw DataError(strprintf("token id %d out of range [0,%lld)", t,
                                static_cast<long long>(vocab_size)));
}

int64_t TokenSequence::response_count() const {
  int64_t n = 0;
  for (Role r : roles)
    if (r == Role::response) ++n;
  return n;
}

LM LM::init(const LMConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.08;
  LM lm;
  lm.cfg = cfg;
  const int64_t d = cfg.d_model;
  auto w = [&](Shape s) { return Tensor::randn(std::move(s), rng, kStd, true); };
  auto zeros = [&](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto ones = [&](Shape s) { return Tensor::full(std::move(s), 1.0, true); };
  lm.tok_emb = w({cfg.vocab_size, d});
  lm.pos_emb = w({cfg.context_len, d});
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    Block b;
    b.ln1_g = ones({d});
    b.ln1_b = zeros({d});
    b.w_q = w({d, d});
    b.b_q = zeros({d});
    b.w_k = w({d, d});
    b.b_k = zeros({d});
    b.w_v = w({d, d});
    b.b_v = zeros({d});
    b.w_o = w({d, d});
    b.b_o = zeros({d});
    b.ln2_g = ones({d});
    b.ln2_b = zeros({d});
    b.w_fc1 = w({d, cfg.d_mlp});
    b.b_fc1 = zeros({cfg.d_mlp});
    b.w_fc2 = w({cfg.d_mlp, d});
    b.b_fc2 = zeros({d});
    lm.blocks.push_back(std::move(b));
  }
  lm.lnf_g = ones({d});
  lm.lnf_b = zeros({d});
  lm.w_un = w({d, cfg.vocab_size});
  lm.b_un = zeros({cfg.vocab_size});
  return lm;
}

std::vector<std::pair<std::string, Tensor>> LM::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (size_t l = 0; l < blocks.size(); ++l) {
    Block& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_g", b.ln1_g);
    out.emplace_back(p + "ln1_b", b.ln1_b);
    out.emplace_back(p + "w_q", b.w_q);
    out.emplace_back(p + "b_q", b.b_q);
    out.emplace_back(p + "w_k", b.w_k);
    out.emplace_back(p + "b_k", b.b_k);
    out.emplace_back(p + "w_v", b.w_v);
    out.emplace_back(p + "b_v", b.b_v);
    out.emplace_back(p + "w_o", b.w_o);
    out.emplace_back(p + "b_o", b.b_o);
    out.emplace_back(p + "ln2_g", b.ln2_g);
    out.emplace_back(p + "ln2_b", b.ln2_b);
    out.emplace_back(p + "w_fc1", b.w_fc1);
    out.emplace_back(p + "b_fc1", b.b_fc1);
    out.emplace_back(p + "w_fc2", b.w_fc2);
    out.emplace_back(p + "b_fc2", b.b_fc2);
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  out.emplace_back("w_un", w_un);
  out.emplace_back("b_un", b_un);
  return out;
}

std::vector<std::pair<std::string, Tensor>> LM::named_params() const {
  return const_cast<LM*>(this)->named_params();
}

void LM::freeze() {
  for (auto& [name, p] : named_params()) {
    p.set_requires_grad(false);
    p.drop_grad();
  }
  frozen = true;
}

LM LM::thawed_copy() const {
  LM copy;
  copy.cfg = cfg;
  copy.frozen = false;
  copy.tok_emb = tok_emb.clone(true);
  copy.pos_emb = pos_emb.clone(true);
  for (const Block& b : blocks) {
    Block c;
    c.ln1_g = b.ln1_g.clone(true);
    c.ln1_b = b.ln1_b.clone(true);
    c.w_q = b.w_q.clone(true);
    c.b_q = b.b_q.clone(true);
    c.w_k = b.w_k.clone(true);
    c.b_k = b.b_k.clone(true);
    c.w_v = b.w_v.clone(true);
    c.b_v = b.b_v.clone(true);
    c.w_o = b.w_o.clone(true);
    c.b_o = b.b_o.clone(true);
    c.ln2_g = b.ln2_g.clone(true);
    c.ln2_b = b.ln2_b.clone(true);
    c.w_fc1 = b.w_fc1.clone(true);
    c.b_fc1 = b.b_fc1.clone(true);
    c.w_fc2 = b.w_fc2.clone(true);
    c.b_fc2 = b.b_fc2.clone(true);
    copy.blocks.push_back(std::move(c));
  }
  copy.lnf_g = lnf_g.clone(true);
  copy.lnf_b = lnf_b.clone(true);
  copy.w_un = w_un.clone(true);
  copy.b_un = b_un.clone(true);
  return copy;
}

uint64_t LM::param_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : named_params()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(p.values(), h);
  }
  return h;
}

namespace {

Tensor causal_mask(int64_t n) {
  std::vector<double> vals(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) vals[static_cast<size_t>(i * n + j)] = -1e9;
  return Tensor::from_values({n, n}, std::move(vals));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace

ForwardResult forward_with_hook(const LM& lm, std::span<const int32_t> tokens,
                                const Intervention* intervention) {
  const LMConfig& cfg = lm.cfg;
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n == 0) throw DataError("forward: empty token sequence");
  if (n > cfg.context_len)
    throw ShapeError(strprintf("forward: sequence length %lld exceeds context_len %lld",
                               static_cast<long long>(n),
                               static_cast<long long>(cfg.context_len)));
  std::vector<int32_t> pos(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = static_cast<int32_t>(i);

  Tensor h = add(gather_rows(lm.tok_emb, tokens), gather_rows(lm.pos_emb, pos));
  Tensor mask = causal_mask(n);
  const int64_t dh = cfg.d_model / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor hook_acts;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LM::Block& blk = lm.blocks[static_cast<size_t>(l)];
    if (l == cfg.hook_layer) {
      hook_acts = h;
      if (intervention) {
        Tensor replaced = (*intervention)(h);
        if (!replaced.defined() || replaced.shape() != h.shape())
          throw ShapeError(strprintf(
              "intervention output shape %s does not match hook activation %s",
              replaced.defined() ? fmt_shape(replaced.shape()).c_str() : "(undefined)",
              fmt_shape(h.shape()).c_str()));
        h = replaced;
      }
    }
    Tensor a = layer_norm(h, blk.ln1_g, blk.ln1_b);
    Tensor q = linear(a, blk.w_q, blk.b_q);
    Tensor k = linear(a, blk.w_k, blk.b_k);
    Tensor v = linear(a, blk.w_v, blk.b_v);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int64_t hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = select_cols(q, hd * dh, dh);
      Tensor kh = select_cols(k, hd * dh, dh);
      Tensor vh = select_cols(v, hd * dh, dh);
      Tensor scores = add(mul_scalar(matmul(qh, transpose(kh)), scale), mask);
      Tensor probs = softmax_rows(scores);
      heads.push_back(matmul(probs, vh));
    }
    Tensor ctx = concat_cols(heads);
    h = add(h, linear(ctx, blk.w_o, blk.b_o));
    Tensor m2 = layer_norm(h, blk.ln2_g, blk.ln2_b);
    Tensor inner = relu(linear(m2, blk.w_fc1, blk.b_fc1));
    h = add(h, linear(inner, blk.w_fc2, blk.b_fc2));
  }
  Tensor fin = layer_norm(h, lm.lnf_g, lm.lnf_b);
  Tensor logits = linear(fin, lm.w_un, lm.b_un);
  return {logits, hook_acts};
}

Tensor sequence_avg_logprob(const LM& lm, const TokenSequence& seq,
                            const Intervention* intervention) {
  seq.validate(lm.cfg.vocab_size);
  if (seq.response_count() == 0)
    throw DataError("sequence_avg_logprob: zero response-role tokens");
  if (seq.roles[0] == Role::response)
    throw DataError("sequence_avg_logprob: response token at position 0 has no context");

  ForwardResult fr = forward_with_hook(lm, seq.tokens, intervention);
  Tensor lp = log_softmax_rows(fr.logits);
  std::vector<std::pair<int64_t, int64_t>> idx;
  for (size_t t = 1; t < seq.tokens.size(); ++t)
    if (seq.roles[t] == Role::response)
      idx.emplace_back(static_cast<int64_t>(t) - 1, seq.tokens[t]);
  return mean(gather_elements(lp, idx));
}

double corpus_cross_entropy(const LM& lm, std::span<const std::vector<int32_t>> docs) {
  NoGradGuard ng;
  double total = 0.0;
  int64_t count = 0;
  for (const auto& doc : docs) {
    const int64_t n = std::min<int64_t>(static_cast<int64_t>(doc.size()), lm.cfg.context_len);
    if (n < 2) continue;
    std::span<const int32_t> ids(doc.data(), static_cast<size_t>(n));
    ForwardResult fr = forward_with_hook(lm, ids);
    Tensor lp = log_softmax_rows(fr.logits);
    for (int64_t t = 0; t + 1 < n; ++t) {
      total -= lp.at(t, doc[static_cast<size_t>(t + 1)]);
      ++count;
    }
  }
  if (count == 0) throw DataError("corpus_cross_entropy: no scorable positions");
  return total / static_cast<double>(count);
}

PretrainResult pretrain_lm(const std::vector<std::vector<int32_t>>& corpus, const LMConfig& cfg,
                           const PretrainConfig& train, uint64_t seed) {
  cfg.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  if (train.steps < 1) throw ConfigError("pretrain: steps must be >= 1");
  if (train.batch < 1) throw ConfigError("pretrain: batch must be >= 1");

  std::vector<std::vector<int32_t>> usable;
  for (const auto& doc : corpus)
    if (doc.size() >= 2) usable.push_back(doc);
  if (usable.empty()) throw DataError("pretrain: no documents with >= 2 tokens");

  const size_t heldout_n =
      std::max<size_t>(1, static_cast<size_t>(train.heldout_frac * usable.size()));
  if (heldout_n >= usable.size())
    throw DataError("pretrain: corpus too small for a held-out split");
  std::vector<std::vector<int32_t>> heldout(usable.end() - static_cast<int64_t>(heldout_n),
                                            usable.end());
  usable.resize(usable.size() - heldout_n);

  Rng init_rng = Rng::stream(seed, "lm-init");
  Rng batch_rng = Rng::stream(seed, "lm-batch");
  LM lm = LM::init(cfg, init_rng);

  PretrainMetrics metrics;
  metrics.init_heldout_ce = corpus_cross_entropy(lm, heldout);
  metrics.heldout_ce.emplace_back(0, metrics.init_heldout_ce);

  Adam adam(lm.named_params(), AdamConfig{.lr = train.lr});
  for (int64_t step = 1; step <= train.steps; ++step) {
    Tape tape;
    Tensor total = Tensor::scalar(0.0);
    int64_t count = 0;
    for (int64_t b = 0; b < train.batch; ++b) {
      const auto& doc = usable[batch_rng.randbelow(usable.size())];
      const int64_t n = std::min<int64_t>(static_cast<int64_t>(doc.size()), cfg.context_len);
      std::span<const int32_t> ids(doc.data(), static_cast<size_t>(n));
      ForwardResult fr = forward_with_hook(lm, ids);
      Tensor lp = log_softmax_rows(fr.logits);
      std::vector<std::pair<int64_t, int64_t>> idx;
      for (int64_t t = 0; t + 1 < n; ++t) idx.emplace_back(t, doc[static_cast<size_t>(t + 1)]);
      total = add(total, sum(gather_elements(lp, idx)));
      count += n - 1;
    }
    Tensor loss = mul_scalar(total, -1.0 / static_cast<double>(count));
    const double loss_v = loss.item();
    if (!std::isfinite(loss_v))
      throw TrainError(strprintf("pretrain diverged: non-finite loss at step %lld",
                                 static_cast<long long>(step)));
    tape.backward(loss);
    adam.step();
    metrics.train_ce.emplace_back(step, loss_v);
    if (step % train.eval_every == 0 || step == train.steps)
      metrics.heldout_ce.emplace_back(step, corpus_cross_entropy(lm, heldout));
  }

  metrics.final_heldout_ce = metrics.heldout_ce.back().second;
  if (!(metrics.final_heldout_ce < metrics.init_heldout_ce))
    throw TrainError(strprintf(
        "pretrain: held-out CE %.6f did not improve on the random init %.6f",
        metrics.final_heldout_ce, metrics.init_heldout_ce));
  lm.freeze();
  return {std::move(lm), std::move(metrics)};
}

}  // namespace fsrl
