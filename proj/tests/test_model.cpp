#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "fsrl/lm.hpp"
#include "fsrl/prefdata.hpp"
#include "fsrl/sae.hpp"
#include "fsrl/tokenizer.hpp"
#include "test_helpers.hpp"

using namespace fsrl;

namespace {

std::vector<std::vector<int32_t>> tiny_corpus(int64_t lines) {
  DataSpec spec;
  spec.corpus_lines = lines;
  spec.n_train = 1;
  spec.n_val = 1;
  GenResult gen = gen_preference_data(42, spec);
  return tokenize_corpus(gen.corpus);
}

LMConfig small_cfg() {
  LMConfig cfg;
  cfg.vocab_size = CharTokenizer::vocab_size();
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_mlp = 64;
  cfg.context_len = 32;
  cfg.hook_layer = 1;
  return cfg;
}

// Frozen random model, shared across the cheap tests.
const LM& random_frozen_lm() {
  static LM lm = [] {
    Rng rng(7);
    LM m = LM::init(small_cfg(), rng);
    m.freeze();
    return m;
  }();
  return lm;
}

}  // namespace

TEST_CASE("tokenizer roundtrip and unknown characters") {
  const std::string text = "ask alpha : [val 17] ;";
  auto ids = CharTokenizer::encode(text);
  CHECK(CharTokenizer::decode(ids) == text);
  CHECK(CharTokenizer::vocab_size() ==
        static_cast<int64_t>(CharTokenizer::alphabet().size()));
  CHECK_THROWS_AS(CharTokenizer::encode("Uppercase"), DataError);
}

TEST_CASE("lm config validation") {
  LMConfig cfg = small_cfg();
  cfg.hook_layer = 2;  // == n_layers
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.n_heads = 5;  // does not divide 32
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("pretraining beats the uniform baseline on held-out text") {
  auto corpus = tiny_corpus(300);
  PretrainConfig train;
  train.steps = 2000;
  train.batch = 2;
  train.lr = 3e-3;
  train.eval_every = 500;
  PretrainResult res = pretrain_lm(corpus, small_cfg(), train, 1);
  const double uniform = std::log(static_cast<double>(CharTokenizer::vocab_size()));
  CHECK(res.metrics.final_heldout_ce < uniform);
  CHECK(res.metrics.final_heldout_ce < res.metrics.init_heldout_ce);
  CHECK(res.lm.frozen);
}

TEST_CASE("pretraining rejects zero steps and is seed-deterministic") {
  auto corpus = tiny_corpus(60);
  PretrainConfig train;
  train.steps = 0;
  CHECK_THROWS_AS(pretrain_lm(corpus, small_cfg(), train, 1), ConfigError);

  train.steps = 30;
  train.batch = 2;
  PretrainResult a = pretrain_lm(corpus, small_cfg(), train, 5);
  PretrainResult b = pretrain_lm(corpus, small_cfg(), train, 5);
  CHECK(a.lm.param_hash() == b.lm.param_hash());
  PretrainResult c = pretrain_lm(corpus, small_cfg(), train, 6);
  CHECK(a.lm.param_hash() != c.lm.param_hash());
}

TEST_CASE("hook intervention semantics") {
  const LM& lm = random_frozen_lm();
  auto ids = CharTokenizer::encode("ask beta : [val 42] ;");
  NoGradGuard ng;
  ForwardResult base = forward_with_hook(lm, ids);
  CHECK(base.hook_acts.rows() == static_cast<int64_t>(ids.size()));
  CHECK(base.hook_acts.cols() == lm.cfg.d_model);

  SUBCASE("identity reproduces baseline logits bit-exactly") {
    Intervention identity = [](const Tensor& x) { return x; };
    ForwardResult out = forward_with_hook(lm, ids, &identity);
    CHECK(test::bytes_equal(out.logits.values(), base.logits.values()));
  }
  SUBCASE("adding zero keeps logits identical") {
    Intervention addzero = [&](const Tensor& x) {
      return add(x, Tensor::zeros({x.rows(), x.cols()}));
    };
    ForwardResult out = forward_with_hook(lm, ids, &addzero);
    for (int64_t i = 0; i < base.logits.numel(); ++i)
      CHECK(out.logits.at(i) == base.logits.at(i));
  }
  SUBCASE("adding a large constant vector changes logits") {
    // A non-uniform direction: a uniform shift would sit in the null space
    // of the pre-attention layernorm and leave logits untouched.
    Tensor dir = Tensor::zeros({lm.cfg.d_model});
    dir.values()[0] = 5.0;
    dir.values()[1] = -5.0;
    Intervention shift = [&](const Tensor& x) { return add(x, dir); };
    ForwardResult out = forward_with_hook(lm, ids, &shift);
    double diff = 0.0;
    for (int64_t i = 0; i < base.logits.numel(); ++i)
      diff = std::max(diff, std::fabs(out.logits.at(i) - base.logits.at(i)));
    CHECK(diff > 1e-3);
  }
  SUBCASE("shape mismatch is rejected") {
    Intervention bad = [](const Tensor& x) { return select_cols(x, 0, x.cols() - 1); };
    CHECK_THROWS_AS((void)forward_with_hook(lm, ids, &bad), ShapeError);
  }
}

TEST_CASE("gradients flow into the intervention but not the frozen model") {
  const LM& lm = random_frozen_lm();
  auto ids = CharTokenizer::encode("gamma is 73 ;");
  Tensor steer = Tensor::zeros({lm.cfg.d_model}, true);
  Intervention iv = [&](const Tensor& x) { return add(x, steer); };
  {
    Tape tape;
    ForwardResult out = forward_with_hook(lm, ids, &iv);
    tape.backward(mean(out.logits));
  }
  double norm = 0.0;
  for (double g : steer.grad()) norm += std::fabs(g);
  CHECK(norm > 0.0);
  for (const auto& [name, p] : lm.named_params()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("sequence_avg_logprob") {
  SUBCASE("uniform-logit model gives -ln(vocab)") {
    LMConfig cfg = small_cfg();
    cfg.vocab_size = 8;  // token ids constructed by hand below
    Rng rng(3);
    LM lm = LM::init(cfg, rng);
    std::fill(lm.w_un.values().begin(), lm.w_un.values().end(), 0.0);
    std::fill(lm.b_un.values().begin(), lm.b_un.values().end(), 0.0);
    lm.freeze();
    TokenSequence seq;
    seq.tokens = {1, 2, 3, 4, 5, 6};
    seq.roles = {Role::prompt, Role::prompt, Role::response, Role::response, Role::response,
                 Role::response};
    NoGradGuard ng;
    const double got = sequence_avg_logprob(lm, seq).item();
    CHECK(got == doctest::Approx(-std::log(8.0)).epsilon(1e-12));

    // Length normalization: doubling the response keeps the value at -ln(V).
    TokenSequence seq2 = seq;
    for (int i = 0; i < 6; ++i) {
      seq2.tokens.push_back(seq.tokens[static_cast<size_t>(i)]);
      seq2.roles.push_back(Role::response);
    }
    CHECK(sequence_avg_logprob(lm, seq2).item() ==
          doctest::Approx(-std::log(8.0)).epsilon(1e-12));
  }
  SUBCASE("matches a brute-force softmax enumeration") {
    const LM& lm = random_frozen_lm();
    PreferenceTriplet t;
    t.prompt = "ask omega :";
    t.chosen = " [val 29] ;";
    TokenSequence seq = t.chosen_seq();
    NoGradGuard ng;
    ForwardResult fr = forward_with_hook(lm, seq.tokens);
    long double total = 0.0L;
    int64_t count = 0;
    const int64_t v = lm.cfg.vocab_size;
    for (size_t pos = 1; pos < seq.tokens.size(); ++pos) {
      if (seq.roles[pos] != Role::response) continue;
      long double mx = -1e300L, z = 0.0L;
      for (int64_t j = 0; j < v; ++j)
        mx = std::max<long double>(mx, fr.logits.at(static_cast<int64_t>(pos) - 1, j));
      for (int64_t j = 0; j < v; ++j)
        z += expl(static_cast<long double>(
                      fr.logits.at(static_cast<int64_t>(pos) - 1, j)) - mx);
      total += static_cast<long double>(
                   fr.logits.at(static_cast<int64_t>(pos) - 1, seq.tokens[pos])) -
               mx - logl(z);
      ++count;
    }
    const double oracle = static_cast<double>(total / count);
    CHECK(sequence_avg_logprob(lm, seq).item() == doctest::Approx(oracle).epsilon(1e-10));
  }
  SUBCASE("zero response tokens is an error") {
    TokenSequence seq;
    seq.tokens = {1, 2, 3};
    seq.roles = {Role::prompt, Role::prompt, Role::prompt};
    CHECK_THROWS_AS((void)sequence_avg_logprob(random_frozen_lm(), seq), DataError);
  }
  SUBCASE("near one-hot logits drive the value to 0 from below") {
    LMConfig cfg = small_cfg();
    cfg.vocab_size = 8;
    Rng rng(4);
    LM lm = LM::init(cfg, rng);
    std::fill(lm.w_un.values().begin(), lm.w_un.values().end(), 0.0);
    std::fill(lm.b_un.values().begin(), lm.b_un.values().end(), 0.0);
    lm.b_un.values()[3] = 40.0;  // token 3 gets essentially all the mass
    lm.freeze();
    TokenSequence seq;
    seq.tokens = {1, 3};
    seq.roles = {Role::prompt, Role::response};
    NoGradGuard ng;
    const double lp = sequence_avg_logprob(lm, seq).item();
    CHECK(lp < 0.0);
    CHECK(lp > -1e-12);
  }
}

TEST_CASE("freezing keeps parameter bytes identical across use") {
  auto corpus = tiny_corpus(80);
  const LM& lm = random_frozen_lm();
  const uint64_t before = lm.param_hash();
  (void)collect_hook_activations(lm, corpus);
  {
    NoGradGuard ng;
    (void)forward_with_hook(lm, corpus[0]);
  }
  LM thawed = lm.thawed_copy();
  for (double& v : thawed.tok_emb.values()) v += 1.0;
  CHECK(lm.param_hash() == before);
  CHECK(thawed.param_hash() != before);
}

// ---- sae ----

TEST_CASE("encode follows relu(W_enc x + b_enc)") {
  Rng rng(9);
  SparseAutoencoder sae = SparseAutoencoder::init(2, 3, rng);
  std::vector<double> enc = {1, 0, 0, 1, 0, 0};  // rows of [3x2]
  std::copy(enc.begin(), enc.end(), sae.W_enc.values().begin());
  std::fill(sae.b_enc.values().begin(), sae.b_enc.values().end(), 0.0);
  NoGradGuard ng;
  Tensor f = sae.encode(Tensor::from_values({1, 2}, {3.0, -1.0}));
  CHECK(f.at(0, 0) == 3.0);
  CHECK(f.at(0, 1) == 0.0);
  CHECK(f.at(0, 2) == 0.0);
  Tensor f0 = sae.encode(Tensor::zeros({1, 2}));
  for (double x : f0.values()) CHECK(x == 0.0);
}

TEST_CASE("encode/decode match the Eigen oracle") {
  Rng rng(10);
  SparseAutoencoder sae = SparseAutoencoder::init(6, 20, rng);
  for (auto& [name, p] : sae.named_params())
    for (double& v : p.values()) v = rng.normal(0.0, 0.7);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0);
  NoGradGuard ng;
  Tensor f = sae.encode(x);
  Tensor xhat = sae.decode(f);

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> we(sae.W_enc.values().data(), 20, 6);
  Eigen::Map<const RowMat> wd(sae.W_dec.values().data(), 6, 20);
  Eigen::Map<const RowMat> ex(x.values().data(), 4, 6);
  RowMat ef = (ex * we.transpose()).rowwise() +
              Eigen::Map<const Eigen::RowVectorXd>(sae.b_enc.values().data(), 20);
  ef = ef.cwiseMax(0.0);
  RowMat exhat = (ef * wd.transpose()).rowwise() +
                 Eigen::Map<const Eigen::RowVectorXd>(sae.b_dec.values().data(), 6);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 20; ++j)
      CHECK(f.at(i, j) == doctest::Approx(ef(i, j)).epsilon(1e-12));
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 6; ++j)
      CHECK(xhat.at(i, j) == doctest::Approx(exhat(i, j)).epsilon(1e-12));
  for (double v : f.values()) CHECK(v >= 0.0);
}

TEST_CASE("decode is affine with offset b_dec") {
  Rng rng(11);
  SparseAutoencoder sae = SparseAutoencoder::init(5, 12, rng);
  for (double& v : sae.b_dec.values()) v = rng.normal();
  NoGradGuard ng;
  Tensor zero = sae.decode(Tensor::zeros({1, 12}));
  for (int64_t j = 0; j < 5; ++j) CHECK(zero.at(0, j) == sae.b_dec.values()[static_cast<size_t>(j)]);

  Tensor f1 = Tensor::randn({1, 12}, rng, 1.0);
  Tensor f2 = Tensor::randn({1, 12}, rng, 1.0);
  Tensor lhs = sae.decode(add(f1, f2));
  Tensor d1 = sae.decode(f1);
  Tensor d2 = sae.decode(f2);
  for (int64_t j = 0; j < 5; ++j)
    CHECK(lhs.at(0, j) - d1.at(0, j) - d2.at(0, j) +
              sae.b_dec.values()[static_cast<size_t>(j)] ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("sae_loss forced example and gradient check") {
  Rng rng(12);
  SparseAutoencoder sae = SparseAutoencoder::init(2, 3, rng);
  std::vector<double> enc = {2, 0, 0, 1, 0, 0};
  std::copy(enc.begin(), enc.end(), sae.W_enc.values().begin());
  std::fill(sae.b_enc.values().begin(), sae.b_enc.values().end(), 0.0);
  std::fill(sae.W_dec.values().begin(), sae.W_dec.values().end(), 0.0);
  std::fill(sae.b_dec.values().begin(), sae.b_dec.values().end(), 0.0);
  {
    NoGradGuard ng;
    // x=(1,0): f=(2,0,0), xhat=(0,0): loss = 1 + 0.1*2 = 1.2
    Tensor x = Tensor::from_values({1, 2}, {1.0, 0.0});
    CHECK(sae_loss(sae, x, 0.1).item() == doctest::Approx(1.2).epsilon(1e-12));
    // perfect reconstruction with f=0
    CHECK(sae_loss(sae, Tensor::zeros({1, 2}), 0.1).item() == 0.0);
  }

  SparseAutoencoder g = SparseAutoencoder::init(3, 7, rng);
  for (auto& [name, p] : g.named_params())
    for (double& v : p.values()) v = rng.normal(0.0, 0.6);
  Tensor xs = Tensor::randn({2, 3}, rng, 1.0);
  auto rep = finite_diff_check([&]() { return sae_loss(g, xs, 0.1); }, g.named_params(),
                               FdOptions{.h = 1e-5, .tol = 1e-5});
  CHECK(!rep.rejected);
  CHECK(rep.max_rel_err <= 1e-5);
}

TEST_CASE("train_sae behaviors") {
  auto corpus = tiny_corpus(150);
  const LM& lm = random_frozen_lm();
  SAETrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 32;
  cfg.lr = 2e-3;
  cfg.alpha_sae = 1e-3;
  cfg.d_sae_ratio = 4;
  cfg.eval_every = 100;

  SUBCASE("zero steps rejected") {
    SAETrainConfig bad = cfg;
    bad.steps = 0;
    CHECK_THROWS_AS(train_sae(lm, corpus, bad, 1), ConfigError);
  }
  SUBCASE("held-out MSE halves, decoder columns stay unit norm, runs are deterministic") {
    SAETrainResult a = train_sae(lm, corpus, cfg, 3);
    CHECK(a.metrics.final_mse < 0.5 * a.metrics.init_mse);
    CHECK(a.sae.max_decoder_column_norm_error() <= 1e-9);
    SAETrainResult b = train_sae(lm, corpus, cfg, 3);
    CHECK(a.sae.param_hash() == b.sae.param_hash());
  }
  SUBCASE("sparsity penalty reduces held-out l0 monotonically") {
    std::vector<double> alphas = {0.0, 1e-3, 1e-1};
    std::vector<double> l0s;
    for (double alpha : alphas) {
      SAETrainConfig c = cfg;
      c.alpha_sae = alpha;
      l0s.push_back(train_sae(lm, corpus, c, 3).metrics.final_mean_l0);
    }
    CHECK(l0s[1] <= l0s[0]);
    CHECK(l0s[2] <= l0s[1]);
  }
}
