#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fsrl/config.hpp"
#include "fsrl/simpo.hpp"
#include "fsrl/tokenizer.hpp"
#include "test_helpers.hpp"

using namespace fsrl;

namespace {

// One shared small trained pipeline for the trainer tests: corpus + frozen
// LM + SAE + datasets. Built once.
struct MiniWorld {
  GenResult gen;
  LM lm;
  SparseAutoencoder sae;
  SimPOConfig simpo;
};

const MiniWorld& mini_world() {
  static MiniWorld w = [] {
    MiniWorld m;
    DataSpec spec;
    spec.n_train = 192;
    spec.n_val = 48;
    spec.corpus_lines = 700;
    m.gen = gen_preference_data(11, spec);

    LMConfig cfg;
    cfg.vocab_size = CharTokenizer::vocab_size();
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_mlp = 64;
    cfg.context_len = 40;
    cfg.hook_layer = 1;
    PretrainConfig pre;
    pre.steps = 700;
    pre.batch = 4;
    pre.lr = 3e-3;
    pre.eval_every = 350;
    m.lm = pretrain_lm(tokenize_corpus(m.gen.corpus), cfg, pre, 11).lm;

    SAETrainConfig scfg;
    scfg.steps = 500;
    scfg.batch = 32;
    scfg.lr = 2e-3;
    scfg.alpha_sae = 3e-4;
    scfg.d_sae_ratio = 4;
    scfg.eval_every = 250;
    m.sae = train_sae(m.lm, tokenize_corpus(m.gen.corpus), scfg, 11).sae;

    m.simpo.epochs = 1;
    m.simpo.batch = 8;
    m.simpo.lr = 3e-3;
    return m;
  }();
  return w;
}

SteeringAdapter fresh_adapter(const MiniWorld& w, uint64_t seed) {
  Rng rng = Rng::stream(seed, "adapter-init");
  return SteeringAdapter::init(w.lm.cfg.d_model, w.sae.d_sae,
                               AdapterVariant::soft_threshold, rng);
}

}  // namespace

// ---- preference data ----

TEST_CASE("a single triplet is well formed") {
  DataSpec spec;
  spec.n_train = 1;
  spec.n_val = 1;
  spec.corpus_lines = 20;
  GenResult gen = gen_preference_data(3, spec);
  REQUIRE(gen.train.size() == 1);
  const PreferenceTriplet& t = gen.train[0];
  CHECK(t.chosen != t.rejected);
  CHECK(t.chosen.size() == t.rejected.size());
  CHECK(t.chosen.size() == t.response_labels.size());
  CHECK(t.prompt.size() == t.prompt_labels.size());
  TokenSequence seq = t.chosen_seq();
  seq.validate(CharTokenizer::vocab_size());
  CHECK(seq.response_count() == static_cast<int64_t>(t.chosen.size()));
}

TEST_CASE("zero corruption rates are rejected") {
  DataSpec spec;
  spec.style_corrupt_rate = 0.0;
  spec.content_corrupt_rate = 0.0;
  CHECK_THROWS_AS(gen_preference_data(1, spec), ConfigError);
}

TEST_CASE("label counts match corruption sites (recount oracle)") {
  DataSpec spec;
  spec.n_train = 300;
  spec.n_val = 50;
  spec.corpus_lines = 30;
  GenResult gen = gen_preference_data(9, spec);
  std::vector<PreferenceTriplet> all = gen.train;
  all.insert(all.end(), gen.val.begin(), gen.val.end());
  GenStats recount = recount_corruptions(all);
  CHECK(recount.style_sites == gen.stats.style_sites);
  CHECK(recount.content_sites == gen.stats.content_sites);
  CHECK(recount.style_corruptions == gen.stats.style_corruptions);
  CHECK(recount.content_corruptions == gen.stats.content_corruptions);
  CHECK(gen.stats.style_corruptions > 0);
}

TEST_CASE("generation is deterministic per seed") {
  DataSpec spec;
  spec.n_train = 20;
  spec.n_val = 5;
  spec.corpus_lines = 40;
  GenResult a = gen_preference_data(4, spec);
  GenResult b = gen_preference_data(4, spec);
  GenResult c = gen_preference_data(5, spec);
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].prompt == b.train[i].prompt);
    CHECK(a.train[i].chosen == b.train[i].chosen);
    CHECK(a.train[i].rejected == b.train[i].rejected);
  }
  CHECK(a.corpus == b.corpus);
  CHECK(a.corpus != c.corpus);
}

TEST_CASE("dataset files round-trip") {
  DataSpec spec;
  spec.n_train = 8;
  spec.n_val = 2;
  spec.corpus_lines = 30;
  GenResult gen = gen_preference_data(6, spec);
  const std::string path = "test_train_dataset.jsonl";
  write_dataset(path, gen.train, "{\"seed\":6}");
  std::vector<PreferenceTriplet> back = read_dataset(path);
  REQUIRE(back.size() == gen.train.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].prompt == gen.train[i].prompt);
    CHECK(back[i].rejected == gen.train[i].rejected);
    CHECK(back[i].response_labels == gen.train[i].response_labels);
  }
  std::remove(path.c_str());
}

// ---- simpo loss ----

TEST_CASE("margin-level loss values") {
  // Equal normalized log-probs: loss = softplus(gamma) = ln(1 + e^5).
  CHECK(simpo_loss_from_margins(-1.3, -1.3, 10.0, 5.0) ==
        doctest::Approx(5.0067153484891179).epsilon(1e-12));
  // A gap of exactly gamma/beta lands on ln 2.
  CHECK(simpo_loss_from_margins(-1.0, -1.5, 10.0, 5.0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // Strictly positive and strictly decreasing in the gap.
  double prev = 1e300;
  for (double gap : {-0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 2.0}) {
    const double loss = simpo_loss_from_margins(gap, 0.0, 10.0, 5.0);
    CHECK(loss > 0.0);
    CHECK(loss < prev);
    prev = loss;
  }
  // Stable at extreme margins.
  CHECK(std::isfinite(simpo_loss_from_margins(100.0, 0.0, 10.0, 5.0)));
  CHECK(std::isfinite(simpo_loss_from_margins(-100.0, 0.0, 10.0, 5.0)));
}

TEST_CASE("defaults follow the reference configuration") {
  SimPOConfig cfg;
  CHECK(cfg.beta == 10.0);
  CHECK(cfg.gamma_ratio == 0.5);
  CHECK(cfg.gamma() == 5.0);
  CHECK(cfg.warmup_ratio == 0.1);
  CHECK(cfg.alpha_steer == 0.1);
}

TEST_CASE("uniform-logit model: loss equals softplus(gamma) at any length") {
  LMConfig cfg;
  cfg.vocab_size = CharTokenizer::vocab_size();
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.context_len = 48;
  cfg.hook_layer = 0;
  Rng rng(2);
  LM lm = LM::init(cfg, rng);
  std::fill(lm.w_un.values().begin(), lm.w_un.values().end(), 0.0);
  std::fill(lm.b_un.values().begin(), lm.b_un.values().end(), 0.0);
  lm.freeze();

  PreferenceTriplet t;
  t.prompt = "ask eta :";
  t.chosen = " [val 95] ;";
  t.rejected = " {val 95] ;";
  PreferenceTriplet t2 = t;
  t2.chosen = t.chosen + t.chosen;   // doubled response
  t2.rejected = t.rejected + t.rejected;

  SimPOConfig scfg;
  const double expect = std::log1p(std::exp(scfg.gamma()));
  std::vector<PreferenceTriplet> d1 = {t}, d2 = {t2};
  CHECK(eval_simpo_loss(lm, nullptr, nullptr, d1, scfg).loss ==
        doctest::Approx(expect).epsilon(1e-10));
  CHECK(eval_simpo_loss(lm, nullptr, nullptr, d2, scfg).loss ==
        doctest::Approx(expect).epsilon(1e-10));

  // beta/|y| log pi is -beta ln V regardless of response length.
  NoGradGuard ng;
  const double a1 = sequence_avg_logprob(lm, t.chosen_seq()).item();
  const double a2 = sequence_avg_logprob(lm, t2.chosen_seq()).item();
  CHECK(scfg.beta * a1 ==
        doctest::Approx(-scfg.beta * std::log(static_cast<double>(cfg.vocab_size)))
            .epsilon(1e-10));
  CHECK(a1 == doctest::Approx(a2).epsilon(1e-12));
}

TEST_CASE("model-level loss decreases monotonically as chosen tokens get more likely") {
  LMConfig cfg;
  cfg.vocab_size = CharTokenizer::vocab_size();
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.context_len = 32;
  cfg.hook_layer = 0;
  Rng rng(3);
  PreferenceTriplet t;
  t.prompt = "ask eta :";
  t.chosen = "aaaa";
  t.rejected = "bbbb";
  std::vector<PreferenceTriplet> data = {t};
  SimPOConfig scfg;

  double prev = 1e300;
  for (double bias : {0.0, 0.1, 0.25, 0.5, 1.0}) {
    LM lm = LM::init(cfg, rng);
    std::fill(lm.w_un.values().begin(), lm.w_un.values().end(), 0.0);
    std::fill(lm.b_un.values().begin(), lm.b_un.values().end(), 0.0);
    lm.b_un.values()[static_cast<size_t>(CharTokenizer::id_of('a'))] = bias;
    lm.freeze();
    const double loss = eval_simpo_loss(lm, nullptr, nullptr, data, scfg).loss;
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("steered objective gradient matches finite differences") {
  const MiniWorld& w = mini_world();
  Rng rng(17);
  SteeringAdapter adapter = fresh_adapter(w, 17);
  for (double& v : adapter.W_a.values()) v = rng.normal(0.0, 0.2);
  for (double& v : adapter.b_a.values()) v = rng.normal(0.0, 0.05);
  for (double& v : adapter.theta.values()) v = rng.uniform(0.05, 0.3);
  std::vector<PreferenceTriplet> batch = {w.gen.train[0], w.gen.train[1]};
  for (int attempt = 0;; ++attempt) {
    auto rep = finite_diff_check(
        [&]() { return simpo_batch_loss(w.lm, &w.sae, &adapter, batch, w.simpo).total; },
        adapter.named_params(), FdOptions{.h = 1e-5, .tol = 1e-4});
    if (rep.rejected) {
      REQUIRE(attempt < 32);
      for (double& v : adapter.theta.values()) v = rng.uniform(0.05, 0.3);
      continue;
    }
    CHECK(rep.max_rel_err <= 1e-4);
    break;
  }
}

// ---- adapter training ----

TEST_CASE("adapter training improves validation loss and leaves frozen bytes alone") {
  const MiniWorld& w = mini_world();
  const uint64_t lm_hash = w.lm.param_hash();
  const uint64_t sae_hash = w.sae.param_hash();
  TrainAdapterResult res = train_adapter(w.lm, w.sae, fresh_adapter(w, 21), w.gen.train,
                                         w.gen.val, w.simpo, 21);
  CHECK(res.metrics.improved);
  CHECK(res.metrics.final_val_loss < res.metrics.unsteered_val_loss);
  CHECK(w.lm.param_hash() == lm_hash);
  CHECK(w.sae.param_hash() == sae_hash);
  CHECK(res.metrics.steps.size() ==
        static_cast<size_t>((static_cast<int64_t>(w.gen.train.size()) + w.simpo.batch - 1) /
                            w.simpo.batch));

  SUBCASE("same seed reproduces the metric log exactly") {
    TrainAdapterResult res2 = train_adapter(w.lm, w.sae, fresh_adapter(w, 21), w.gen.train,
                                            w.gen.val, w.simpo, 21);
    REQUIRE(res2.metrics.steps.size() == res.metrics.steps.size());
    for (size_t i = 0; i < res.metrics.steps.size(); ++i) {
      CHECK(res.metrics.steps[i].loss == res2.metrics.steps[i].loss);
      CHECK(res.metrics.steps[i].l0 == res2.metrics.steps[i].l0);
      CHECK(res.metrics.steps[i].l1 == res2.metrics.steps[i].l1);
    }
    CHECK(res.adapter.param_hash() == res2.adapter.param_hash());
  }
}

TEST_CASE("the sparsity penalty reduces steering l0 (paired seeds)") {
  const MiniWorld& w = mini_world();
  std::vector<PreferenceTriplet> train(w.gen.train.begin(), w.gen.train.begin() + 96);
  SimPOConfig free_cfg = w.simpo;
  free_cfg.alpha_steer = 0.0;
  SimPOConfig pen_cfg = w.simpo;
  pen_cfg.alpha_steer = 0.5;
  TrainAdapterResult free_run = train_adapter(w.lm, w.sae, fresh_adapter(w, 31), train,
                                              w.gen.val, free_cfg, 31,
                                              /*require_improvement=*/false);
  TrainAdapterResult pen_run = train_adapter(w.lm, w.sae, fresh_adapter(w, 31), train,
                                             w.gen.val, pen_cfg, 31,
                                             /*require_improvement=*/false);
  CHECK(pen_run.metrics.final_val_mean_l0 <= free_run.metrics.final_val_mean_l0);
}

TEST_CASE("zero epochs is an error and the adapter is untouched") {
  const MiniWorld& w = mini_world();
  SteeringAdapter adapter = fresh_adapter(w, 41);
  const uint64_t before = adapter.param_hash();
  SimPOConfig cfg = w.simpo;
  cfg.epochs = 0;
  CHECK_THROWS_AS(
      train_adapter(w.lm, w.sae, adapter, w.gen.train, w.gen.val, cfg, 41),
      ConfigError);
  CHECK(adapter.param_hash() == before);
}

TEST_CASE("training an adapter against a thawed model is rejected") {
  const MiniWorld& w = mini_world();
  LM thawed = w.lm.thawed_copy();
  CHECK_THROWS_AS(train_adapter(thawed, w.sae, fresh_adapter(w, 43), w.gen.train, w.gen.val,
                                w.simpo, 43),
                  TrainError);
}

// ---- full fine-tune baseline ----

TEST_CASE("full fine-tune lowers validation loss and preserves the source model") {
  const MiniWorld& w = mini_world();
  const uint64_t lm_hash = w.lm.param_hash();
  SimPOConfig cfg = w.simpo;
  cfg.epochs = 1;
  BaselineTrainResult res =
      train_full_baseline(w.lm, w.gen.train, w.gen.val, cfg, 1.2e-4, 51);
  CHECK(res.metrics.final_val_loss < res.metrics.init_val_loss);
  CHECK(w.lm.param_hash() == lm_hash);
  CHECK_FALSE(res.model.frozen);
}

TEST_CASE("baseline defaults keep the adapter/baseline lr ratio at 25") {
  RunConfig cfg = RunConfig::defaults();
  CHECK(cfg.baseline_lr * 25.0 == doctest::Approx(cfg.simpo.lr).epsilon(1e-12));
  CHECK(cfg.baseline_lr < cfg.simpo.lr);
}

TEST_CASE("baseline rejects zero epochs") {
  const MiniWorld& w = mini_world();
  SimPOConfig cfg = w.simpo;
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_full_baseline(w.lm, w.gen.train, w.gen.val, cfg, 1e-4, 1),
                  ConfigError);
}
