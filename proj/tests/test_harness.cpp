#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fsrl/checkpoint.hpp"
#include "fsrl/cli.hpp"
#include "fsrl/config.hpp"
#include "fsrl/simpo.hpp"
#include "fsrl/tokenizer.hpp"
#include "test_helpers.hpp"

using namespace fsrl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("harness_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

int run_cli(std::initializer_list<std::string> args) {
  return cli_dispatch(std::vector<std::string>(args));
}

}  // namespace

TEST_CASE("checkpoint round-trips exactly at 32-bit precision") {
  TempDir dir("ckpt");
  Rng rng(1);
  std::vector<std::pair<std::string, Tensor>> tensors = {
      {"a", Tensor::randn({3, 4}, rng, 1.0)},
      {"b", Tensor::randn({7}, rng, 10.0)},
  };
  save_checkpoint(dir.file("t.ckpt"), tensors, "{\"seed\":1}", {{"kind", "test"}});
  LoadedCheckpoint ck = load_checkpoint(dir.file("t.ckpt"));
  REQUIRE(ck.tensors.size() == 2);
  CHECK(ck.extra.at("kind") == "test");
  CHECK(ck.config_snapshot_json.find("seed") != std::string::npos);
  for (size_t t = 0; t < tensors.size(); ++t) {
    CHECK(ck.tensors[t].first == tensors[t].first);
    CHECK(ck.tensors[t].second.shape() == tensors[t].second.shape());
    auto orig = tensors[t].second.values();
    auto back = ck.tensors[t].second.values();
    for (size_t i = 0; i < orig.size(); ++i) {
      // exact at f32: double -> float -> double is the identity on floats
      CHECK(back[i] == static_cast<double>(static_cast<float>(orig[i])));
    }
  }
}

TEST_CASE("checkpoint integrity failures are detected") {
  TempDir dir("ckpt_bad");
  Rng rng(2);
  std::vector<std::pair<std::string, Tensor>> tensors = {
      {"w", Tensor::randn({5, 5}, rng, 1.0)}};
  const std::string path = dir.file("t.ckpt");
  save_checkpoint(path, tensors, "{}");
  const std::string good = slurp(path);

  SUBCASE("flipped payload byte") {
    std::string bad = good;
    bad[bad.size() - 3] = static_cast<char>(bad[bad.size() - 3] ^ 0x40);
    spit(path, bad);
    CHECK_THROWS_AS((void)load_checkpoint(path), CheckpointError);
  }
  SUBCASE("truncated payload") {
    spit(path, good.substr(0, good.size() - 8));
    CHECK_THROWS_AS((void)load_checkpoint(path), CheckpointError);
  }
  SUBCASE("version mismatch") {
    std::string bad = good;
    bad[8] = 9;  // little-endian u32 version right after the magic
    spit(path, bad);
    CHECK_THROWS_AS((void)load_checkpoint(path), CheckpointError);
  }
  SUBCASE("wrong magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_AS((void)load_checkpoint(path), CheckpointError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS((void)load_checkpoint(dir.file("absent.ckpt")), CheckpointError);
  }
}

TEST_CASE("model checkpoints reload to identical evaluations") {
  TempDir dir("ckpt_model");
  LMConfig cfg;
  cfg.vocab_size = CharTokenizer::vocab_size();
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.context_len = 40;
  cfg.hook_layer = 1;
  Rng rng(3);
  LM lm = LM::init(cfg, rng);
  lm.freeze();
  SparseAutoencoder sae = SparseAutoencoder::init(16, 48, rng);
  sae.set_trainable(false);
  SteeringAdapter adapter =
      SteeringAdapter::init(16, 48, AdapterVariant::jump_relu, rng);
  for (double& v : adapter.W_a.values()) v = rng.normal(0.0, 0.3);
  adapter.set_trainable(false);

  save_lm(dir.file("lm.ckpt"), lm, "{}");
  save_sae(dir.file("sae.ckpt"), sae, "{}");
  save_adapter(dir.file("adapter.ckpt"), adapter, "{}");

  LM lm1 = load_lm(dir.file("lm.ckpt"));
  LM lm2 = load_lm(dir.file("lm.ckpt"));
  CHECK(lm1.frozen);
  CHECK(lm1.param_hash() == lm2.param_hash());
  SparseAutoencoder sae1 = load_sae(dir.file("sae.ckpt"));
  SteeringAdapter ad1 = load_adapter(dir.file("adapter.ckpt"));
  CHECK(ad1.variant == AdapterVariant::jump_relu);

  DataSpec spec;
  spec.n_train = 4;
  spec.n_val = 4;
  spec.corpus_lines = 20;
  GenResult gen = gen_preference_data(1, spec);
  SimPOConfig scfg;
  const double l1 = eval_simpo_loss(lm1, &sae1, &ad1, gen.val, scfg).loss;
  SparseAutoencoder sae2 = load_sae(dir.file("sae.ckpt"));
  SteeringAdapter ad2 = load_adapter(dir.file("adapter.ckpt"));
  const double l2 = eval_simpo_loss(lm2, &sae2, &ad2, gen.val, scfg).loss;
  CHECK(l1 == l2);
}

TEST_CASE("config schema validation") {
  SUBCASE("defaults validate") { CHECK_NOTHROW(RunConfig::defaults().validate()); }
  SUBCASE("unknown top-level key") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"sede\": 1}"), ConfigError);
  }
  SUBCASE("unknown section key") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"simpo\": {\"betta\": 10}}"), ConfigError);
  }
  SUBCASE("wrong type") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"seed\": \"one\"}"), ConfigError);
  }
  SUBCASE("invalid kernels value") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"kernels\": \"gpu\"}"), ConfigError);
  }
  SUBCASE("mixed sweep values") {
    CHECK_THROWS_AS(
        RunConfig::from_json_text("{\"sweep\": {\"values\": [1, \"relu\"]}}"), ConfigError);
  }
  SUBCASE("malformed json") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{nope"), ConfigError);
  }
  SUBCASE("overrides apply") {
    RunConfig cfg = RunConfig::from_json_text("{\"simpo\": {\"beta\": 7.5}, \"seed\": 9}");
    CHECK(cfg.simpo.beta == 7.5);
    CHECK(cfg.seed == 9);
    CHECK(cfg.simpo.gamma_ratio == 0.5);  // untouched default
  }
  SUBCASE("canonical snapshot round-trips") {
    RunConfig cfg = RunConfig::defaults();
    RunConfig back = RunConfig::from_json_text(cfg.to_json_string());
    CHECK(back.to_json_string() == cfg.to_json_string());
  }
}

TEST_CASE("cli exit codes") {
  SUBCASE("unknown subcommand is a usage error") {
    CHECK(run_cli({"frobnicate"}) == kExitUsage);
  }
  SUBCASE("unknown flag is a usage error") {
    CHECK(run_cli({"gen-data", "--frobnicate"}) == kExitUsage);
  }
  SUBCASE("help succeeds") { CHECK(run_cli({"--help"}) == kExitOk); }
  SUBCASE("missing checkpoint file") {
    TempDir dir("cli_missing");
    CHECK(run_cli({"eval-loss", "--lm", dir.file("absent.ckpt"), "--data",
                   dir.file("absent.jsonl"), "--out", dir.str()}) == kExitIo);
  }
  SUBCASE("invalid config file") {
    TempDir dir("cli_badcfg");
    spit(dir.file("bad.json"), "{\"unknown_key\": 1}");
    CHECK(run_cli({"gen-data", "--config", dir.file("bad.json"), "--out", dir.str()}) ==
          kExitConfig);
  }
}

TEST_CASE("gen-data writes deterministic artifacts with config snapshots") {
  TempDir a("gen_a"), b("gen_b");
  const std::string cfg_path = a.file("cfg.json");
  spit(cfg_path,
       "{\"data\": {\"n_train\": 12, \"n_val\": 4, \"corpus_lines\": 30}}");
  REQUIRE(run_cli({"gen-data", "--config", cfg_path, "--out", a.str()}) == kExitOk);
  REQUIRE(run_cli({"gen-data", "--config", cfg_path, "--out", b.str()}) == kExitOk);
  CHECK(slurp(a.file("corpus.txt")) == slurp(b.file("corpus.txt")));
  CHECK(slurp(a.file("train.jsonl")) == slurp(b.file("train.jsonl")));
  CHECK(slurp(a.file("val.jsonl")) == slurp(b.file("val.jsonl")));
  CHECK(slurp(a.file("train.jsonl")).find("config_snapshot") != std::string::npos);

  SUBCASE("a different seed changes the data") {
    TempDir c("gen_c");
    REQUIRE(run_cli({"gen-data", "--config", cfg_path, "--seed", "99", "--out", c.str()}) ==
            kExitOk);
    CHECK(slurp(a.file("train.jsonl")) != slurp(c.file("train.jsonl")));
  }
}

TEST_CASE("verify-theory fixture run reports a clean bill") {
  TempDir dir("cli_theory");
  REQUIRE(run_cli({"verify-theory", "--out", dir.str(), "--trials", "100", "--deltas",
                   "3"}) == kExitOk);
  const std::string summary = slurp(dir.file("theory_summary.txt"));
  CHECK(summary.find("rank bound holds 100/100") != std::string::npos);
  CHECK(summary.find("effective rank") != std::string::npos);
  const std::string report = slurp(dir.file("theory_report.csv"));
  CHECK(report.find("# config: {") == 0);
}

TEST_CASE("grad-check smoke run passes") {
  TempDir dir("cli_gc");
  CHECK(run_cli({"grad-check", "--instances", "3", "--out", dir.str()}) == kExitOk);
  CHECK(slurp(dir.file("gradcheck.csv")).find("max_rel_err") != std::string::npos);
}
