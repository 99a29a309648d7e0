#include "fsrl/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "fsrl/tokenizer.hpp"

namespace fsrl {

namespace {

using nlohmann::json;

void expect_keys(const json& obj, const std::string& section,
                 std::initializer_list<const char*> keys) {
  if (!obj.is_object())
    throw ConfigError(strprintf("config: section '%s' must be an object", section.c_str()));
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError(strprintf("config: unknown key '%s' in section '%s'", key.c_str(),
                                  section.c_str()));
}

template <typename T>
void read_num(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number())
    throw ConfigError(strprintf("config: '%s' must be a number", key));
  out = v.get<T>();
}

void read_str(const json& obj, const char* key, std::string& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(strprintf("config: '%s' must be a string", key));
  out = v.get<std::string>();
}

}  // namespace

void AnalysisConfig::validate() const {
  if (mask_ratio <= 0.0) throw ConfigError("analysis: mask_ratio must be > 0");
  if (bootstrap_resamples < 1) throw ConfigError("analysis: bootstrap_resamples must be >= 1");
  if (max_mask_docs < 1) throw ConfigError("analysis: max_mask_docs must be >= 1");
  if (topk_pcts.empty()) throw ConfigError("analysis: topk_pcts must not be empty");
  for (double k : topk_pcts)
    if (!(k > 0.0) || k > 100.0)
      throw ConfigError(strprintf("analysis: topk percentage %g out of (0,100]", k));
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.lm.vocab_size = CharTokenizer::vocab_size();
  cfg.sweep.kind = "alpha_steer";
  cfg.sweep.numeric_values = {0.01, 0.1, 1.0};
  cfg.sweep.epochs = 1;
  return cfg;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json root = json::parse(text, nullptr, false);
  if (root.is_discarded()) throw ConfigError("config: malformed JSON");
  expect_keys(root, "(top level)",
              {"seed", "kernels", "lm", "lm_train", "data", "sae_train", "simpo", "adapter",
               "baseline", "analysis", "sweep"});

  RunConfig cfg = defaults();
  read_num(root, "seed", cfg.seed);
  read_str(root, "kernels", cfg.kernels);

  if (root.contains("lm")) {
    const json& s = root.at("lm");
    expect_keys(s, "lm",
                {"d_model", "n_layers", "n_heads", "d_mlp", "context_len", "hook_layer"});
    read_num(s, "d_model", cfg.lm.d_model);
    read_num(s, "n_layers", cfg.lm.n_layers);
    read_num(s, "n_heads", cfg.lm.n_heads);
    read_num(s, "d_mlp", cfg.lm.d_mlp);
    read_num(s, "context_len", cfg.lm.context_len);
    read_num(s, "hook_layer", cfg.lm.hook_layer);
  }
  if (root.contains("lm_train")) {
    const json& s = root.at("lm_train");
    expect_keys(s, "lm_train", {"steps", "batch", "lr", "eval_every", "heldout_frac"});
    read_num(s, "steps", cfg.lm_train.steps);
    read_num(s, "batch", cfg.lm_train.batch);
    read_num(s, "lr", cfg.lm_train.lr);
    read_num(s, "eval_every", cfg.lm_train.eval_every);
    read_num(s, "heldout_frac", cfg.lm_train.heldout_frac);
  }
  if (root.contains("data")) {
    const json& s = root.at("data");
    expect_keys(s, "data",
                {"n_train", "n_val", "corpus_lines", "style_corrupt_rate",
                 "content_corrupt_rate", "value_noise_rate"});
    read_num(s, "n_train", cfg.data.n_train);
    read_num(s, "n_val", cfg.data.n_val);
    read_num(s, "corpus_lines", cfg.data.corpus_lines);
    read_num(s, "style_corrupt_rate", cfg.data.style_corrupt_rate);
    read_num(s, "content_corrupt_rate", cfg.data.content_corrupt_rate);
    read_num(s, "value_noise_rate", cfg.data.value_noise_rate);
  }
  if (root.contains("sae_train")) {
    const json& s = root.at("sae_train");
    expect_keys(s, "sae_train",
                {"alpha", "lr", "steps", "batch", "d_sae_ratio", "eval_every", "heldout_frac"});
    read_num(s, "alpha", cfg.sae_train.alpha_sae);
    read_num(s, "lr", cfg.sae_train.lr);
    read_num(s, "steps", cfg.sae_train.steps);
    read_num(s, "batch", cfg.sae_train.batch);
    read_num(s, "d_sae_ratio", cfg.sae_train.d_sae_ratio);
    read_num(s, "eval_every", cfg.sae_train.eval_every);
    read_num(s, "heldout_frac", cfg.sae_train.heldout_frac);
  }
  if (root.contains("simpo")) {
    const json& s = root.at("simpo");
    expect_keys(s, "simpo",
                {"beta", "gamma_ratio", "alpha_steer", "lr", "epochs", "batch", "warmup_ratio",
                 "eval_every", "ste_eps", "theta_lr_scale"});
    read_num(s, "beta", cfg.simpo.beta);
    read_num(s, "gamma_ratio", cfg.simpo.gamma_ratio);
    read_num(s, "alpha_steer", cfg.simpo.alpha_steer);
    read_num(s, "lr", cfg.simpo.lr);
    read_num(s, "epochs", cfg.simpo.epochs);
    read_num(s, "batch", cfg.simpo.batch);
    read_num(s, "warmup_ratio", cfg.simpo.warmup_ratio);
    read_num(s, "eval_every", cfg.simpo.eval_every);
    read_num(s, "ste_eps", cfg.simpo.ste_eps);
    read_num(s, "theta_lr_scale", cfg.simpo.theta_lr_scale);
  }
  if (root.contains("adapter")) {
    const json& s = root.at("adapter");
    expect_keys(s, "adapter", {"variant"});
    read_str(s, "variant", cfg.adapter_variant);
  }
  if (root.contains("baseline")) {
    const json& s = root.at("baseline");
    expect_keys(s, "baseline", {"lr", "epochs"});
    read_num(s, "lr", cfg.baseline_lr);
    read_num(s, "epochs", cfg.baseline_epochs);
  }
  if (root.contains("analysis")) {
    const json& s = root.at("analysis");
    expect_keys(s, "analysis",
                {"mask_ratio", "bootstrap_resamples", "topk_pcts", "max_mask_docs"});
    read_num(s, "mask_ratio", cfg.analysis.mask_ratio);
    read_num(s, "bootstrap_resamples", cfg.analysis.bootstrap_resamples);
    read_num(s, "max_mask_docs", cfg.analysis.max_mask_docs);
    if (s.contains("topk_pcts")) {
      if (!s.at("topk_pcts").is_array())
        throw ConfigError("config: analysis.topk_pcts must be an array of numbers");
      cfg.analysis.topk_pcts = s.at("topk_pcts").get<std::vector<double>>();
    }
  }
  if (root.contains("sweep")) {
    const json& s = root.at("sweep");
    expect_keys(s, "sweep", {"kind", "values", "epochs"});
    read_str(s, "kind", cfg.sweep.kind);
    read_num(s, "epochs", cfg.sweep.epochs);
    if (s.contains("values")) {
      const json& vals = s.at("values");
      if (!vals.is_array()) throw ConfigError("config: sweep.values must be an array");
      cfg.sweep.numeric_values.clear();
      cfg.sweep.string_values.clear();
      for (const json& v : vals) {
        if (v.is_number())
          cfg.sweep.numeric_values.push_back(v.get<double>());
        else if (v.is_string())
          cfg.sweep.string_values.push_back(v.get<std::string>());
        else
          throw ConfigError("config: sweep.values entries must be numbers or strings");
      }
      if (!cfg.sweep.numeric_values.empty() && !cfg.sweep.string_values.empty())
        throw ConfigError("config: sweep.values must not mix numbers and strings");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string RunConfig::to_json_string() const {
  json root;
  root["seed"] = seed;
  root["kernels"] = kernels;
  root["lm"] = {{"d_model", lm.d_model},         {"n_layers", lm.n_layers},
                {"n_heads", lm.n_heads},         {"d_mlp", lm.d_mlp},
                {"context_len", lm.context_len}, {"hook_layer", lm.hook_layer}};
  root["lm_train"] = {{"steps", lm_train.steps},
                      {"batch", lm_train.batch},
                      {"lr", lm_train.lr},
                      {"eval_every", lm_train.eval_every},
                      {"heldout_frac", lm_train.heldout_frac}};
  root["data"] = {{"n_train", data.n_train},
                  {"n_val", data.n_val},
                  {"corpus_lines", data.corpus_lines},
                  {"style_corrupt_rate", data.style_corrupt_rate},
                  {"content_corrupt_rate", data.content_corrupt_rate},
                  {"value_noise_rate", data.value_noise_rate}};
  root["sae_train"] = {{"alpha", sae_train.alpha_sae}, {"lr", sae_train.lr},
                       {"steps", sae_train.steps},     {"batch", sae_train.batch},
                       {"d_sae_ratio", sae_train.d_sae_ratio},
                       {"eval_every", sae_train.eval_every},
                       {"heldout_frac", sae_train.heldout_frac}};
  root["simpo"] = {{"beta", simpo.beta},
                   {"gamma_ratio", simpo.gamma_ratio},
                   {"alpha_steer", simpo.alpha_steer},
                   {"lr", simpo.lr},
                   {"epochs", simpo.epochs},
                   {"batch", simpo.batch},
                   {"warmup_ratio", simpo.warmup_ratio},
                   {"eval_every", simpo.eval_every},
                   {"ste_eps", simpo.ste_eps},
                   {"theta_lr_scale", simpo.theta_lr_scale}};
  root["adapter"] = {{"variant", adapter_variant}};
  root["baseline"] = {{"lr", baseline_lr}, {"epochs", baseline_epochs}};
  root["analysis"] = {{"mask_ratio", analysis.mask_ratio},
                      {"bootstrap_resamples", analysis.bootstrap_resamples},
                      {"topk_pcts", analysis.topk_pcts},
                      {"max_mask_docs", analysis.max_mask_docs}};
  json sweep_vals = json::array();
  for (double v : sweep.numeric_values) sweep_vals.push_back(v);
  for (const auto& v : sweep.string_values) sweep_vals.push_back(v);
  root["sweep"] = {{"kind", sweep.kind}, {"values", sweep_vals}, {"epochs", sweep.epochs}};
  return root.dump();
}

void RunConfig::validate() const {
  if (kernels != "serial" && kernels != "parallel")
    throw ConfigError("config: kernels must be 'serial' or 'parallel'");
  LMConfig lmv = lm;
  lmv.vocab_size = CharTokenizer::vocab_size();
  lmv.validate();
  if (lm_train.steps < 1 || lm_train.batch < 1 || lm_train.lr <= 0.0 ||
      lm_train.eval_every < 1)
    throw ConfigError("config: lm_train fields out of range");
  if (lm_train.heldout_frac <= 0.0 || lm_train.heldout_frac >= 0.5)
    throw ConfigError("config: lm_train.heldout_frac out of (0,0.5)");
  data.validate();
  sae_train.validate();
  simpo.validate();
  if (simpo.epochs < 1) throw ConfigError("config: simpo.epochs must be >= 1");
  variant_from_name(adapter_variant);
  if (baseline_lr <= 0.0 || baseline_epochs < 1)
    throw ConfigError("config: baseline lr/epochs out of range");
  analysis.validate();
  if (sweep.kind != "alpha_steer" && sweep.kind != "layer" && sweep.kind != "variant")
    throw ConfigError("config: sweep.kind must be alpha_steer|layer|variant");
  if (sweep.epochs < 1) throw ConfigError("config: sweep.epochs must be >= 1");
}

}  // namespace fsrl
