#include "fsrl/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "fsrl/analysis.hpp"
#include "fsrl/checkpoint.hpp"
#include "fsrl/config.hpp"
#include "fsrl/gradsuite.hpp"
#include "fsrl/kernels.hpp"
#include "fsrl/simpo.hpp"
#include "fsrl/theory.hpp"
#include "fsrl/tokenizer.hpp"

namespace fsrl {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Plain CSV with a leading config-snapshot comment so every artifact records
// the configuration that produced it.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::string& config_snapshot,
            std::initializer_list<const char*> columns)
      : path_(path.string()), f_(path, std::ios::binary) {
    if (!f_) throw IoError("cannot open for writing: " + path_.string());
    f_ << "# config: " << config_snapshot << "\n";
    bool first = true;
    for (const char* c : columns) {
      if (!first) f_ << ',';
      f_ << c;
      first = false;
    }
    f_ << '\n';
  }

  void row(std::initializer_list<std::string> cells) {
    bool first = true;
    for (const auto& c : cells) {
      if (!first) f_ << ',';
      f_ << c;
      first = false;
    }
    f_ << '\n';
  }

  ~CsvWriter() { f_.flush(); }

  CsvWriter(const CsvWriter&) = delete;

 private:
  fs::path path_;
  std::ofstream f_;
};

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing: " + path.string());
}

std::string num(double v) { return fmt_g(v); }
std::string inum(int64_t v) { return std::to_string(v); }

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
  std::optional<std::string> kernels;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "JSON config file (defaults when omitted)");
  sub->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
  sub->add_option("--seed", opts.seed, "override the config seed");
  sub->add_option("--kernels", opts.kernels, "kernel mode: serial|parallel");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg =
      opts.config_path.empty() ? RunConfig::defaults() : RunConfig::from_file(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.kernels) cfg.kernels = *opts.kernels;
  cfg.lm.vocab_size = CharTokenizer::vocab_size();
  cfg.validate();
  kern::set_mode(cfg.kernels == "serial" ? kern::Mode::serial : kern::Mode::parallel);
  return cfg;
}

fs::path ensure_out(const CommonOpts& opts) {
  fs::path out(opts.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory: " + out.string());
  return out;
}

std::vector<PreferenceTriplet> load_dataset_checked(const std::string& path) {
  if (!fs::exists(path)) throw IoError("dataset file not found: " + path);
  return read_dataset(path);
}

LM load_lm_checked(const std::string& path) {
  if (path.empty()) throw ConfigError("missing required --lm checkpoint path");
  if (!fs::exists(path)) throw CheckpointError("model checkpoint not found: " + path);
  return load_lm(path);
}

SparseAutoencoder load_sae_checked(const std::string& path) {
  if (path.empty()) throw ConfigError("missing required --sae checkpoint path");
  if (!fs::exists(path)) throw CheckpointError("sae checkpoint not found: " + path);
  return load_sae(path);
}

SteeringAdapter load_adapter_checked(const std::string& path) {
  if (path.empty()) throw ConfigError("missing required --adapter checkpoint path");
  if (!fs::exists(path)) throw CheckpointError("adapter checkpoint not found: " + path);
  return load_adapter(path);
}

std::vector<FeatureCategoryMask> masks_for(const RunConfig& cfg, const LM& lm,
                                           const SparseAutoencoder& sae,
                                           const std::string& masks_path,
                                           const std::vector<PreferenceTriplet>& labeled,
                                           const fs::path& out) {
  if (!masks_path.empty()) {
    if (!fs::exists(masks_path)) throw IoError("masks file not found: " + masks_path);
    return read_masks(masks_path);
  }
  MaskConfig mc{cfg.analysis.mask_ratio, cfg.analysis.max_mask_docs};
  std::vector<FeatureCategoryMask> masks = derive_category_masks(lm, sae, labeled, mc);
  write_masks((out / "masks.txt").string(), masks, cfg.to_json_string());
  return masks;
}

// ---- subcommand bodies ----

int cmd_gen_data(const CommonOpts& copts) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  GenResult gen = gen_preference_data(cfg.seed, cfg.data);
  const std::string snap = cfg.to_json_string();
  write_corpus((out / "corpus.txt").string(), gen.corpus);
  write_dataset((out / "train.jsonl").string(), gen.train, snap);
  write_dataset((out / "val.jsonl").string(), gen.val, snap);
  json stats = {{"style_sites", gen.stats.style_sites},
                {"content_sites", gen.stats.content_sites},
                {"style_corruptions", gen.stats.style_corruptions},
                {"content_corruptions", gen.stats.content_corruptions},
                {"config", json::parse(snap)}};
  write_json_file(out / "gen_stats.json", stats);
  std::cout << "wrote corpus (" << gen.corpus.size() << " lines), train ("
            << gen.train.size() << "), val (" << gen.val.size() << ") to " << out.string()
            << "\n";
  return kExitOk;
}

int cmd_train_lm(const CommonOpts& copts, const std::string& corpus_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  if (!fs::exists(corpus_path)) throw IoError("corpus file not found: " + corpus_path);
  auto docs = tokenize_corpus(read_corpus(corpus_path));
  PretrainResult res = pretrain_lm(docs, cfg.lm, cfg.lm_train, cfg.seed);
  const std::string snap = cfg.to_json_string();
  save_lm((out / "lm.ckpt").string(), res.lm, snap);
  {
    CsvWriter csv(out / "lm_train.csv", snap, {"step", "loss"});
    for (auto [step, loss] : res.metrics.train_ce) csv.row({inum(step), num(loss)});
  }
  {
    CsvWriter csv(out / "lm_eval.csv", snap, {"step", "heldout_ce"});
    for (auto [step, ce] : res.metrics.heldout_ce) csv.row({inum(step), num(ce)});
  }
  write_json_file(out / "lm_summary.json",
                  {{"init_heldout_ce", res.metrics.init_heldout_ce},
                   {"final_heldout_ce", res.metrics.final_heldout_ce},
                   {"uniform_baseline_ce", std::log(static_cast<double>(cfg.lm.vocab_size))},
                   {"config", json::parse(snap)}});
  std::cout << "lm held-out ce " << fmt_g(res.metrics.init_heldout_ce) << " -> "
            << fmt_g(res.metrics.final_heldout_ce) << " (uniform "
            << fmt_g(std::log(static_cast<double>(cfg.lm.vocab_size))) << ")\n";
  return kExitOk;
}

int cmd_train_sae(const CommonOpts& copts, const std::string& lm_path,
                  const std::string& corpus_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  if (!fs::exists(corpus_path)) throw IoError("corpus file not found: " + corpus_path);
  auto docs = tokenize_corpus(read_corpus(corpus_path));
  SAETrainResult res = train_sae(lm, docs, cfg.sae_train, cfg.seed);
  const std::string snap = cfg.to_json_string();
  save_sae((out / "sae.ckpt").string(), res.sae, snap);
  {
    CsvWriter csv(out / "sae_train.csv", snap, {"step", "loss"});
    for (auto [step, loss] : res.metrics.train_loss) csv.row({inum(step), num(loss)});
  }
  {
    CsvWriter csv(out / "sae_eval.csv", snap, {"step", "mse", "l0"});
    for (const auto& e : res.metrics.evals)
      csv.row({inum(e.step), num(e.mse), num(e.mean_l0)});
  }
  write_json_file(out / "sae_summary.json",
                  {{"init_mse", res.metrics.init_mse},
                   {"final_mse", res.metrics.final_mse},
                   {"final_mean_l0", res.metrics.final_mean_l0},
                   {"d_sae", res.sae.d_sae},
                   {"decoder_column_norm_error", res.sae.max_decoder_column_norm_error()},
                   {"config", json::parse(snap)}});
  std::cout << "sae held-out mse " << fmt_g(res.metrics.init_mse) << " -> "
            << fmt_g(res.metrics.final_mse) << ", mean l0 "
            << fmt_g(res.metrics.final_mean_l0) << "\n";
  return kExitOk;
}

int cmd_train_adapter(const CommonOpts& copts, const std::string& lm_path,
                      const std::string& sae_path, const std::string& train_path,
                      const std::string& val_path, const std::string& variant_flag,
                      std::optional<double> alpha_flag) {
  RunConfig cfg = resolve_config(copts);
  if (!variant_flag.empty()) cfg.adapter_variant = variant_flag;
  if (alpha_flag) cfg.simpo.alpha_steer = *alpha_flag;
  cfg.validate();
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  SparseAutoencoder sae = load_sae_checked(sae_path);
  auto train_set = load_dataset_checked(train_path);
  auto val_set = load_dataset_checked(val_path);

  Rng init_rng = Rng::stream(cfg.seed, "adapter-init");
  SteeringAdapter adapter = SteeringAdapter::init(
      lm.cfg.d_model, sae.d_sae, variant_from_name(cfg.adapter_variant), init_rng);
  TrainAdapterResult res =
      train_adapter(lm, sae, std::move(adapter), train_set, val_set, cfg.simpo, cfg.seed);

  const std::string snap = cfg.to_json_string();
  save_adapter((out / "adapter.ckpt").string(), res.adapter, snap);
  {
    CsvWriter csv(out / "adapter_train.csv", snap, {"step", "loss", "l0", "l1"});
    for (const auto& r : res.metrics.steps)
      csv.row({inum(r.step), num(r.loss), num(r.l0), num(r.l1)});
  }
  write_json_file(out / "adapter_summary.json",
                  {{"unsteered_val_loss", res.metrics.unsteered_val_loss},
                   {"final_val_loss", res.metrics.final_val_loss},
                   {"final_val_mean_l0", res.metrics.final_val_mean_l0},
                   {"final_val_mean_l1", res.metrics.final_val_mean_l1},
                   {"variant", variant_name(res.adapter.variant)},
                   {"config", json::parse(snap)}});
  std::cout << "adapter val loss " << fmt_g(res.metrics.unsteered_val_loss) << " -> "
            << fmt_g(res.metrics.final_val_loss) << ", mean l0 "
            << fmt_g(res.metrics.final_val_mean_l0) << "\n";
  return kExitOk;
}

int cmd_train_baseline(const CommonOpts& copts, const std::string& lm_path,
                       const std::string& train_path, const std::string& val_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  auto train_set = load_dataset_checked(train_path);
  auto val_set = load_dataset_checked(val_path);

  SimPOConfig scfg = cfg.simpo;
  scfg.epochs = cfg.baseline_epochs;
  BaselineTrainResult res =
      train_full_baseline(lm, train_set, val_set, scfg, cfg.baseline_lr, cfg.seed);

  const std::string snap = cfg.to_json_string();
  save_lm((out / "baseline.ckpt").string(), res.model, snap);
  {
    CsvWriter csv(out / "baseline_train.csv", snap, {"step", "loss", "l0", "l1"});
    for (const auto& r : res.metrics.steps)
      csv.row({inum(r.step), num(r.loss), num(r.l0), num(r.l1)});
  }
  write_json_file(out / "baseline_summary.json",
                  {{"init_val_loss", res.metrics.init_val_loss},
                   {"final_val_loss", res.metrics.final_val_loss},
                   {"config", json::parse(snap)}});
  std::cout << "baseline val loss " << fmt_g(res.metrics.init_val_loss) << " -> "
            << fmt_g(res.metrics.final_val_loss) << "\n";
  return kExitOk;
}

int cmd_eval_loss(const CommonOpts& copts, const std::string& lm_path,
                  const std::string& sae_path, const std::string& adapter_path,
                  const std::string& data_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  auto data = load_dataset_checked(data_path);

  std::optional<SparseAutoencoder> sae;
  std::optional<SteeringAdapter> adapter;
  if (!sae_path.empty() || !adapter_path.empty()) {
    sae = load_sae_checked(sae_path);
    adapter = load_adapter_checked(adapter_path);
  }
  EvalResult ev = eval_simpo_loss(lm, sae ? &*sae : nullptr, adapter ? &*adapter : nullptr,
                                  data, cfg.simpo);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "eval_loss.csv", snap,
                {"loss", "adapter_mean_l0", "adapter_mean_l1", "tokens"});
  csv.row({num(ev.loss), num(ev.adapter_mean_l0), num(ev.adapter_mean_l1), inum(ev.tokens)});
  std::cout << "simpo loss " << fmt_g(ev.loss) << (adapter ? " (steered)" : " (unsteered)")
            << "\n";
  return kExitOk;
}

int cmd_ablate(const CommonOpts& copts, const std::string& lm_path, const std::string& sae_path,
               const std::string& adapter_path, const std::string& data_path,
               const std::string& masks_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  SparseAutoencoder sae = load_sae_checked(sae_path);
  SteeringAdapter adapter = load_adapter_checked(adapter_path);
  auto data = load_dataset_checked(data_path);
  auto masks = masks_for(cfg, lm, sae, masks_path, data, out);

  AblationResult res = ablate_categories(lm, sae, adapter, data, masks, cfg.simpo);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "ablation.csv", snap,
                {"condition", "features_ablated", "loss", "loss_per_feature"});
  for (const auto& r : res.rows)
    csv.row({r.condition, inum(r.features_ablated), num(r.loss),
             r.has_loss_per_feature ? num(r.loss_per_feature) : std::string()});
  json summary = {{"unsteered_loss", res.unsteered_loss},
                  {"full_loss", res.full_loss},
                  {"config", json::parse(snap)}};
  if (res.has_interaction) summary["interaction"] = res.interaction;
  write_json_file(out / "ablation_summary.json", summary);
  std::cout << "ablation rows: " << res.rows.size() << ", full loss "
            << fmt_g(res.full_loss) << ", unsteered " << fmt_g(res.unsteered_loss) << "\n";
  return kExitOk;
}

int cmd_topk(const CommonOpts& copts, const std::string& lm_path, const std::string& sae_path,
             const std::string& adapter_path, const std::string& data_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  SparseAutoencoder sae = load_sae_checked(sae_path);
  SteeringAdapter adapter = load_adapter_checked(adapter_path);
  auto data = load_dataset_checked(data_path);

  TopkResult res =
      static_topk_baseline(lm, sae, adapter, data, cfg.analysis.topk_pcts, cfg.simpo);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "topk.csv", snap, {"k_pct", "quota", "mean_l0", "loss"});
  for (const auto& r : res.curve)
    csv.row({num(r.k_pct), inum(r.quota), num(r.mean_l0), num(r.loss)});
  write_json_file(out / "topk_summary.json",
                  {{"full_loss", res.full_loss},
                   {"dynamic_loss", res.dynamic_loss},
                   {"dynamic_mean_l0", res.dynamic_mean_l0},
                   {"d_sae", sae.d_sae},
                   {"config", json::parse(snap)}});
  std::cout << "topk curve with " << res.curve.size() << " points; dynamic loss "
            << fmt_g(res.dynamic_loss) << " at mean l0 " << fmt_g(res.dynamic_mean_l0) << "\n";
  return kExitOk;
}

int cmd_analyze_usage(const CommonOpts& copts, const std::string& lm_path,
                      const std::string& sae_path, const std::string& adapter_path,
                      const std::string& data_path, const std::string& masks_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  SparseAutoencoder sae = load_sae_checked(sae_path);
  SteeringAdapter adapter = load_adapter_checked(adapter_path);
  auto data = load_dataset_checked(data_path);
  auto masks = masks_for(cfg, lm, sae, masks_path, data, out);

  UsageReport rep = analyze_usage(lm, sae, adapter, data, masks);
  const std::string snap = cfg.to_json_string();
  {
    CsvWriter csv(out / "usage.csv", snap, {"context", "subset", "rank", "feature", "freq"});
    for (const auto& ua : rep.analyses) {
      if (!ua.valid) continue;
      for (const auto& r : ua.result.ranked)
        csv.row({ua.context, ua.subset, inum(r.rank), inum(r.feature), num(r.freq)});
    }
  }
  {
    CsvWriter csv(out / "usage_fits.csv", snap,
                  {"context", "subset", "n_nonzero", "slope", "intercept", "r2", "note"});
    for (const auto& ua : rep.analyses)
      csv.row({ua.context, ua.subset,
               ua.valid ? inum(ua.result.fit.n_nonzero) : std::string("0"),
               ua.valid ? num(ua.result.fit.slope) : std::string(),
               ua.valid ? num(ua.result.fit.intercept) : std::string(),
               ua.valid ? num(ua.result.fit.r2) : std::string(), ua.note});
  }
  write_json_file(out / "usage_summary.json",
                  {{"adapter_mean_l0", rep.summary.adapter_mean_l0},
                   {"sae_mean_l0", rep.summary.sae_mean_l0},
                   {"tokens", rep.summary.tokens},
                   {"config", json::parse(snap)}});
  std::cout << "usage: adapter mean l0 " << fmt_g(rep.summary.adapter_mean_l0)
            << ", sae mean l0 " << fmt_g(rep.summary.sae_mean_l0) << "\n";
  return kExitOk;
}

int cmd_composition(const CommonOpts& copts, const std::string& lm_path,
                    const std::string& sae_path, const std::string& adapter_path,
                    const std::string& data_path, const std::string& masks_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  SparseAutoencoder sae = load_sae_checked(sae_path);
  SteeringAdapter adapter = load_adapter_checked(adapter_path);
  auto data = load_dataset_checked(data_path);
  auto masks = masks_for(cfg, lm, sae, masks_path, data, out);

  auto reports = composition_report(lm, sae, adapter, data, masks,
                                    cfg.analysis.bootstrap_resamples, cfg.seed);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "composition.csv", snap,
                {"context", "mask", "sae_baseline_pct", "baseline_se_pct", "steered_pct",
                 "steered_se_pct", "relative_change_pct", "relative_change_se_pct", "tokens",
                 "skipped_baseline", "skipped_steered", "note"});
  for (const auto& r : reports)
    csv.row({r.context, r.mask, num(r.sae_baseline_pct), num(r.baseline_se_pct),
             r.valid ? num(r.steered_pct) : std::string(),
             r.valid ? num(r.steered_se_pct) : std::string(),
             r.valid ? num(r.relative_change_pct) : std::string(),
             r.valid ? num(r.relative_change_se_pct) : std::string(), inum(r.tokens),
             inum(r.skipped_baseline), inum(r.skipped_steered), r.note});
  std::cout << "composition rows: " << reports.size() << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonOpts& copts, const std::string& lm_path, const std::string& sae_path,
              const std::string& corpus_path, const std::string& train_path,
              const std::string& val_path) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  LM lm = load_lm_checked(lm_path);
  auto train_set = load_dataset_checked(train_path);
  auto val_set = load_dataset_checked(val_path);

  std::optional<SparseAutoencoder> sae;
  if (!sae_path.empty()) sae = load_sae_checked(sae_path);
  std::vector<std::vector<int32_t>> docs;
  if (!corpus_path.empty()) {
    if (!fs::exists(corpus_path)) throw IoError("corpus file not found: " + corpus_path);
    docs = tokenize_corpus(read_corpus(corpus_path));
  }

  auto rows = run_sweep(lm, sae ? &*sae : nullptr, docs, train_set, val_set, cfg.simpo,
                        cfg.sae_train, cfg.sweep, cfg.seed);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "sweep.csv", snap, {"label", "final_val_loss", "mean_l0", "status"});
  for (const auto& r : rows)
    csv.row({r.label, r.status == "ok" ? num(r.final_val_loss) : std::string(),
             r.status == "ok" ? num(r.mean_l0) : std::string(), r.status});
  int64_t failures = 0;
  for (const auto& r : rows)
    if (r.status != "ok") ++failures;
  std::cout << "sweep: " << rows.size() << " runs, " << failures << " failed\n";
  return kExitOk;
}

int cmd_verify_theory(const CommonOpts& copts, const std::string& sae_path,
                      const std::string& adapter_path, int64_t trials, int64_t deltas) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);

  std::optional<SparseAutoencoder> sae;
  std::optional<SteeringAdapter> adapter;
  if (!sae_path.empty() || !adapter_path.empty()) {
    sae = load_sae_checked(sae_path);
    adapter = load_adapter_checked(adapter_path);
    if (adapter->variant != AdapterVariant::soft_threshold)
      throw ConfigError("verify-theory: requires a soft_threshold adapter");
  } else {
    // Built-in fixture: a random sae/adapter pair with thresholds spread so
    // the active count varies across reference points.
    Rng rng = Rng::stream(cfg.seed, "theory-fixture");
    const int64_t d = 16, d_sae = 64;
    sae = SparseAutoencoder::init(d, d_sae, rng);
    adapter = SteeringAdapter::init(d, d_sae, AdapterVariant::soft_threshold, rng);
    for (double& v : adapter->W_a.values()) v = rng.normal(0.0, 0.4);
    for (double& v : adapter->b_a.values()) v = rng.normal(0.0, 0.2);
    for (double& v : adapter->theta.values()) v = rng.uniform(0.1, 1.0);
  }

  TheoryRunResult res = run_theory_trials(*sae, *adapter, cfg.seed, trials, deltas);
  const std::string snap = cfg.to_json_string();
  {
    CsvWriter csv(out / "theory_report.csv", snap,
                  {"trial", "k", "rank_a", "rank_holds", "affine_max_err", "safe_radius",
                   "rank_wa", "wa_bound", "wa_holds"});
    for (size_t i = 0; i < res.trials.size(); ++i) {
      const auto& t = res.trials[i];
      csv.row({inum(static_cast<int64_t>(i)), inum(t.k), inum(t.rank_a),
               t.rank_holds ? "1" : "0", num(t.affine_max_err), num(t.safe_radius),
               inum(t.rank_wa), inum(t.wa_bound), t.wa_holds ? "1" : "0"});
    }
  }
  const int64_t n = static_cast<int64_t>(res.trials.size());
  std::string summary;
  summary += strprintf("rank bound holds %lld/%lld\n",
                       static_cast<long long>(n - res.rank_violations),
                       static_cast<long long>(n));
  summary += strprintf("induced update rank bound holds %lld/%lld\n",
                       static_cast<long long>(n - res.wa_violations),
                       static_cast<long long>(n));
  summary += strprintf("max affine identity error %s (tolerance 1e-10)\n",
                       fmt_g(res.max_affine_err).c_str());
  summary += strprintf("mean active features k %.2f of d_sae %lld\n", res.mean_k,
                       static_cast<long long>(res.d_sae));
  summary += strprintf("effective rank over %lld sampled updates: %lld\n",
                       static_cast<long long>(res.r_eff_samples),
                       static_cast<long long>(res.r_eff));
  {
    std::ofstream f(out / "theory_summary.txt", std::ios::binary);
    f << summary << "# config: " << snap << "\n";
  }
  std::cout << summary;
  const bool ok =
      res.rank_violations == 0 && res.wa_violations == 0 && res.max_affine_err <= 1e-10;
  if (!ok) {
    std::cerr << "error: theory checks failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_grad_check(const CommonOpts& copts, int64_t instances) {
  RunConfig cfg = resolve_config(copts);
  fs::path out = ensure_out(copts);
  GradSuiteResult sae_suite = run_sae_loss_grad_suite(cfg.seed, instances, 1e-5);
  GradSuiteResult adapter_suite = run_adapter_simpo_grad_suite(cfg.seed, instances, 1e-4);
  const std::string snap = cfg.to_json_string();
  CsvWriter csv(out / "gradcheck.csv", snap,
                {"suite", "instances", "resamples", "max_rel_err", "tol", "pass", "seconds"});
  bool all_pass = true;
  for (const auto& s : {sae_suite, adapter_suite}) {
    csv.row({s.name, inum(s.instances), inum(s.resamples), num(s.max_rel_err), num(s.tol),
             s.pass ? "1" : "0", num(s.seconds)});
    std::cout << s.name << ": max rel err " << fmt_g(s.max_rel_err) << " over " << s.instances
              << " instances (" << (s.pass ? "pass" : "FAIL") << ", " << fmt_g(s.seconds, 3)
              << "s)\n";
    all_pass = all_pass && s.pass;
  }
  return all_pass ? kExitOk : kExitRuntime;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"feature-steering preference-optimization workbench"};
  app.require_subcommand(1);

  CommonOpts copts;
  std::string corpus_path, lm_path, sae_path, adapter_path, train_path, val_path, data_path,
      masks_path, variant_flag;
  std::optional<double> alpha_flag;
  int64_t trials = 100, deltas = 5, instances = 100;

  auto* gen = app.add_subcommand("gen-data", "generate corpus and preference dataset");
  add_common(gen, copts);

  auto* tlm = app.add_subcommand("train-lm", "pretrain and freeze the base model");
  add_common(tlm, copts);
  tlm->add_option("--corpus", corpus_path, "corpus text file")->required();

  auto* tsae = app.add_subcommand("train-sae", "train the sparse autoencoder");
  add_common(tsae, copts);
  tsae->add_option("--lm", lm_path, "model checkpoint")->required();
  tsae->add_option("--corpus", corpus_path, "corpus text file")->required();

  auto* tad = app.add_subcommand("train-adapter", "train the steering adapter with SimPO");
  add_common(tad, copts);
  tad->add_option("--lm", lm_path, "model checkpoint")->required();
  tad->add_option("--sae", sae_path, "sae checkpoint")->required();
  tad->add_option("--train", train_path, "training dataset (jsonl)")->required();
  tad->add_option("--val", val_path, "validation dataset (jsonl)")->required();
  tad->add_option("--variant", variant_flag, "soft_threshold|relu|jump_relu");
  tad->add_option("--alpha-steer", alpha_flag, "override the sparsity penalty coefficient");

  auto* tbl = app.add_subcommand("train-baseline", "full-model SimPO fine-tune");
  add_common(tbl, copts);
  tbl->add_option("--lm", lm_path, "model checkpoint")->required();
  tbl->add_option("--train", train_path, "training dataset (jsonl)")->required();
  tbl->add_option("--val", val_path, "validation dataset (jsonl)")->required();

  auto* eval_cmd = app.add_subcommand("eval-loss", "evaluate the SimPO loss on a dataset");
  add_common(eval_cmd, copts);
  eval_cmd->add_option("--lm", lm_path, "model checkpoint")->required();
  eval_cmd->add_option("--sae", sae_path, "sae checkpoint (with --adapter)");
  eval_cmd->add_option("--adapter", adapter_path, "adapter checkpoint (with --sae)");
  eval_cmd->add_option("--data", data_path, "dataset (jsonl)")->required();

  auto* abl = app.add_subcommand("ablate", "category ablation of the steering vector");
  add_common(abl, copts);
  abl->add_option("--lm", lm_path, "model checkpoint")->required();
  abl->add_option("--sae", sae_path, "sae checkpoint")->required();
  abl->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  abl->add_option("--data", data_path, "dataset (jsonl)")->required();
  abl->add_option("--masks", masks_path, "mask file (derived from --data when omitted)");

  auto* topk = app.add_subcommand("topk-baseline", "static top-k% steering baseline");
  add_common(topk, copts);
  topk->add_option("--lm", lm_path, "model checkpoint")->required();
  topk->add_option("--sae", sae_path, "sae checkpoint")->required();
  topk->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  topk->add_option("--data", data_path, "dataset (jsonl)")->required();

  auto* usage = app.add_subcommand("analyze-usage", "steered feature usage distribution");
  add_common(usage, copts);
  usage->add_option("--lm", lm_path, "model checkpoint")->required();
  usage->add_option("--sae", sae_path, "sae checkpoint")->required();
  usage->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  usage->add_option("--data", data_path, "dataset (jsonl)")->required();
  usage->add_option("--masks", masks_path, "mask file (derived from --data when omitted)");

  auto* comp = app.add_subcommand("composition", "active-feature composition per category");
  add_common(comp, copts);
  comp->add_option("--lm", lm_path, "model checkpoint")->required();
  comp->add_option("--sae", sae_path, "sae checkpoint")->required();
  comp->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  comp->add_option("--data", data_path, "dataset (jsonl)")->required();
  comp->add_option("--masks", masks_path, "mask file (derived from --data when omitted)");

  auto* sweep = app.add_subcommand("sweep", "train one adapter per configuration");
  add_common(sweep, copts);
  sweep->add_option("--lm", lm_path, "model checkpoint")->required();
  sweep->add_option("--sae", sae_path, "sae checkpoint (alpha/variant sweeps)");
  sweep->add_option("--corpus", corpus_path, "corpus file (layer sweeps)");
  sweep->add_option("--train", train_path, "training dataset (jsonl)")->required();
  sweep->add_option("--val", val_path, "validation dataset (jsonl)")->required();

  auto* theory = app.add_subcommand("verify-theory", "affine form and rank bound checks");
  add_common(theory, copts);
  theory->add_option("--sae", sae_path, "sae checkpoint (built-in fixture when omitted)");
  theory->add_option("--adapter", adapter_path, "adapter checkpoint");
  theory->add_option("--trials", trials, "number of random reference points")
      ->capture_default_str();
  theory->add_option("--deltas", deltas, "perturbations per reference point")
      ->capture_default_str();

  auto* gc = app.add_subcommand("grad-check", "finite-difference audit of trainable paths");
  add_common(gc, copts);
  gc->add_option("--instances", instances, "random instances per suite")
      ->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\nerror: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(copts);
    if (tlm->parsed()) return cmd_train_lm(copts, corpus_path);
    if (tsae->parsed()) return cmd_train_sae(copts, lm_path, corpus_path);
    if (tad->parsed())
      return cmd_train_adapter(copts, lm_path, sae_path, train_path, val_path, variant_flag,
                               alpha_flag);
    if (tbl->parsed()) return cmd_train_baseline(copts, lm_path, train_path, val_path);
    if (eval_cmd->parsed()) return cmd_eval_loss(copts, lm_path, sae_path, adapter_path, data_path);
    if (abl->parsed())
      return cmd_ablate(copts, lm_path, sae_path, adapter_path, data_path, masks_path);
    if (topk->parsed()) return cmd_topk(copts, lm_path, sae_path, adapter_path, data_path);
    if (usage->parsed())
      return cmd_analyze_usage(copts, lm_path, sae_path, adapter_path, data_path, masks_path);
    if (comp->parsed())
      return cmd_composition(copts, lm_path, sae_path, adapter_path, data_path, masks_path);
    if (sweep->parsed())
      return cmd_sweep(copts, lm_path, sae_path, corpus_path, train_path, val_path);
    if (theory->parsed())
      return cmd_verify_theory(copts, sae_path, adapter_path, trials, deltas);
    if (gc->parsed()) return cmd_grad_check(copts, instances);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitUsage;
}

}  // namespace fsrl
