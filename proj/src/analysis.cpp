#include "fsrl/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fsrl/rng.hpp"

namespace fsrl {

namespace {

constexpr std::array<const char*, 3> kContextNames = {"prompt_only", "prompt_chosen",
                                                      "prompt_rejected"};

struct ActivationProfiles {
  // Per context: one sorted index set per token.
  std::array<std::vector<std::vector<int64_t>>, 3> baseline_sets;  // f_i > 0, unsteered
  std::array<std::vector<std::vector<int64_t>>, 3> steered_sets;   // v_i != 0
  int64_t d_sae = 0;
};

std::vector<int64_t> positive_set(std::span<const double> row, bool strict_nonzero) {
  std::vector<int64_t> s;
  for (size_t i = 0; i < row.size(); ++i) {
    const double x = row[i];
    if (strict_nonzero ? (x != 0.0) : (x > 0.0)) s.push_back(static_cast<int64_t>(i));
  }
  return s;
}

ActivationProfiles collect_profiles(const LM& lm, const SparseAutoencoder& sae,
                                    const SteeringAdapter& adapter,
                                    std::span<const PreferenceTriplet> data) {
  if (data.empty()) throw DataError("analysis: empty dataset");
  NoGradGuard ng;
  ActivationProfiles prof;
  prof.d_sae = sae.d_sae;
  for (const PreferenceTriplet& t : data) {
    const int64_t plen = static_cast<int64_t>(t.prompt.size());
    {
      TokenSequence seq = t.chosen_seq();
      ForwardResult fr = forward_with_hook(lm, seq.tokens);
      Tensor f = sae.encode(fr.hook_acts);
      Tensor v = adapter.forward(fr.hook_acts);
      const int64_t n = fr.hook_acts.rows();
      for (int64_t r = 0; r < n; ++r) {
        auto frow = f.values().subspan(static_cast<size_t>(r * sae.d_sae),
                                       static_cast<size_t>(sae.d_sae));
        auto vrow = v.values().subspan(static_cast<size_t>(r * sae.d_sae),
                                       static_cast<size_t>(sae.d_sae));
        std::vector<int64_t> bset = positive_set(frow, false);
        std::vector<int64_t> sset = positive_set(vrow, true);
        if (r < plen) {
          prof.baseline_sets[0].push_back(bset);
          prof.steered_sets[0].push_back(sset);
        }
        prof.baseline_sets[1].push_back(std::move(bset));
        prof.steered_sets[1].push_back(std::move(sset));
      }
    }
    {
      TokenSequence seq = t.rejected_seq();
      ForwardResult fr = forward_with_hook(lm, seq.tokens);
      Tensor f = sae.encode(fr.hook_acts);
      Tensor v = adapter.forward(fr.hook_acts);
      const int64_t n = fr.hook_acts.rows();
      for (int64_t r = 0; r < n; ++r) {
        auto frow = f.values().subspan(static_cast<size_t>(r * sae.d_sae),
                                       static_cast<size_t>(sae.d_sae));
        auto vrow = v.values().subspan(static_cast<size_t>(r * sae.d_sae),
                                       static_cast<size_t>(sae.d_sae));
        prof.baseline_sets[2].push_back(positive_set(frow, false));
        prof.steered_sets[2].push_back(positive_set(vrow, true));
      }
    }
  }
  return prof;
}

int64_t intersection_size(std::span<const int64_t> sorted_a, std::span<const int64_t> sorted_b) {
  int64_t n = 0;
  size_t i = 0, j = 0;
  while (i < sorted_a.size() && j < sorted_b.size()) {
    if (sorted_a[i] < sorted_b[j])
      ++i;
    else if (sorted_b[j] < sorted_a[i])
      ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

double mean_or_nan(std::span<const double> vals, std::span<const uint8_t> valid) {
  double s = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < vals.size(); ++i)
    if (valid[i]) {
      s += vals[i];
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::nan("");
}

}  // namespace

// ---- masks ----

std::vector<FeatureCategoryMask> derive_category_masks(
    const LM& lm, const SparseAutoencoder& sae, std::span<const PreferenceTriplet> labeled,
    const MaskConfig& cfg) {
  if (labeled.empty()) throw DataError("derive_category_masks: empty labeled dataset");
  if (cfg.ratio <= 0.0) throw ConfigError("derive_category_masks: ratio must be > 0");
  NoGradGuard ng;

  const int64_t d_sae = sae.d_sae;
  std::map<char, std::vector<double>> sums;
  std::map<char, int64_t> counts;
  for (char c : {'s', 'c', 'o'}) {
    sums[c].assign(static_cast<size_t>(d_sae), 0.0);
    counts[c] = 0;
  }

  const int64_t limit = std::min<int64_t>(static_cast<int64_t>(labeled.size()), cfg.max_docs);
  for (int64_t di = 0; di < limit; ++di) {
    const PreferenceTriplet& t = labeled[static_cast<size_t>(di)];
    const std::string labels = t.prompt_labels + t.response_labels;
    TokenSequence seq = t.chosen_seq();
    if (labels.size() != seq.tokens.size())
      throw DataError("derive_category_masks: labels do not align with tokens");
    ForwardResult fr = forward_with_hook(lm, seq.tokens);
    Tensor f = sae.encode(fr.hook_acts);
    for (size_t r = 0; r < labels.size(); ++r) {
      const char cls = labels[r];
      auto it = sums.find(cls);
      if (it == sums.end())
        throw DataError(strprintf("derive_category_masks: unknown label '%c'", cls));
      counts[cls] += 1;
      auto frow = f.values().subspan(r * static_cast<size_t>(d_sae),
                                     static_cast<size_t>(d_sae));
      for (int64_t i = 0; i < d_sae; ++i) it->second[static_cast<size_t>(i)] += frow[i];
    }
  }

  std::vector<FeatureCategoryMask> masks;
  for (auto [cls, name] : {std::pair<char, const char*>{'s', "style"}, {'c', "content"}}) {
    if (counts[cls] == 0)
      throw DataError(strprintf("derive_category_masks: class '%c' has no tokens", cls));
    const int64_t n_in = counts[cls];
    int64_t n_out = 0;
    for (auto& [c2, n2] : counts)
      if (c2 != cls) n_out += n2;
    if (n_out == 0)
      throw DataError("derive_category_masks: complement class has no tokens");
    FeatureCategoryMask mask;
    mask.name = name;
    for (int64_t i = 0; i < d_sae; ++i) {
      const double mean_in = sums[cls][static_cast<size_t>(i)] / static_cast<double>(n_in);
      double sum_out = 0.0;
      for (auto& [c2, s2] : sums)
        if (c2 != cls) sum_out += s2[static_cast<size_t>(i)];
      const double mean_out = sum_out / static_cast<double>(n_out);
      if (mean_in > 0.0 && (mean_out == 0.0 || mean_in > cfg.ratio * mean_out))
        mask.members.push_back(i);
    }
    masks.push_back(std::move(mask));
  }
  return masks;
}

void write_masks(const std::string& path, std::span<const FeatureCategoryMask> masks,
                 const std::string& config_snapshot_json) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open masks file for writing: " + path);
  if (!config_snapshot_json.empty()) f << "# config: " << config_snapshot_json << '\n';
  for (const auto& m : masks) {
    f << m.name << ":";
    for (int64_t i : m.members) f << ' ' << i;
    f << '\n';
  }
  if (!f) throw IoError("failed writing masks file: " + path);
}

std::vector<FeatureCategoryMask> read_masks(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open masks file: " + path);
  std::vector<FeatureCategoryMask> masks;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t colon = line.find(':');
    if (colon == std::string::npos) throw DataError("masks: malformed line in " + path);
    FeatureCategoryMask m;
    m.name = line.substr(0, colon);
    std::istringstream rest(line.substr(colon + 1));
    int64_t idx;
    while (rest >> idx) m.members.push_back(idx);
    if (!std::is_sorted(m.members.begin(), m.members.end()))
      throw DataError("masks: indices must be sorted in " + path);
    masks.push_back(std::move(m));
  }
  if (masks.empty()) throw DataError("masks: no masks in " + path);
  return masks;
}

// ---- composition ----

CompositionValue composition_metric(std::span<const std::vector<int64_t>> active_sets,
                                    std::span<const int64_t> mask_sorted) {
  CompositionValue out;
  double total = 0.0;
  for (const auto& s : active_sets) {
    if (s.empty()) {
      out.skipped += 1;
      continue;
    }
    total += static_cast<double>(intersection_size(s, mask_sorted)) /
             static_cast<double>(s.size());
    out.used += 1;
  }
  if (out.used == 0) throw DataError("composition_metric: all active sets are empty");
  out.proportion = total / static_cast<double>(out.used);
  return out;
}

std::vector<CompositionReport> composition_report(
    const LM& lm, const SparseAutoencoder& sae, const SteeringAdapter& adapter,
    std::span<const PreferenceTriplet> data, std::span<const FeatureCategoryMask> masks,
    int64_t bootstrap_resamples, uint64_t seed) {
  if (masks.empty()) throw ConfigError("composition_report: no masks given");
  if (bootstrap_resamples < 1)
    throw ConfigError("composition_report: bootstrap_resamples must be >= 1");
  ActivationProfiles prof = collect_profiles(lm, sae, adapter, data);

  std::vector<CompositionReport> reports;
  Rng rng = Rng::stream(seed, "composition-bootstrap");
  for (int ctx = 0; ctx < 3; ++ctx) {
    const auto& bsets = prof.baseline_sets[static_cast<size_t>(ctx)];
    const auto& ssets = prof.steered_sets[static_cast<size_t>(ctx)];
    const size_t n_tok = bsets.size();
    if (n_tok == 0)
      throw DataError(strprintf("composition_report: context %s has zero tokens",
                                kContextNames[static_cast<size_t>(ctx)]));
    for (const auto& mask : masks) {
      CompositionReport rep;
      rep.context = kContextNames[static_cast<size_t>(ctx)];
      rep.mask = mask.name;
      rep.tokens = static_cast<int64_t>(n_tok);

      // Per-token proportions, NaN-free arrays with validity flags.
      std::vector<double> bprop(n_tok, 0.0), sprop(n_tok, 0.0);
      std::vector<uint8_t> bok(n_tok, 0), sok(n_tok, 0);
      for (size_t i = 0; i < n_tok; ++i) {
        if (!bsets[i].empty()) {
          bprop[i] = static_cast<double>(intersection_size(bsets[i], mask.members)) /
                     static_cast<double>(bsets[i].size());
          bok[i] = 1;
        } else {
          rep.skipped_baseline += 1;
        }
        if (!ssets[i].empty()) {
          sprop[i] = static_cast<double>(intersection_size(ssets[i], mask.members)) /
                     static_cast<double>(ssets[i].size());
          sok[i] = 1;
        } else {
          rep.skipped_steered += 1;
        }
      }

      const double bmean = mean_or_nan(bprop, bok);
      const double smean = mean_or_nan(sprop, sok);
      if (std::isnan(bmean)) {
        rep.note = "baseline active sets all empty";
        reports.push_back(std::move(rep));
        continue;
      }
      if (std::isnan(smean)) {
        rep.note = "steering vector is zero on every token";
        rep.sae_baseline_pct = 100.0 * bmean;
        reports.push_back(std::move(rep));
        continue;
      }
      if (bmean == 0.0) {
        rep.note = "baseline proportion is zero; relative change undefined";
        rep.sae_baseline_pct = 0.0;
        rep.steered_pct = 100.0 * smean;
        reports.push_back(std::move(rep));
        continue;
      }

      rep.sae_baseline_pct = 100.0 * bmean;
      rep.steered_pct = 100.0 * smean;
      rep.relative_change_pct = (smean - bmean) / bmean * 100.0;

      // Token-level paired bootstrap.
      double b_m1 = 0.0, b_m2 = 0.0, s_m1 = 0.0, s_m2 = 0.0, r_m1 = 0.0, r_m2 = 0.0;
      int64_t r_n = 0;
      std::vector<double> rb(n_tok), rs(n_tok);
      std::vector<uint8_t> rbok(n_tok), rsok(n_tok);
      for (int64_t it = 0; it < bootstrap_resamples; ++it) {
        for (size_t i = 0; i < n_tok; ++i) {
          const size_t pick = static_cast<size_t>(rng.randbelow(n_tok));
          rb[i] = bprop[pick];
          rbok[i] = bok[pick];
          rs[i] = sprop[pick];
          rsok[i] = sok[pick];
        }
        const double mb = mean_or_nan(rb, rbok);
        const double ms = mean_or_nan(rs, rsok);
        if (!std::isnan(mb)) {
          b_m1 += mb;
          b_m2 += mb * mb;
        }
        if (!std::isnan(ms)) {
          s_m1 += ms;
          s_m2 += ms * ms;
        }
        if (!std::isnan(mb) && !std::isnan(ms) && mb != 0.0) {
          const double rc = (ms - mb) / mb * 100.0;
          r_m1 += rc;
          r_m2 += rc * rc;
          ++r_n;
        }
      }
      auto stddev = [](double m1, double m2, double n) {
        if (n < 2.0) return 0.0;
        const double mean = m1 / n;
        const double var = std::max(0.0, m2 / n - mean * mean);
        return std::sqrt(var);
      };
      const double nb = static_cast<double>(bootstrap_resamples);
      rep.baseline_se_pct = 100.0 * stddev(b_m1, b_m2, nb);
      rep.steered_se_pct = 100.0 * stddev(s_m1, s_m2, nb);
      rep.relative_change_se_pct = stddev(r_m1, r_m2, static_cast<double>(r_n));
      rep.valid = true;
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

// ---- ablation ----

SteeringTransform make_ablation_transform(std::vector<int64_t> features, int64_t d_sae) {
  std::vector<double> keep(static_cast<size_t>(d_sae), 1.0);
  for (int64_t i : features) {
    if (i < 0 || i >= d_sae)
      throw ShapeError(strprintf("ablation: feature %lld out of range [0,%lld)",
                                 static_cast<long long>(i), static_cast<long long>(d_sae)));
    keep[static_cast<size_t>(i)] = 0.0;
  }
  const bool identity = features.empty();
  Tensor mask = Tensor::from_values({d_sae}, std::move(keep));
  return [mask, identity](const Tensor& v) { return identity ? v : mul(v, mask); };
}

AblationResult ablate_categories(const LM& lm, const SparseAutoencoder& sae,
                                 const SteeringAdapter& adapter,
                                 std::span<const PreferenceTriplet> val_set,
                                 std::span<const FeatureCategoryMask> masks,
                                 const SimPOConfig& cfg) {
  AblationResult result;
  result.unsteered_loss = eval_simpo_loss(lm, nullptr, nullptr, val_set, cfg).loss;
  result.full_loss = eval_simpo_loss(lm, &sae, &adapter, val_set, cfg).loss;
  result.rows.push_back({"none", 0, result.full_loss, 0.0, false});

  auto eval_with = [&](std::vector<int64_t> feats) {
    SteeringTransform tr = make_ablation_transform(std::move(feats), sae.d_sae);
    return eval_simpo_loss(lm, &sae, &adapter, val_set, cfg, &tr).loss;
  };
  auto push_row = [&](const std::string& name, std::vector<int64_t> feats) {
    const int64_t count = static_cast<int64_t>(feats.size());
    const double loss = eval_with(std::move(feats));
    AblationRow row{name, count, loss, 0.0, false};
    if (count > 0) {
      row.loss_per_feature = (loss - result.full_loss) / static_cast<double>(count);
      row.has_loss_per_feature = true;
    }
    result.rows.push_back(row);
    return loss;
  };

  std::vector<double> mask_losses;
  std::vector<int64_t> union_feats;
  for (const auto& m : masks) {
    mask_losses.push_back(push_row(m.name, m.members));
    union_feats.insert(union_feats.end(), m.members.begin(), m.members.end());
  }
  std::sort(union_feats.begin(), union_feats.end());
  union_feats.erase(std::unique(union_feats.begin(), union_feats.end()), union_feats.end());

  double union_loss = result.full_loss;
  if (masks.size() >= 2) union_loss = push_row("union", union_feats);

  std::vector<int64_t> all(static_cast<size_t>(sae.d_sae));
  for (int64_t i = 0; i < sae.d_sae; ++i) all[static_cast<size_t>(i)] = i;
  push_row("all_features", std::move(all));

  if (masks.size() == 2) {
    result.interaction =
        union_loss - mask_losses[0] - mask_losses[1] + result.full_loss;
    result.has_interaction = true;
  }
  return result;
}

// ---- static top-k ----

Tensor topk_truncate(const Tensor& v, int64_t quota) {
  if (quota < 1) throw ConfigError("topk_truncate: quota must be >= 1");
  const int64_t n = v.rank() == 2 ? v.dim(1) : v.numel();
  if (quota >= n) return v;  // keep-everything is the exact identity
  const int64_t m = v.rank() == 2 ? v.dim(0) : 1;
  std::vector<double> out(v.values().begin(), v.values().end());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t r = 0; r < m; ++r) {
    const double* row = v.values().data() + r * n;
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    // Magnitude descending; ties broken by lower feature index.
    std::sort(idx.begin(), idx.end(), [row](int64_t a, int64_t b) {
      const double fa = std::fabs(row[a]), fb = std::fabs(row[b]);
      if (fa != fb) return fa > fb;
      return a < b;
    });
    for (int64_t i = quota; i < n; ++i)
      out[static_cast<size_t>(r * n + idx[static_cast<size_t>(i)])] = 0.0;
  }
  return Tensor::from_values(v.shape(), std::move(out));
}

TopkResult static_topk_baseline(const LM& lm, const SparseAutoencoder& sae,
                                const SteeringAdapter& adapter,
                                std::span<const PreferenceTriplet> val_set,
                                std::span<const double> k_pcts, const SimPOConfig& cfg) {
  for (double k : k_pcts)
    if (!(k > 0.0) || k > 100.0)
      throw ConfigError(strprintf("topk: k percentage %g out of (0,100]", k));

  TopkResult result;
  EvalResult dyn = eval_simpo_loss(lm, &sae, &adapter, val_set, cfg);
  result.full_loss = dyn.loss;
  result.dynamic_loss = dyn.loss;
  result.dynamic_mean_l0 = dyn.adapter_mean_l0;

  const int64_t d_sae = sae.d_sae;
  for (double k : k_pcts) {
    const int64_t quota = std::min<int64_t>(
        d_sae, static_cast<int64_t>(std::ceil(k / 100.0 * static_cast<double>(d_sae))));
    SteeringTransform tr = [quota](const Tensor& v) { return topk_truncate(v, quota); };
    EvalResult ev = eval_simpo_loss(lm, &sae, &adapter, val_set, cfg, &tr);
    result.curve.push_back({k, quota, ev.adapter_mean_l0, ev.loss});
  }
  return result;
}

// ---- usage distribution ----

UsageResult usage_from_frequencies(std::vector<double> freqs) {
  if (freqs.size() < 2) throw DataError("usage: need at least two features");
  UsageResult out;
  out.ranked.reserve(freqs.size());
  for (size_t i = 0; i < freqs.size(); ++i)
    out.ranked.push_back({0, static_cast<int64_t>(i), freqs[i]});
  std::sort(out.ranked.begin(), out.ranked.end(), [](const UsageRow& a, const UsageRow& b) {
    if (a.freq != b.freq) return a.freq > b.freq;
    return a.feature < b.feature;
  });
  int64_t nonzero = 0;
  for (size_t i = 0; i < out.ranked.size(); ++i) {
    out.ranked[i].rank = static_cast<int64_t>(i);
    if (out.ranked[i].freq > 0.0) ++nonzero;
  }
  if (nonzero == 0) throw DataError("usage: all-zero usage");
  if (nonzero < 2) throw DataError("usage: fewer than two features with nonzero usage");

  // Least squares of ln(freq) on rank over the nonzero prefix.
  const int64_t n = nonzero;
  double sx = 0.0, sy = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    sx += static_cast<double>(i);
    sy += std::log(out.ranked[static_cast<size_t>(i)].freq);
  }
  const double xbar = sx / static_cast<double>(n);
  const double ybar = sy / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xbar;
    const double dy = std::log(out.ranked[static_cast<size_t>(i)].freq) - ybar;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  out.fit.n_nonzero = n;
  out.fit.slope = sxy / sxx;
  out.fit.intercept = ybar - out.fit.slope * xbar;
  if (syy == 0.0) {
    out.fit.r2 = 1.0;  // constant y is fit exactly by the constant line
  } else {
    double ssres = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double pred = out.fit.intercept + out.fit.slope * static_cast<double>(i);
      const double resid = std::log(out.ranked[static_cast<size_t>(i)].freq) - pred;
      ssres += resid * resid;
    }
    out.fit.r2 = 1.0 - ssres / syy;
  }
  return out;
}

UsageReport analyze_usage(const LM& lm, const SparseAutoencoder& sae,
                          const SteeringAdapter& adapter,
                          std::span<const PreferenceTriplet> data,
                          std::span<const FeatureCategoryMask> masks) {
  ActivationProfiles prof = collect_profiles(lm, sae, adapter, data);
  UsageReport report;

  // Mean L0 of adapter and SAE side by side over all scored tokens
  // (chosen + rejected forwards).
  int64_t tok = 0, v_nz = 0, f_nz = 0;
  for (int ctx : {1, 2}) {
    for (const auto& s : prof.steered_sets[static_cast<size_t>(ctx)])
      v_nz += static_cast<int64_t>(s.size());
    for (const auto& s : prof.baseline_sets[static_cast<size_t>(ctx)])
      f_nz += static_cast<int64_t>(s.size());
    tok += static_cast<int64_t>(prof.steered_sets[static_cast<size_t>(ctx)].size());
  }
  report.summary.tokens = tok;
  report.summary.adapter_mean_l0 = tok ? static_cast<double>(v_nz) / tok : 0.0;
  report.summary.sae_mean_l0 = tok ? static_cast<double>(f_nz) / tok : 0.0;

  for (int ctx = 0; ctx < 3; ++ctx) {
    const auto& ssets = prof.steered_sets[static_cast<size_t>(ctx)];
    const double n_tok = static_cast<double>(ssets.size());
    std::vector<double> counts(static_cast<size_t>(prof.d_sae), 0.0);
    for (const auto& s : ssets)
      for (int64_t i : s) counts[static_cast<size_t>(i)] += 1.0;
    std::vector<double> freqs(counts.size());
    for (size_t i = 0; i < counts.size(); ++i) freqs[i] = counts[i] / n_tok;

    auto push = [&](const std::string& subset, std::vector<double> f,
                    const std::vector<int64_t>* remap) {
      UsageAnalysis ua;
      ua.context = kContextNames[static_cast<size_t>(ctx)];
      ua.subset = subset;
      try {
        ua.result = usage_from_frequencies(std::move(f));
        if (remap)
          for (auto& row : ua.result.ranked)
            row.feature = (*remap)[static_cast<size_t>(row.feature)];
        ua.valid = true;
      } catch (const DataError& e) {
        ua.note = e.what();
      }
      report.analyses.push_back(std::move(ua));
    };

    push("all", freqs, nullptr);
    for (const auto& m : masks) {
      std::vector<double> sub;
      sub.reserve(m.members.size());
      for (int64_t i : m.members) sub.push_back(freqs[static_cast<size_t>(i)]);
      push(m.name, std::move(sub), &m.members);
    }
  }
  return report;
}

// ---- sweeps ----

std::vector<SweepRow> run_sweep(const LM& lm, const SparseAutoencoder* sae,
                                const std::vector<std::vector<int32_t>>& corpus,
                                std::span<const PreferenceTriplet> train_set,
                                std::span<const PreferenceTriplet> val_set,
                                const SimPOConfig& base_cfg, const SAETrainConfig& sae_cfg,
                                const SweepSpec& spec, uint64_t seed) {
  const bool layer_sweep = spec.kind == "layer";
  const bool alpha_sweep = spec.kind == "alpha_steer";
  const bool variant_sweep = spec.kind == "variant";
  if (!layer_sweep && !alpha_sweep && !variant_sweep)
    throw ConfigError("sweep: kind must be one of alpha_steer|layer|variant");
  const size_t n_runs =
      variant_sweep ? spec.string_values.size() : spec.numeric_values.size();
  if (n_runs == 0) throw ConfigError("sweep: empty config list");
  if (!layer_sweep && sae == nullptr)
    throw ConfigError("sweep: alpha/variant sweeps need a trained SAE");
  if (layer_sweep && corpus.empty())
    throw ConfigError("sweep: layer sweep needs the corpus to train per-layer SAEs");

  std::vector<SweepRow> rows;
  for (size_t run = 0; run < n_runs; ++run) {
    SweepRow row;
    SimPOConfig cfg = base_cfg;
    cfg.epochs = spec.epochs;
    AdapterVariant variant = AdapterVariant::soft_threshold;
    LM model = lm;  // shares frozen tensors; only cfg may change per run
    try {
      const SparseAutoencoder* run_sae = sae;
      SAETrainResult trained_sae;
      if (alpha_sweep) {
        cfg.alpha_steer = spec.numeric_values[run];
        row.label = strprintf("alpha_steer=%g", cfg.alpha_steer);
      } else if (variant_sweep) {
        variant = variant_from_name(spec.string_values[run]);
        row.label = strprintf("variant=%s", spec.string_values[run].c_str());
      } else {
        const double lv = spec.numeric_values[run];
        const int64_t layer = static_cast<int64_t>(lv);
        if (static_cast<double>(layer) != lv)
          throw ConfigError(strprintf("sweep: layer value %g is not an integer", lv));
        row.label = strprintf("layer=%lld", static_cast<long long>(layer));
        model.cfg.hook_layer = layer;  // validated inside LMConfig
        model.cfg.validate();
        trained_sae = train_sae(model, corpus, sae_cfg, seed);
        run_sae = &trained_sae.sae;
      }

      Rng init_rng = Rng::stream(seed, "adapter-init");
      SteeringAdapter adapter =
          SteeringAdapter::init(run_sae->d, run_sae->d_sae, variant, init_rng);
      TrainAdapterResult res = train_adapter(model, *run_sae, std::move(adapter), train_set,
                                             val_set, cfg, seed,
                                             /*require_improvement=*/false);
      row.final_val_loss = res.metrics.final_val_loss;
      row.mean_l0 = res.metrics.final_val_mean_l0;
      row.status = "ok";
    } catch (const std::exception& e) {
      if (row.label.empty()) row.label = strprintf("run=%zu", run);
      row.status = std::string("error: ") + e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace fsrl
