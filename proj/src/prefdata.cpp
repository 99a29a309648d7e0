#include "fsrl/prefdata.hpp"

#include <array>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fsrl/rng.hpp"
#include "fsrl/util.hpp"

namespace fsrl {

namespace {

using nlohmann::json;

constexpr std::array<const char*, 8> kKeys = {"alpha", "beta",  "gamma", "delta",
                                              "omega", "sigma", "kappa", "eta"};
constexpr std::array<const char*, 8> kValues = {"17", "42", "73", "58", "29", "64", "31", "95"};
const std::string kStylePool = "[];:#*{}";

char random_pool_char(Rng& rng, char exclude) {
  for (;;) {
    const char c = kStylePool[rng.randbelow(kStylePool.size())];
    if (c != exclude) return c;
  }
}

char random_digit(Rng& rng, char exclude) {
  for (;;) {
    const char c = static_cast<char>('0' + rng.randbelow(10));
    if (c != exclude) return c;
  }
}

std::string random_value(Rng& rng) {
  std::string v;
  v.push_back(static_cast<char>('0' + rng.randbelow(10)));
  v.push_back(static_cast<char>('0' + rng.randbelow(10)));
  return v;
}

std::string corpus_line(Rng& rng, double value_noise_rate) {
  const size_t ki = rng.randbelow(kKeys.size());
  const std::string digits =
      rng.bernoulli(value_noise_rate) ? random_value(rng) : std::string(kValues[ki]);
  if (rng.bernoulli(0.7)) {
    const char sep = kStylePool[rng.randbelow(kStylePool.size())];
    const char open = kStylePool[rng.randbelow(kStylePool.size())];
    const char close = kStylePool[rng.randbelow(kStylePool.size())];
    const char end = kStylePool[rng.randbelow(kStylePool.size())];
    return strprintf("ask %s %c %cval %s%c %c", kKeys[ki], sep, open, digits.c_str(), close,
                     end);
  }
  const char end = kStylePool[rng.randbelow(kStylePool.size())];
  return strprintf("%s is %s %c", kKeys[ki], digits.c_str(), end);
}

std::string label_prompt(const std::string& prompt) {
  std::string labels(prompt.size(), 'o');
  for (size_t i = 0; i < prompt.size(); ++i)
    if (kStylePool.find(prompt[i]) != std::string::npos) labels[i] = 's';
  return labels;
}

std::string label_response(const std::string& response) {
  std::string labels(response.size(), 'o');
  for (size_t i = 0; i < response.size(); ++i) {
    const char c = response[i];
    if (kStylePool.find(c) != std::string::npos)
      labels[i] = 's';
    else if (c >= '0' && c <= '9')
      labels[i] = 'c';
  }
  return labels;
}

PreferenceTriplet make_triplet(Rng& rng, const DataSpec& spec, GenStats& stats) {
  const size_t ki = rng.randbelow(kKeys.size());
  PreferenceTriplet t;
  t.prompt = strprintf("ask %s :", kKeys[ki]);
  t.chosen = strprintf(" [val %s] ;", kValues[ki]);
  t.prompt_labels = label_prompt(t.prompt);
  t.response_labels = label_response(t.chosen);

  t.rejected = t.chosen;
  int64_t corrupted = 0;
  for (size_t i = 0; i < t.chosen.size(); ++i) {
    const char cls = t.response_labels[i];
    if (cls == 's') {
      stats.style_sites += 1;
      if (rng.bernoulli(spec.style_corrupt_rate)) {
        t.rejected[i] = random_pool_char(rng, t.chosen[i]);
        stats.style_corruptions += 1;
        ++corrupted;
      }
    } else if (cls == 'c') {
      stats.content_sites += 1;
      if (rng.bernoulli(spec.content_corrupt_rate)) {
        t.rejected[i] = random_digit(rng, t.chosen[i]);
        stats.content_corruptions += 1;
        ++corrupted;
      }
    }
  }
  if (corrupted == 0) {
    // Keep chosen != rejected: force one corruption at the first eligible
    // site of the class with positive rate.
    for (size_t i = 0; i < t.chosen.size(); ++i) {
      const char cls = t.response_labels[i];
      if (cls == 's' && spec.style_corrupt_rate > 0.0) {
        t.rejected[i] = random_pool_char(rng, t.chosen[i]);
        stats.style_corruptions += 1;
        break;
      }
      if (cls == 'c' && spec.content_corrupt_rate > 0.0) {
        t.rejected[i] = random_digit(rng, t.chosen[i]);
        stats.content_corruptions += 1;
        break;
      }
    }
  }
  return t;
}

TokenSequence build_sequence(const std::string& prompt, const std::string& response) {
  TokenSequence seq;
  seq.tokens = CharTokenizer::encode(prompt);
  seq.roles.assign(seq.tokens.size(), Role::prompt);
  for (int32_t id : CharTokenizer::encode(response)) {
    seq.tokens.push_back(id);
    seq.roles.push_back(Role::response);
  }
  return seq;
}

}  // namespace

void DataSpec::validate() const {
  if (n_train < 1 || n_val < 1) throw ConfigError("data: n_train and n_val must be >= 1");
  if (corpus_lines < 20) throw ConfigError("data: corpus_lines must be >= 20");
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(style_corrupt_rate) || !rate_ok(content_corrupt_rate) ||
      !rate_ok(value_noise_rate))
    throw ConfigError("data: rates must lie in [0,1]");
  if (style_corrupt_rate == 0.0 && content_corrupt_rate == 0.0)
    throw ConfigError("data: corruption rates are zero; chosen would equal rejected");
}

TokenSequence PreferenceTriplet::chosen_seq() const { return build_sequence(prompt, chosen); }

TokenSequence PreferenceTriplet::rejected_seq() const {
  return build_sequence(prompt, rejected);
}

GenResult gen_preference_data(uint64_t seed, const DataSpec& spec) {
  spec.validate();
  GenResult out;
  Rng corpus_rng = Rng::stream(seed, "data-corpus");
  out.corpus.reserve(static_cast<size_t>(spec.corpus_lines));
  for (int64_t i = 0; i < spec.corpus_lines; ++i)
    out.corpus.push_back(corpus_line(corpus_rng, spec.value_noise_rate));

  Rng trip_rng = Rng::stream(seed, "data-triplets");
  for (int64_t i = 0; i < spec.n_train; ++i)
    out.train.push_back(make_triplet(trip_rng, spec, out.stats));
  for (int64_t i = 0; i < spec.n_val; ++i)
    out.val.push_back(make_triplet(trip_rng, spec, out.stats));
  return out;
}

GenStats recount_corruptions(const std::vector<PreferenceTriplet>& triplets) {
  GenStats stats;
  for (const auto& t : triplets) {
    if (t.chosen.size() != t.rejected.size() || t.chosen.size() != t.response_labels.size())
      throw DataError("recount: chosen/rejected/labels lengths differ");
    if (t.chosen == t.rejected) throw DataError("recount: chosen equals rejected");
    for (size_t i = 0; i < t.chosen.size(); ++i) {
      const char cls = t.response_labels[i];
      if (cls == 's') stats.style_sites += 1;
      if (cls == 'c') stats.content_sites += 1;
      if (t.chosen[i] != t.rejected[i]) {
        if (cls == 's')
          stats.style_corruptions += 1;
        else if (cls == 'c')
          stats.content_corruptions += 1;
        else
          throw DataError("recount: corruption at a non-labeled site");
      }
    }
  }
  return stats;
}

std::vector<std::vector<int32_t>> tokenize_corpus(const std::vector<std::string>& lines) {
  std::vector<std::vector<int32_t>> docs;
  docs.reserve(lines.size());
  for (const auto& line : lines) docs.push_back(CharTokenizer::encode(line));
  return docs;
}

void write_corpus(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus file for writing: " + path);
  for (const auto& line : lines) f << line << '\n';
  if (!f) throw IoError("failed writing corpus file: " + path);
}

std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void write_dataset(const std::string& path, const std::vector<PreferenceTriplet>& triplets,
                   const std::string& config_snapshot_json) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open dataset file for writing: " + path);
  json meta;
  meta["config_snapshot"] = json::parse(config_snapshot_json);
  f << meta.dump() << '\n';
  for (const auto& t : triplets) {
    json rec;
    rec["prompt"] = t.prompt;
    rec["chosen"] = t.chosen;
    rec["rejected"] = t.rejected;
    rec["prompt_labels"] = t.prompt_labels;
    rec["response_labels"] = t.response_labels;
    f << rec.dump() << '\n';
  }
  if (!f) throw IoError("failed writing dataset file: " + path);
}

std::vector<PreferenceTriplet> read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open dataset file: " + path);
  std::vector<PreferenceTriplet> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw DataError("dataset: malformed JSONL line in " + path);
    if (first) {
      first = false;
      if (rec.contains("config_snapshot")) continue;  // leading meta record
    }
    PreferenceTriplet t;
    try {
      t.prompt = rec.at("prompt").get<std::string>();
      t.chosen = rec.at("chosen").get<std::string>();
      t.rejected = rec.at("rejected").get<std::string>();
      t.prompt_labels = rec.at("prompt_labels").get<std::string>();
      t.response_labels = rec.at("response_labels").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError(strprintf("dataset: bad record in %s: %s", path.c_str(), e.what()));
    }
    if (t.chosen == t.rejected) throw DataError("dataset: chosen equals rejected");
    if (t.chosen.size() != t.rejected.size() ||
        t.chosen.size() != t.response_labels.size() ||
        t.prompt.size() != t.prompt_labels.size())
      throw DataError("dataset: field lengths are inconsistent");
    out.push_back(std::move(t));
  }
  if (out.empty()) throw DataError("dataset: no records in " + path);
  return out;
}

}  // namespace fsrl
