#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsrl/lm.hpp"
#include "fsrl/tokenizer.hpp"

namespace fsrl {

// Synthetic preference world. The corpus teaches a small key/value grammar
// whose delimiter characters are sampled uniformly from a style pool, so the
// base model ends up indifferent between delimiter choices. Preference
// triplets then designate one canonical style: chosen responses use the
// canonical delimiters and the key's true value, rejected responses corrupt
// style and/or content sites. The preference signal about style is therefore
// invisible to the frozen model and must be supplied by steering.
struct DataSpec {
  int64_t n_train = 2000;
  int64_t n_val = 256;
  int64_t corpus_lines = 4000;
  double style_corrupt_rate = 0.9;    // per style site in the response
  double content_corrupt_rate = 0.15; // per content (digit) site
  double value_noise_rate = 0.3;      // corpus lines carrying a wrong value

  void validate() const;
};

// Per-character class labels: 's' = style, 'c' = content, 'o' = other.
struct PreferenceTriplet {
  std::string prompt;
  std::string chosen;
  std::string rejected;  // same length as chosen; differs at corruption sites
  std::string prompt_labels;
  std::string response_labels;  // positional; applies to chosen and rejected

  TokenSequence chosen_seq() const;
  TokenSequence rejected_seq() const;
};

struct GenStats {
  int64_t style_sites = 0;
  int64_t content_sites = 0;
  int64_t style_corruptions = 0;
  int64_t content_corruptions = 0;
};

struct GenResult {
  std::vector<std::string> corpus;
  std::vector<PreferenceTriplet> train;
  std::vector<PreferenceTriplet> val;
  GenStats stats;
};

GenResult gen_preference_data(uint64_t seed, const DataSpec& spec);

// Recounts corruption sites by diffing chosen vs rejected under the labels;
// the independent oracle for GenStats.
GenStats recount_corruptions(const std::vector<PreferenceTriplet>& triplets);

std::vector<std::vector<int32_t>> tokenize_corpus(const std::vector<std::string>& lines);

// File formats: corpus is UTF-8 text, one document per line. Datasets are
// JSONL; the first line is a {"config_snapshot": ...} record, then one
// record per triplet with fields prompt/chosen/rejected/prompt_labels/
// response_labels.
void write_corpus(const std::string& path, const std::vector<std::string>& lines);
std::vector<std::string> read_corpus(const std::string& path);
void write_dataset(const std::string& path, const std::vector<PreferenceTriplet>& triplets,
                   const std::string& config_snapshot_json);
std::vector<PreferenceTriplet> read_dataset(const std::string& path);

}  // namespace fsrl
