#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fsrl {

// Character-level tokenizer over a fixed printable alphabet. No external
// vocabulary files; the id of a character is its position in alphabet().
class CharTokenizer {
 public:
  static const std::string& alphabet();
  static int64_t vocab_size();
  static int32_t id_of(char c);  // throws DataError on unknown characters
  static std::vector<int32_t> encode(std::string_view text);
  static std::string decode(std::span<const int32_t> ids);
};

}  // namespace fsrl
