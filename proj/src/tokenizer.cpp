#include "fsrl/tokenizer.hpp"

#include <array>

#include "fsrl/util.hpp"

namespace fsrl {

namespace {

const std::string kAlphabet =
    " \n.,:;!?()[]{}<>#*+-=/_|0123456789abcdefghijklmnopqrstuvwxyz";

std::array<int16_t, 256> build_lookup() {
  std::array<int16_t, 256> lut;
  lut.fill(-1);
  for (size_t i = 0; i < kAlphabet.size(); ++i)
    lut[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int16_t>(i);
  return lut;
}

const std::array<int16_t, 256> kLookup = build_lookup();

}  // namespace

const std::string& CharTokenizer::alphabet() { return kAlphabet; }

int64_t CharTokenizer::vocab_size() { return static_cast<int64_t>(kAlphabet.size()); }

int32_t CharTokenizer::id_of(char c) {
  const int16_t id = kLookup[static_cast<unsigned char>(c)];
  if (id < 0)
    throw DataError(strprintf("tokenizer: character 0x%02x is not in the alphabet",
                              static_cast<unsigned char>(c)));
  return id;
}

std::vector<int32_t> CharTokenizer::encode(std::string_view text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(c));
  return ids;
}

std::string CharTokenizer::decode(std::span<const int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab_size())
      throw DataError(strprintf("tokenizer: id %d out of range", id));
    out.push_back(kAlphabet[static_cast<size_t>(id)]);
  }
  return out;
}

}  // namespace fsrl
