#include "tokenizer.hpp"

namespace steer {

std::vector<uint32_t> tokenize(std::string_view text) {
  std::vector<uint32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    ids.push_back(static_cast<uint32_t>(c) + kNumSpecialTokens);
  }
  return ids;
}

std::string detokenize(std::span<const uint32_t> ids) {
  std::string text;
  text.reserve(ids.size());
  for (uint32_t id : ids) {
    if (id >= kNumSpecialTokens && id < kByteVocabSize) {
      text.push_back(static_cast<char>(id - kNumSpecialTokens));
    }
  }
  return text;
}

}  // namespace steer
