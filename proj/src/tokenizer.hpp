#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steer {

// Byte-level vocabulary: ids 0..2 are specials, byte b maps to b + 3.
inline constexpr uint32_t kPadId = 0;
inline constexpr uint32_t kBosId = 1;
inline constexpr uint32_t kEosId = 2;
inline constexpr uint32_t kNumSpecialTokens = 3;
inline constexpr uint32_t kByteVocabSize = 256 + kNumSpecialTokens;  // 259

// Maps text to byte token ids. No BOS here; sequence assembly prepends a
// single BOS at position 0.
std::vector<uint32_t> tokenize(std::string_view text);

// Inverse of tokenize; special ids produce no output bytes.
std::string detokenize(std::span<const uint32_t> ids);

}  // namespace steer
