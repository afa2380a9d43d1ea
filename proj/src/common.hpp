#pragma once

#include <cstdint>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace steer {

// Error taxonomy shared by the whole engine. The C API maps these onto its
// status codes; the CLI maps them onto process exit codes.
enum class ErrorCode {
  invalid_argument,
  io,
  bad_magic,
  bad_version,
  truncated,
  size_mismatch,
  corrupt,
  stale_plan,
  overflow,
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

// 64-bit FNV-1a. Used for content hashes of weight files, cache entries,
// plans, and raw text. Not cryptographic; adequate for content addressing
// at this scale.
inline constexpr uint64_t kFnvOffsetBasis = 14695981039346656037ULL;
inline constexpr uint64_t kFnvPrime = 1099511628211ULL;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = kFnvOffsetBasis) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view text) { return fnv1a64(text.data(), text.size()); }

inline uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  return fnv1a64(bytes.data(), bytes.size());
}

std::string to_hex16(uint64_t value);
bool parse_hex16(std::string_view text, uint64_t& out);

// SplitMix64. This is the single PRNG used for weight initialization and
// dataset sampling: state advances by the golden-gamma constant and the
// output is finalized with two xor-multiply rounds.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [-1, 1), using the top 53 bits.
  double next_symmetric() {
    const double unit = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return unit * 2.0 - 1.0;
  }

  // Uniform in [0, bound).
  uint64_t next_below(uint64_t bound) { return bound == 0 ? 0 : next_u64() % bound; }

 private:
  uint64_t state_;
};

}  // namespace steer
