#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "steering.hpp"

namespace steer {

// Content address of a stored KV cache: the model, serving prefix,
// context, and plan it was computed from. plan_hash is zero for
// unsteered entries.
struct CacheKey {
  uint64_t model_hash = 0;
  uint64_t prefix_hash = 0;
  uint64_t context_hash = 0;
  uint64_t plan_hash = 0;

  std::string hex() const;  // 64 lowercase hex chars
  static std::optional<CacheKey> from_hex(std::string_view text);
  bool operator==(const CacheKey&) const = default;
};

CacheKey key_for(const KVCache& cache);  // from provenance
CacheKey make_key(const ModelWeights& weights, std::string_view serving_prefix,
                  std::string_view context, const SteeringPlan* plan);

// Cache file: magic "LLMK" | version u32 | model_hash u64 | prefix_hash
// u64 | context_hash u64 | plan_hash u64 | n_layers u32 | n_heads u32 |
// head_dim u32 | cached_len u32 | token ids u32*cached_len | per-layer K
// then V as f32 (head-major, then position, then dim) | FNV-1a u64 over
// everything before the checksum. All little-endian.
std::vector<uint8_t> serialize_cache(const KVCache& cache);
KVCache deserialize_cache(const std::vector<uint8_t>& bytes);
size_t cache_file_size(uint32_t n_layers, uint32_t n_heads, uint32_t head_dim,
                       uint32_t cached_len);

// One directory per store: manifest.json plus one <key>.kv file (and
// optional <key>.plan.json) per entry. Writers publish via temp file +
// rename and serialize manifest updates through a lock file, so readers
// never observe partial content.
class CacheStore {
 public:
  explicit CacheStore(std::filesystem::path root);

  struct Entry {
    std::string file;
    std::string plan_file;  // empty when no plan stored
    uint32_t cached_len = 0;
    uint64_t bytes = 0;
    int64_t created_ms = 0;
  };

  struct GetResult {
    KVCache cache;
    std::optional<SteeringPlan> plan;
  };

  // Validates the key against the cache's provenance, then publishes
  // atomically. Re-putting an existing key is a no-op.
  Entry put(const CacheKey& key, const KVCache& cache, const SteeringPlan* plan);

  // nullopt means miss. A entry that fails its checksum is quarantined
  // (renamed *.corrupt, dropped from the manifest) and reported as an
  // ErrorCode::corrupt failure.
  std::optional<GetResult> get(const CacheKey& key);

  bool contains(const CacheKey& key);
  std::optional<Entry> find(const CacheKey& key);
  size_t entry_count();

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

}  // namespace steer
