#include "cache_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <fstream>
#include <thread>

#include "json.hpp"

namespace steer {

namespace {

using nlohmann::json;

constexpr char kCacheMagic[4] = {'L', 'L', 'M', 'K'};
constexpr uint32_t kCacheVersion = 1;
constexpr char kManifestName[] = "manifest.json";
constexpr char kLockName[] = "manifest.lock";

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void append_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void append_f32(std::vector<uint8_t>& out, double v) {
  float f = static_cast<float>(v);
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  append_u32(out, bits);
}

uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint64_t read_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double read_f32(const uint8_t* p) {
  uint32_t bits = read_u32(p);
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return static_cast<double>(f);
}

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot open " + path.string());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

// Atomic publish: write to a unique temp file in the same directory,
// then rename over the target.
void write_file_atomic(const std::filesystem::path& path, const void* data, size_t len) {
  static std::atomic<uint64_t> sequence{0};
  const auto tmp = path.parent_path() /
                   (".tmp-" + std::to_string(::getpid()) + "-" +
                    std::to_string(sequence.fetch_add(1)) + "-" + path.filename().string());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::io, "cannot open temp file " + tmp.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    f.flush();
    if (!f) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorCode::io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::io, "rename to " + path.string() + " failed: " + ec.message());
  }
}

// Minimal single-writer mutual exclusion for manifest updates.
class LockFile {
 public:
  explicit LockFile(std::filesystem::path path) : path_(std::move(path)) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    while (true) {
      int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        ::close(fd);
        held_ = true;
        return;
      }
      if (std::chrono::steady_clock::now() > deadline) {
        fail(ErrorCode::io, "timed out waiting for store lock " + path_.string());
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  }

  ~LockFile() {
    if (held_) {
      std::error_code ec;
      std::filesystem::remove(path_, ec);
    }
  }

 private:
  std::filesystem::path path_;
  bool held_ = false;
};

json load_manifest(const std::filesystem::path& root) {
  const auto path = root / kManifestName;
  if (!std::filesystem::exists(path)) {
    return json{{"version", 1}, {"entries", json::object()}};
  }
  const auto bytes = read_file(path);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("entries")) {
    fail(ErrorCode::corrupt, "manifest is not valid JSON: " + path.string());
  }
  return j;
}

void store_manifest(const std::filesystem::path& root, const json& manifest) {
  const std::string text = manifest.dump();
  write_file_atomic(root / kManifestName, text.data(), text.size());
}

CacheStore::Entry entry_from_json(const json& j) {
  CacheStore::Entry e;
  e.file = j.value("file", "");
  e.plan_file = j.value("plan_file", "");
  e.cached_len = j.value("cached_len", 0u);
  e.bytes = j.value("bytes", uint64_t{0});
  e.created_ms = j.value("created_ms", int64_t{0});
  return e;
}

}  // namespace

std::string CacheKey::hex() const {
  return to_hex16(model_hash) + to_hex16(prefix_hash) + to_hex16(context_hash) +
         to_hex16(plan_hash);
}

std::optional<CacheKey> CacheKey::from_hex(std::string_view text) {
  if (text.size() != 64) return std::nullopt;
  CacheKey key;
  if (!parse_hex16(text.substr(0, 16), key.model_hash)) return std::nullopt;
  if (!parse_hex16(text.substr(16, 16), key.prefix_hash)) return std::nullopt;
  if (!parse_hex16(text.substr(32, 16), key.context_hash)) return std::nullopt;
  if (!parse_hex16(text.substr(48, 16), key.plan_hash)) return std::nullopt;
  return key;
}

CacheKey key_for(const KVCache& cache) {
  const KVProvenance& p = cache.provenance;
  return CacheKey{p.model_hash, p.prefix_hash, p.context_hash, p.plan_hash};
}

CacheKey make_key(const ModelWeights& weights, std::string_view serving_prefix,
                  std::string_view context, const SteeringPlan* plan) {
  return CacheKey{weights.content_hash, fnv1a64(serving_prefix), fnv1a64(context),
                  plan != nullptr ? plan->hash() : 0};
}

size_t cache_file_size(uint32_t n_layers, uint32_t n_heads, uint32_t head_dim,
                       uint32_t cached_len) {
  const size_t header = 4 + 4 + 4 * 8 + 4 * 4;
  const size_t ids = static_cast<size_t>(cached_len) * 4;
  const size_t kv = 2ull * n_layers * n_heads * cached_len * head_dim * 4;
  return header + ids + kv + 8;  // + checksum
}

std::vector<uint8_t> serialize_cache(const KVCache& cache) {
  std::vector<uint8_t> out;
  out.reserve(cache_file_size(cache.n_layers, cache.n_heads, cache.head_dim,
                              static_cast<uint32_t>(cache.cached_len)));
  out.insert(out.end(), kCacheMagic, kCacheMagic + 4);
  append_u32(out, kCacheVersion);
  append_u64(out, cache.provenance.model_hash);
  append_u64(out, cache.provenance.prefix_hash);
  append_u64(out, cache.provenance.context_hash);
  append_u64(out, cache.provenance.plan_hash);
  append_u32(out, cache.n_layers);
  append_u32(out, cache.n_heads);
  append_u32(out, cache.head_dim);
  append_u32(out, static_cast<uint32_t>(cache.cached_len));
  for (uint32_t id : cache.token_ids) append_u32(out, id);
  for (uint32_t l = 0; l < cache.n_layers; ++l) {
    for (double v : cache.keys[l].data) append_f32(out, v);
    for (double v : cache.values[l].data) append_f32(out, v);
  }
  append_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

KVCache deserialize_cache(const std::vector<uint8_t>& bytes) {
  constexpr size_t kHeaderSize = 4 + 4 + 32 + 16;
  if (bytes.size() < kHeaderSize + 8) {
    fail(ErrorCode::truncated, "cache file shorter than header");
  }
  if (std::memcmp(bytes.data(), kCacheMagic, 4) != 0) {
    fail(ErrorCode::bad_magic, "cache file has bad magic");
  }
  if (read_u32(bytes.data() + 4) != kCacheVersion) {
    fail(ErrorCode::bad_version, "cache file has unsupported version");
  }
  KVCache cache;
  cache.provenance.model_hash = read_u64(bytes.data() + 8);
  cache.provenance.prefix_hash = read_u64(bytes.data() + 16);
  cache.provenance.context_hash = read_u64(bytes.data() + 24);
  cache.provenance.plan_hash = read_u64(bytes.data() + 32);
  cache.n_layers = read_u32(bytes.data() + 40);
  cache.n_heads = read_u32(bytes.data() + 44);
  cache.head_dim = read_u32(bytes.data() + 48);
  const uint32_t cached_len = read_u32(bytes.data() + 52);
  cache.cached_len = cached_len;

  const size_t expected = cache_file_size(cache.n_layers, cache.n_heads, cache.head_dim,
                                          cached_len);
  if (bytes.size() != expected) {
    fail(ErrorCode::size_mismatch, "cache file has " + std::to_string(bytes.size()) +
                                       " bytes but header implies " + std::to_string(expected));
  }
  const uint64_t stored = read_u64(bytes.data() + bytes.size() - 8);
  const uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed) {
    fail(ErrorCode::corrupt, "cache file checksum mismatch");
  }

  const uint8_t* p = bytes.data() + kHeaderSize;
  cache.token_ids.resize(cached_len);
  for (uint32_t i = 0; i < cached_len; ++i) {
    cache.token_ids[i] = read_u32(p);
    p += 4;
  }
  cache.keys.assign(cache.n_layers, Tensor3D(cache.n_heads, cached_len, cache.head_dim));
  cache.values.assign(cache.n_layers, Tensor3D(cache.n_heads, cached_len, cache.head_dim));
  for (uint32_t l = 0; l < cache.n_layers; ++l) {
    for (double& v : cache.keys[l].data) {
      v = read_f32(p);
      p += 4;
    }
    for (double& v : cache.values[l].data) {
      v = read_f32(p);
      p += 4;
    }
  }
  return cache;
}

CacheStore::CacheStore(std::filesystem::path root) : root_(std::move(root)) {
  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
  if (ec) fail(ErrorCode::io, "cannot create store root " + root_.string());
}

CacheStore::Entry CacheStore::put(const CacheKey& key, const KVCache& cache,
                                  const SteeringPlan* plan) {
  if (key != key_for(cache)) {
    fail(ErrorCode::invalid_argument,
         "store put: key does not match the cache's provenance hashes");
  }
  if (plan != nullptr && key.plan_hash != plan->hash()) {
    fail(ErrorCode::invalid_argument, "store put: key does not match the plan hash");
  }

  const std::string key_hex = key.hex();
  const std::string file_name = key_hex + ".kv";
  const std::string plan_name = plan != nullptr ? key_hex + ".plan.json" : "";

  LockFile lock(root_ / kLockName);
  json manifest = load_manifest(root_);
  auto& entries = manifest["entries"];
  if (entries.contains(key_hex) && std::filesystem::exists(root_ / file_name)) {
    return entry_from_json(entries[key_hex]);  // idempotent
  }

  const std::vector<uint8_t> bytes = serialize_cache(cache);
  write_file_atomic(root_ / file_name, bytes.data(), bytes.size());
  if (plan != nullptr) {
    const std::string plan_text = plan->to_canonical_json();
    write_file_atomic(root_ / plan_name, plan_text.data(), plan_text.size());
  }

  Entry entry;
  entry.file = file_name;
  entry.plan_file = plan_name;
  entry.cached_len = static_cast<uint32_t>(cache.cached_len);
  entry.bytes = bytes.size();
  entry.created_ms = now_ms();
  entries[key_hex] = {{"file", entry.file},       {"plan_file", entry.plan_file},
                      {"cached_len", entry.cached_len}, {"bytes", entry.bytes},
                      {"created_ms", entry.created_ms}};
  store_manifest(root_, manifest);
  return entry;
}

std::optional<CacheStore::GetResult> CacheStore::get(const CacheKey& key) {
  const std::string key_hex = key.hex();
  json manifest = load_manifest(root_);
  const auto& entries = manifest["entries"];
  if (!entries.contains(key_hex)) return std::nullopt;
  const Entry entry = entry_from_json(entries[key_hex]);
  const auto file_path = root_ / entry.file;

  auto quarantine = [&](const std::string& why) {
    std::error_code ec;
    std::filesystem::rename(file_path, file_path.string() + ".corrupt", ec);
    LockFile lock(root_ / kLockName);
    json m = load_manifest(root_);
    m["entries"].erase(key_hex);
    store_manifest(root_, m);
    fail(ErrorCode::corrupt, "store get: corrupt entry " + key_hex + " quarantined (" + why + ")");
  };

  if (!std::filesystem::exists(file_path)) {
    quarantine("file missing");
  }
  GetResult result;
  try {
    result.cache = deserialize_cache(read_file(file_path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::io) throw;
    quarantine(e.what());
  }
  if (key_for(result.cache) != key) {
    quarantine("provenance does not match key");
  }
  if (!entry.plan_file.empty()) {
    const auto plan_path = root_ / entry.plan_file;
    const auto plan_bytes = read_file(plan_path);
    result.plan = SteeringPlan::from_json(
        std::string_view(reinterpret_cast<const char*>(plan_bytes.data()), plan_bytes.size()));
  }
  return result;
}

bool CacheStore::contains(const CacheKey& key) {
  json manifest = load_manifest(root_);
  return manifest["entries"].contains(key.hex());
}

std::optional<CacheStore::Entry> CacheStore::find(const CacheKey& key) {
  json manifest = load_manifest(root_);
  const auto& entries = manifest["entries"];
  if (!entries.contains(key.hex())) return std::nullopt;
  return entry_from_json(entries[key.hex()]);
}

size_t CacheStore::entry_count() {
  json manifest = load_manifest(root_);
  return manifest["entries"].size();
}

}  // namespace steer
