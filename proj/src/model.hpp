#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tensor.hpp"
#include "tokenizer.hpp"

namespace steer {

struct ModelConfig {
  uint32_t n_layers = 4;
  uint32_t n_heads = 4;
  uint32_t d_model = 64;
  uint32_t d_ff = 256;
  uint32_t vocab_size = kByteVocabSize;
  uint32_t max_positions = 1024;

  uint32_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  std::vector<double> attn_norm_gain;  // d_model
  Tensor2D wq, wk, wv, wo;             // d_model x d_model
  std::vector<double> ffn_norm_gain;   // d_model
  Tensor2D ffn_in;                     // d_model x d_ff
  Tensor2D ffn_out;                    // d_ff x d_model
};

// Immutable once constructed. content_hash is the FNV-1a digest of the
// canonical file serialization, so it is stable across save/load.
struct ModelWeights {
  ModelConfig config;
  Tensor2D token_embedding;     // vocab x d_model; also used, transposed, as the output head
  Tensor2D position_embedding;  // max_positions x d_model
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm_gain;
  uint64_t content_hash = 0;
};

// Token ids plus the named spans that partition them:
// [0, prefix_len) prefix (includes BOS), then context, then query.
struct TokenSequence {
  std::vector<uint32_t> ids;
  size_t prefix_len = 0;
  size_t context_len = 0;
  size_t query_len = 0;

  size_t size() const { return ids.size(); }
  size_t prefix_context_len() const { return prefix_len + context_len; }
};

// BOS + prefix bytes | context bytes | query bytes. Throws if the total
// exceeds config.max_positions.
TokenSequence make_sequence(std::string_view prefix, std::string_view context,
                            std::string_view query, const ModelConfig& config);

// Identifies what a KV cache was computed from. All-zero fields mean
// "unknown"; the steering layer stamps these when it builds caches from
// texts, and the cache store validates them against keys.
struct KVProvenance {
  uint64_t model_hash = 0;
  uint64_t prefix_hash = 0;
  uint64_t context_hash = 0;
  uint64_t plan_hash = 0;
  bool operator==(const KVProvenance&) const = default;
};

// Per-layer key/value tensors for a token prefix, always anchored at
// absolute position 0. cached_len is identical across layers.
struct KVCache {
  uint32_t n_layers = 0;
  uint32_t n_heads = 0;
  uint32_t head_dim = 0;
  size_t cached_len = 0;
  std::vector<uint32_t> token_ids;
  std::vector<Tensor3D> keys;    // per layer: (n_heads, cached_len, head_dim)
  std::vector<Tensor3D> values;  // same shape
  KVProvenance provenance;
};

// Called at every layer with the post-softmax attention, before it is
// multiplied by V. attn has shape (heads, n_rows, total_len) where row r
// is the query at absolute position query_offset + r. The returned tensor
// must have the identical shape; anything else is rejected.
using AttentionHook =
    std::function<Tensor3D(uint32_t layer, const Tensor3D& attn, size_t query_offset)>;

// Raw per-layer post-mask, pre-hook attention captured during prefill.
struct AttentionTrace {
  std::vector<Tensor3D> per_layer;  // (n_heads, L, L)
};

struct PrefillResult {
  KVCache cache;
  Tensor2D logits;  // L x vocab
  std::optional<AttentionTrace> attention;
};

// Deterministic weights from a SplitMix64 stream: matrices and embeddings
// get uniform [-1,1) entries scaled by 1/sqrt(d_model), norm gains are 1.
// Values are quantized through f32 at init so the in-memory model matches
// its file serialization bit for bit.
ModelWeights init_random(const ModelConfig& config, uint64_t seed);

// Full causal forward pass over tokens; fills a fresh KV cache and returns
// logits for every position. When record_attention is set, the raw
// attention for every layer/head is returned as well.
PrefillResult prefill(const ModelWeights& weights, const TokenSequence& tokens,
                      const AttentionHook& hook = {}, bool record_attention = false,
                      OpCounter* counter = nullptr);

// Appends new_tokens to the cache at absolute positions starting at
// cached_len and returns the logits for just those rows.
Tensor2D extend(const ModelWeights& weights, KVCache& cache, std::span<const uint32_t> new_tokens,
                const AttentionHook& hook = {}, OpCounter* counter = nullptr);

struct GenerateStats {
  uint64_t prefill_tokens = 0;
  uint64_t decode_tokens = 0;
  uint64_t fma_prefill = 0;
  uint64_t fma_decode = 0;
  double wall_ms_prefill = 0.0;
  double wall_ms_decode = 0.0;
};

// Greedy decode: feed the query, then repeatedly take the argmax token
// (ties broken by lowest id) until EOS, max_new, or the position limit.
// The cache is taken by value; the caller's copy is never touched.
std::vector<uint32_t> generate(const ModelWeights& weights, KVCache cache,
                               std::span<const uint32_t> query, size_t max_new,
                               const AttentionHook& hook = {}, GenerateStats* stats = nullptr);

// Weight file: magic "LLMS" | version u32=1 | n_layers | n_heads | d_model
// | d_ff | vocab | max_positions (all u32 LE) | tensors as f32 row-major in
// order: token_embedding, position_embedding, then per layer
// {attn_norm_gain, wq, wk, wv, wo, ffn_norm_gain, ffn_in, ffn_out}, then
// final_norm_gain. content_hash = FNV-1a over the whole file.
std::vector<uint8_t> serialize_weights(const ModelWeights& weights);
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

// Index of the largest value; earliest index wins ties.
size_t argmax_lowest(std::span<const double> values);

}  // namespace steer
