#include "model.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

namespace steer {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr char kWeightMagic[4] = {'L', 'L', 'M', 'S'};
constexpr uint32_t kWeightVersion = 1;

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

void append_f32(std::vector<uint8_t>& out, double v) {
  float f = static_cast<float>(v);
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  append_u32(out, bits);
}

void append_f32_block(std::vector<uint8_t>& out, std::span<const double> values) {
  for (double v : values) append_f32(out, v);
}

uint32_t read_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

double read_f32(const uint8_t* p) {
  uint32_t bits = read_u32(p);
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return static_cast<double>(f);
}

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void fill_random(Tensor2D& t, SplitMix64& rng, double scale) {
  for (double& v : t.data) v = quantize_f32(rng.next_symmetric() * scale);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// Number of f32 payload values, fully determined by the config.
size_t tensor_value_count(const ModelConfig& c) {
  const size_t d = c.d_model;
  const size_t per_layer = d                // attn_norm_gain
                           + 4 * d * d      // wq wk wv wo
                           + d              // ffn_norm_gain
                           + d * c.d_ff     // ffn_in
                           + c.d_ff * d;    // ffn_out
  return static_cast<size_t>(c.vocab_size) * d + static_cast<size_t>(c.max_positions) * d +
         c.n_layers * per_layer + d;  // final_norm_gain
}

KVCache empty_cache(const ModelConfig& c) {
  KVCache cache;
  cache.n_layers = c.n_layers;
  cache.n_heads = c.n_heads;
  cache.head_dim = c.head_dim();
  cache.cached_len = 0;
  cache.keys.assign(c.n_layers, Tensor3D(c.n_heads, 0, c.head_dim()));
  cache.values.assign(c.n_layers, Tensor3D(c.n_heads, 0, c.head_dim()));
  return cache;
}

void append_layer_kv(Tensor3D& dst, const Tensor2D& projected, uint32_t n_heads,
                     uint32_t head_dim) {
  const size_t old_len = dst.d1;
  const size_t add = projected.rows;
  Tensor3D grown(n_heads, old_len + add, head_dim);
  for (uint32_t h = 0; h < n_heads; ++h) {
    if (old_len > 0) {
      std::memcpy(grown.row(h, 0), dst.row(h, 0), old_len * head_dim * sizeof(double));
    }
    for (size_t t = 0; t < add; ++t) {
      const double* src = projected.row(t) + static_cast<size_t>(h) * head_dim;
      std::memcpy(grown.row(h, old_len + t), src, head_dim * sizeof(double));
    }
  }
  dst = std::move(grown);
}

Tensor2D head_block(const Tensor3D& t, uint32_t head) {
  Tensor2D out(t.d1, t.d2);
  std::memcpy(out.data.data(), t.row(head, 0), t.d1 * t.d2 * sizeof(double));
  return out;
}

struct ForwardOutput {
  Tensor2D logits;
  std::optional<AttentionTrace> trace;
};

// Shared forward path for prefill (empty cache) and extend. Processes
// new_ids at absolute positions cache.cached_len.., appending K/V as it
// goes. Attention accumulates over keys in ascending position order, so a
// token's K/V and logits come out bit-identical whether it was prefilled
// in one shot or extended from a cache.
ForwardOutput forward_append(const ModelWeights& w, KVCache& cache,
                             std::span<const uint32_t> new_ids, const AttentionHook& hook,
                             bool record_attention, OpCounter* counter) {
  const ModelConfig& c = w.config;
  const size_t q0 = cache.cached_len;
  const size_t n = new_ids.size();
  const size_t total = q0 + n;
  if (total > c.max_positions) {
    fail(ErrorCode::overflow, "forward: sequence length " + std::to_string(total) +
                                  " exceeds max_positions " + std::to_string(c.max_positions));
  }
  if (cache.n_layers != c.n_layers || cache.n_heads != c.n_heads ||
      cache.head_dim != c.head_dim()) {
    fail(ErrorCode::invalid_argument, "forward: cache shape does not match model config");
  }

  const uint32_t n_heads = c.n_heads;
  const uint32_t head_dim = c.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor2D x(n, c.d_model);
  for (size_t i = 0; i < n; ++i) {
    const uint32_t id = new_ids[i];
    if (id >= c.vocab_size) {
      fail(ErrorCode::invalid_argument, "forward: token id " + std::to_string(id) +
                                            " out of vocabulary " + std::to_string(c.vocab_size));
    }
    const double* te = w.token_embedding.row(id);
    const double* pe = w.position_embedding.row(q0 + i);
    double* out = x.row(i);
    for (size_t j = 0; j < c.d_model; ++j) out[j] = te[j] + pe[j];
  }

  ForwardOutput result;
  if (record_attention) result.trace = AttentionTrace{};

  for (uint32_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    Tensor2D xn = rms_norm(x, lw.attn_norm_gain, kRmsEps);
    Tensor2D q = matmul(xn, lw.wq, counter);
    Tensor2D k = matmul(xn, lw.wk, counter);
    Tensor2D v = matmul(xn, lw.wv, counter);
    append_layer_kv(cache.keys[l], k, n_heads, head_dim);
    append_layer_kv(cache.values[l], v, n_heads, head_dim);

    Tensor3D attn(n_heads, n, total);
    for (uint32_t h = 0; h < n_heads; ++h) {
      Tensor2D qh(n, head_dim);
      for (size_t i = 0; i < n; ++i) {
        std::memcpy(qh.row(i), q.row(i) + static_cast<size_t>(h) * head_dim,
                    head_dim * sizeof(double));
      }
      Tensor2D kh = head_block(cache.keys[l], h);
      Tensor2D scores = matmul(qh, transpose(kh), counter);
      for (double& s : scores.data) s *= inv_sqrt_hd;
      Tensor2D rows = row_softmax_masked(scores, q0, counter);
      std::memcpy(attn.row(h, 0), rows.data.data(), n * total * sizeof(double));
    }

    if (result.trace) result.trace->per_layer.push_back(attn);

    if (hook) {
      Tensor3D steered = hook(l, attn, q0);
      if (!steered.same_shape(attn)) {
        fail(ErrorCode::invalid_argument,
             "forward: attention hook changed shape at layer " + std::to_string(l));
      }
      attn = std::move(steered);
    }

    Tensor2D merged(n, c.d_model);
    for (uint32_t h = 0; h < n_heads; ++h) {
      Tensor2D ah(n, total);
      std::memcpy(ah.data.data(), attn.row(h, 0), n * total * sizeof(double));
      Tensor2D vh = head_block(cache.values[l], h);
      Tensor2D oh = matmul(ah, vh, counter);
      for (size_t i = 0; i < n; ++i) {
        std::memcpy(merged.row(i) + static_cast<size_t>(h) * head_dim, oh.row(i),
                    head_dim * sizeof(double));
      }
    }
    Tensor2D attn_out = matmul(merged, lw.wo, counter);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_out.data[i];

    Tensor2D xf = rms_norm(x, lw.ffn_norm_gain, kRmsEps);
    Tensor2D hidden = matmul(xf, lw.ffn_in, counter);
    for (double& hv : hidden.data) hv = gelu(hv);
    Tensor2D ffn_out = matmul(hidden, lw.ffn_out, counter);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += ffn_out.data[i];
  }

  cache.token_ids.insert(cache.token_ids.end(), new_ids.begin(), new_ids.end());
  cache.cached_len = total;

  Tensor2D xn = rms_norm(x, w.final_norm_gain, kRmsEps);
  result.logits = matmul(xn, transpose(w.token_embedding), counter);
  return result;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_positions < 1) {
    fail(ErrorCode::invalid_argument, "model config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorCode::invalid_argument, "model config: d_model " + std::to_string(d_model) +
                                          " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size != kByteVocabSize) {
    fail(ErrorCode::invalid_argument,
         "model config: vocab_size must be " + std::to_string(kByteVocabSize) + " (byte-level)");
  }
}

TokenSequence make_sequence(std::string_view prefix, std::string_view context,
                            std::string_view query, const ModelConfig& config) {
  TokenSequence seq;
  seq.ids.push_back(kBosId);
  auto prefix_ids = tokenize(prefix);
  seq.ids.insert(seq.ids.end(), prefix_ids.begin(), prefix_ids.end());
  seq.prefix_len = seq.ids.size();
  auto context_ids = tokenize(context);
  seq.ids.insert(seq.ids.end(), context_ids.begin(), context_ids.end());
  seq.context_len = context_ids.size();
  auto query_ids = tokenize(query);
  seq.ids.insert(seq.ids.end(), query_ids.begin(), query_ids.end());
  seq.query_len = query_ids.size();
  if (seq.ids.size() > config.max_positions) {
    fail(ErrorCode::overflow, "sequence of " + std::to_string(seq.ids.size()) +
                                  " tokens exceeds max_positions " +
                                  std::to_string(config.max_positions));
  }
  return seq;
}

ModelWeights init_random(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelWeights w;
  w.config = config;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  SplitMix64 rng(seed);

  w.token_embedding = Tensor2D(config.vocab_size, config.d_model);
  fill_random(w.token_embedding, rng, scale);
  w.position_embedding = Tensor2D(config.max_positions, config.d_model);
  fill_random(w.position_embedding, rng, scale);

  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm_gain.assign(config.d_model, 1.0);
    layer.wq = Tensor2D(config.d_model, config.d_model);
    layer.wk = Tensor2D(config.d_model, config.d_model);
    layer.wv = Tensor2D(config.d_model, config.d_model);
    layer.wo = Tensor2D(config.d_model, config.d_model);
    fill_random(layer.wq, rng, scale);
    fill_random(layer.wk, rng, scale);
    fill_random(layer.wv, rng, scale);
    fill_random(layer.wo, rng, scale);
    layer.ffn_norm_gain.assign(config.d_model, 1.0);
    layer.ffn_in = Tensor2D(config.d_model, config.d_ff);
    layer.ffn_out = Tensor2D(config.d_ff, config.d_model);
    fill_random(layer.ffn_in, rng, scale);
    fill_random(layer.ffn_out, rng, scale);
  }
  w.final_norm_gain.assign(config.d_model, 1.0);

  w.content_hash = fnv1a64(serialize_weights(w));
  return w;
}

PrefillResult prefill(const ModelWeights& weights, const TokenSequence& tokens,
                      const AttentionHook& hook, bool record_attention, OpCounter* counter) {
  KVCache cache = empty_cache(weights.config);
  cache.provenance.model_hash = weights.content_hash;
  ForwardOutput out = forward_append(weights, cache, tokens.ids, hook, record_attention, counter);
  PrefillResult result;
  result.cache = std::move(cache);
  result.logits = std::move(out.logits);
  result.attention = std::move(out.trace);
  return result;
}

Tensor2D extend(const ModelWeights& weights, KVCache& cache, std::span<const uint32_t> new_tokens,
                const AttentionHook& hook, OpCounter* counter) {
  if (new_tokens.empty()) return Tensor2D(0, weights.config.vocab_size);
  ForwardOutput out = forward_append(weights, cache, new_tokens, hook, false, counter);
  return std::move(out.logits);
}

std::vector<uint32_t> generate(const ModelWeights& weights, KVCache cache,
                               std::span<const uint32_t> query, size_t max_new,
                               const AttentionHook& hook, GenerateStats* stats) {
  using clock = std::chrono::steady_clock;
  std::vector<uint32_t> out;
  if (max_new == 0) return out;
  if (query.empty()) {
    fail(ErrorCode::invalid_argument, "generate: query must be non-empty");
  }

  OpCounter prefill_counter;
  const auto t0 = clock::now();
  Tensor2D logits = extend(weights, cache, query, hook, &prefill_counter);
  const auto t1 = clock::now();

  OpCounter decode_counter;
  std::span<const double> last{logits.row(logits.rows - 1), logits.cols};
  while (true) {
    const uint32_t next = static_cast<uint32_t>(argmax_lowest(last));
    if (next == kEosId) break;
    out.push_back(next);
    if (out.size() >= max_new) break;
    if (cache.cached_len >= weights.config.max_positions) break;
    const uint32_t step[1] = {next};
    logits = extend(weights, cache, step, hook, &decode_counter);
    last = std::span<const double>{logits.row(0), logits.cols};
  }
  const auto t2 = clock::now();

  if (stats != nullptr) {
    stats->prefill_tokens = query.size();
    stats->decode_tokens = out.size();
    stats->fma_prefill = prefill_counter.fused_multiply_adds;
    stats->fma_decode = decode_counter.fused_multiply_adds;
    stats->wall_ms_prefill = std::chrono::duration<double, std::milli>(t1 - t0).count();
    stats->wall_ms_decode = std::chrono::duration<double, std::milli>(t2 - t1).count();
  }
  return out;
}

std::vector<uint8_t> serialize_weights(const ModelWeights& w) {
  std::vector<uint8_t> out;
  out.reserve(32 + tensor_value_count(w.config) * 4);
  out.insert(out.end(), kWeightMagic, kWeightMagic + 4);
  append_u32(out, kWeightVersion);
  append_u32(out, w.config.n_layers);
  append_u32(out, w.config.n_heads);
  append_u32(out, w.config.d_model);
  append_u32(out, w.config.d_ff);
  append_u32(out, w.config.vocab_size);
  append_u32(out, w.config.max_positions);
  append_f32_block(out, w.token_embedding.data);
  append_f32_block(out, w.position_embedding.data);
  for (const auto& layer : w.layers) {
    append_f32_block(out, layer.attn_norm_gain);
    append_f32_block(out, layer.wq.data);
    append_f32_block(out, layer.wk.data);
    append_f32_block(out, layer.wv.data);
    append_f32_block(out, layer.wo.data);
    append_f32_block(out, layer.ffn_norm_gain);
    append_f32_block(out, layer.ffn_in.data);
    append_f32_block(out, layer.ffn_out.data);
  }
  append_f32_block(out, w.final_norm_gain);
  return out;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = serialize_weights(weights);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::io, "save_weights: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::io, "save_weights: write failed for " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "load_weights: cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 32) fail(ErrorCode::truncated, "load_weights: file shorter than header");
  if (std::memcmp(bytes.data(), kWeightMagic, 4) != 0) {
    fail(ErrorCode::bad_magic, "load_weights: bad magic in " + path.string());
  }
  const uint32_t version = read_u32(bytes.data() + 4);
  if (version != kWeightVersion) {
    fail(ErrorCode::bad_version, "load_weights: unsupported version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = read_u32(bytes.data() + 8);
  c.n_heads = read_u32(bytes.data() + 12);
  c.d_model = read_u32(bytes.data() + 16);
  c.d_ff = read_u32(bytes.data() + 20);
  c.vocab_size = read_u32(bytes.data() + 24);
  c.max_positions = read_u32(bytes.data() + 28);
  c.validate();

  const size_t expected = 32 + tensor_value_count(c) * 4;
  if (bytes.size() < expected) {
    fail(ErrorCode::truncated, "load_weights: file truncated, expected " +
                                   std::to_string(expected) + " bytes, got " +
                                   std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    fail(ErrorCode::size_mismatch, "load_weights: file has " + std::to_string(bytes.size()) +
                                       " bytes but header implies " + std::to_string(expected));
  }

  const uint8_t* p = bytes.data() + 32;
  auto read_block = [&p](std::span<double> dst) {
    for (double& v : dst) {
      v = read_f32(p);
      p += 4;
    }
  };

  ModelWeights w;
  w.config = c;
  w.token_embedding = Tensor2D(c.vocab_size, c.d_model);
  read_block(w.token_embedding.data);
  w.position_embedding = Tensor2D(c.max_positions, c.d_model);
  read_block(w.position_embedding.data);
  w.layers.resize(c.n_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm_gain.resize(c.d_model);
    read_block(layer.attn_norm_gain);
    layer.wq = Tensor2D(c.d_model, c.d_model);
    read_block(layer.wq.data);
    layer.wk = Tensor2D(c.d_model, c.d_model);
    read_block(layer.wk.data);
    layer.wv = Tensor2D(c.d_model, c.d_model);
    read_block(layer.wv.data);
    layer.wo = Tensor2D(c.d_model, c.d_model);
    read_block(layer.wo.data);
    layer.ffn_norm_gain.resize(c.d_model);
    read_block(layer.ffn_norm_gain);
    layer.ffn_in = Tensor2D(c.d_model, c.d_ff);
    read_block(layer.ffn_in.data);
    layer.ffn_out = Tensor2D(c.d_ff, c.d_model);
    read_block(layer.ffn_out.data);
  }
  w.final_norm_gain.resize(c.d_model);
  read_block(w.final_norm_gain);

  w.content_hash = fnv1a64(bytes.data(), bytes.size());
  return w;
}

size_t argmax_lowest(std::span<const double> values) {
  size_t best = 0;
  for (size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace steer
