#include "steer/steer.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "cache_store.hpp"
#include "json.hpp"
#include "model.hpp"
#include "profiler.hpp"
#include "steering.hpp"

namespace {

thread_local std::string g_last_error;

steer_status status_from_code(steer::ErrorCode code) {
  using steer::ErrorCode;
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::overflow:
    case ErrorCode::stale_plan:
      return STEER_EINVAL;
    case ErrorCode::io:
      return STEER_EIO;
    case ErrorCode::bad_magic:
    case ErrorCode::bad_version:
    case ErrorCode::truncated:
    case ErrorCode::size_mismatch:
      return STEER_EFORMAT;
    case ErrorCode::corrupt:
      return STEER_ECORRUPT;
    case ErrorCode::internal:
      return STEER_EINTERNAL;
  }
  return STEER_EINTERNAL;
}

template <typename Fn>
steer_status guarded(Fn&& fn) {
  try {
    fn();
    return STEER_OK;
  } catch (const steer::Error& e) {
    g_last_error = e.what();
    return status_from_code(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return STEER_EINTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return STEER_EINTERNAL;
  }
}

steer_status invalid(const char* message) {
  g_last_error = message;
  return STEER_EINVAL;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

steer::PlanBuildParams plan_params_from_c(const steer_plan_params& p) {
  steer::PlanBuildParams out;
  out.prefix_1 = p.prefix_1 != nullptr ? p.prefix_1 : "";
  out.prefix_2 = p.prefix_2 != nullptr ? p.prefix_2 : "";
  out.k = p.k;
  out.alpha = p.alpha;
  out.mode = steer::steer_mode_from_string(p.mode != nullptr ? p.mode : "both");
  out.renormalize = p.renormalize != 0;
  out.scale_axis = steer::scale_axis_from_string(p.scale_axis != nullptr ? p.scale_axis : "column");
  out.aggregation = steer::aggregation_from_string(p.aggregation != nullptr ? p.aggregation : "sum");
  return out;
}

}  // namespace

struct steer_model {
  steer::ModelWeights weights;
};
struct steer_plan {
  steer::SteeringPlan plan;
};
struct steer_cache {
  steer::KVCache cache;
};
struct steer_store {
  steer::CacheStore store;
};

extern "C" {

uint32_t steer_api_version(void) { return 1; }

const char* steer_last_error(void) { return g_last_error.c_str(); }

void steer_string_free(char* s) { std::free(s); }

void steer_model_config_default(steer_model_config* out) {
  if (out == nullptr) return;
  steer::ModelConfig c;
  *out = {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_positions};
}

steer_status steer_model_init_random(const steer_model_config* config, uint64_t seed,
                                     steer_model** out) {
  if (config == nullptr || out == nullptr) return invalid("init_random: null argument");
  return guarded([&] {
    steer::ModelConfig c{config->n_layers, config->n_heads,   config->d_model,
                         config->d_ff,     config->vocab_size, config->max_positions};
    *out = new steer_model{steer::init_random(c, seed)};
  });
}

steer_status steer_model_load(const char* path, steer_model** out) {
  if (path == nullptr || out == nullptr) return invalid("model_load: null argument");
  return guarded([&] { *out = new steer_model{steer::load_weights(path)}; });
}

steer_status steer_model_save(const steer_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return invalid("model_save: null argument");
  return guarded([&] { steer::save_weights(model->weights, path); });
}

steer_status steer_model_get_config(const steer_model* model, steer_model_config* out) {
  if (model == nullptr || out == nullptr) return invalid("model_get_config: null argument");
  const steer::ModelConfig& c = model->weights.config;
  *out = {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_positions};
  return STEER_OK;
}

uint64_t steer_model_content_hash(const steer_model* model) {
  return model != nullptr ? model->weights.content_hash : 0;
}

void steer_model_free(steer_model* model) { delete model; }

steer_status steer_plan_build(const steer_model* model, const char* context,
                              const steer_plan_params* params, steer_plan** out,
                              char** warnings_json) {
  if (model == nullptr || context == nullptr || params == nullptr || out == nullptr) {
    return invalid("plan_build: null argument");
  }
  return guarded([&] {
    steer::PlanBuildResult result =
        steer::build_plan(model->weights, context, plan_params_from_c(*params));
    *out = new steer_plan{std::move(result.plan)};
    if (warnings_json != nullptr) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& w : result.warnings) arr.push_back(w);
      *warnings_json = dup_string(arr.dump());
    }
  });
}

steer_status steer_plan_to_json(const steer_plan* plan, char** out_json) {
  if (plan == nullptr || out_json == nullptr) return invalid("plan_to_json: null argument");
  return guarded([&] { *out_json = dup_string(plan->plan.to_canonical_json()); });
}

steer_status steer_plan_save(const steer_plan* plan, const char* path) {
  if (plan == nullptr || path == nullptr) return invalid("plan_save: null argument");
  return guarded([&] {
    const std::string text = plan->plan.to_canonical_json();
    FILE* f = std::fopen(path, "wb");
    if (f == nullptr) steer::fail(steer::ErrorCode::io, std::string("cannot open ") + path);
    const size_t written = std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
    if (written != text.size()) {
      steer::fail(steer::ErrorCode::io, std::string("short write to ") + path);
    }
  });
}

steer_status steer_plan_load(const char* path, steer_plan** out) {
  if (path == nullptr || out == nullptr) return invalid("plan_load: null argument");
  return guarded([&] {
    FILE* f = std::fopen(path, "rb");
    if (f == nullptr) steer::fail(steer::ErrorCode::io, std::string("cannot open ") + path);
    std::string text;
    char buf[4096];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, n);
    std::fclose(f);
    *out = new steer_plan{steer::SteeringPlan::from_json(text)};
  });
}

uint64_t steer_plan_hash(const steer_plan* plan) {
  return plan != nullptr ? plan->plan.hash() : 0;
}

void steer_plan_free(steer_plan* plan) { delete plan; }

steer_status steer_cache_build(const steer_model* model, const char* serving_prefix,
                               const char* context, const steer_plan* plan, steer_cache** out) {
  if (model == nullptr || serving_prefix == nullptr || context == nullptr || out == nullptr) {
    return invalid("cache_build: null argument");
  }
  return guarded([&] {
    steer::KVCache cache =
        plan != nullptr
            ? steer::build_steered_cache(model->weights, serving_prefix, context, plan->plan)
            : steer::build_context_cache(model->weights, serving_prefix, context);
    *out = new steer_cache{std::move(cache)};
  });
}

steer_status steer_cache_key_hex(const steer_cache* cache,
                                 char out_hex[STEER_KEY_HEX_LEN + 1]) {
  if (cache == nullptr || out_hex == nullptr) return invalid("cache_key_hex: null argument");
  const std::string hex = steer::key_for(cache->cache).hex();
  std::memcpy(out_hex, hex.c_str(), hex.size() + 1);
  return STEER_OK;
}

uint64_t steer_cache_token_count(const steer_cache* cache) {
  return cache != nullptr ? cache->cache.cached_len : 0;
}

void steer_cache_free(steer_cache* cache) { delete cache; }

steer_status steer_compute_key_hex(const steer_model* model, const char* serving_prefix,
                                   const char* context, const steer_plan* plan,
                                   char out_hex[STEER_KEY_HEX_LEN + 1]) {
  if (model == nullptr || serving_prefix == nullptr || context == nullptr || out_hex == nullptr) {
    return invalid("compute_key_hex: null argument");
  }
  return guarded([&] {
    const steer::CacheKey key = steer::make_key(model->weights, serving_prefix, context,
                                                plan != nullptr ? &plan->plan : nullptr);
    const std::string hex = key.hex();
    std::memcpy(out_hex, hex.c_str(), hex.size() + 1);
  });
}

steer_status steer_store_open(const char* root, steer_store** out) {
  if (root == nullptr || out == nullptr) return invalid("store_open: null argument");
  return guarded([&] { *out = new steer_store{steer::CacheStore(root)}; });
}

steer_status steer_store_put(steer_store* store, const char* key_hex, const steer_cache* cache,
                             const steer_plan* plan) {
  if (store == nullptr || key_hex == nullptr || cache == nullptr) {
    return invalid("store_put: null argument");
  }
  auto key = steer::CacheKey::from_hex(key_hex);
  if (!key) return invalid("store_put: malformed key");
  return guarded([&] {
    store->store.put(*key, cache->cache, plan != nullptr ? &plan->plan : nullptr);
  });
}

steer_status steer_store_get(steer_store* store, const char* key_hex, steer_cache** out_cache,
                             steer_plan** out_plan) {
  if (store == nullptr || key_hex == nullptr || out_cache == nullptr) {
    return invalid("store_get: null argument");
  }
  auto key = steer::CacheKey::from_hex(key_hex);
  if (!key) return invalid("store_get: malformed key");
  *out_cache = nullptr;
  if (out_plan != nullptr) *out_plan = nullptr;
  bool miss = false;
  const steer_status status = guarded([&] {
    auto result = store->store.get(*key);
    if (!result) {
      miss = true;
      return;
    }
    *out_cache = new steer_cache{std::move(result->cache)};
    if (out_plan != nullptr && result->plan) {
      *out_plan = new steer_plan{std::move(*result->plan)};
    }
  });
  if (status != STEER_OK) return status;
  if (miss) {
    g_last_error = "store get: no entry for key";
    return STEER_EMISS;
  }
  return STEER_OK;
}

steer_status steer_store_contains(steer_store* store, const char* key_hex, int* present) {
  if (store == nullptr || key_hex == nullptr || present == nullptr) {
    return invalid("store_contains: null argument");
  }
  auto key = steer::CacheKey::from_hex(key_hex);
  if (!key) return invalid("store_contains: malformed key");
  return guarded([&] { *present = store->store.contains(*key) ? 1 : 0; });
}

void steer_store_close(steer_store* store) { delete store; }

steer_status steer_answer(const steer_model* model, const steer_cache* cache,
                          const steer_plan* plan, const char* serving_prefix, const char* context,
                          const char* question, uint32_t max_new, steer_answer_stats* stats,
                          char** out_text) {
  if (model == nullptr || serving_prefix == nullptr || question == nullptr ||
      out_text == nullptr) {
    return invalid("answer: null argument");
  }
  if (cache == nullptr && context == nullptr) {
    return invalid("answer: need either a cache or a context");
  }
  return guarded([&] {
    steer::AnswerResult result = steer::answer(
        model->weights, cache != nullptr ? &cache->cache : nullptr,
        plan != nullptr ? &plan->plan : nullptr, serving_prefix,
        context != nullptr ? context : "", question, max_new);
    *out_text = dup_string(result.text);
    if (stats != nullptr) {
      stats->prefill_tokens = result.stats.prefill_tokens;
      stats->decode_tokens = result.stats.decode_tokens;
      stats->fma_prefill = result.stats.fma_prefill;
      stats->fma_decode = result.stats.fma_decode;
      stats->wall_ms_prefill = result.stats.wall_ms_prefill;
      stats->wall_ms_decode = result.stats.wall_ms_decode;
    }
  });
}

steer_status steer_profile_run(const steer_model* model, const steer_eval_example* examples,
                               size_t n_examples, const steer_profile_params* params,
                               char** result_json) {
  if (model == nullptr || examples == nullptr || params == nullptr || result_json == nullptr) {
    return invalid("profile_run: null argument");
  }
  return guarded([&] {
    std::vector<steer::EvalExample> dev;
    dev.reserve(n_examples);
    for (size_t i = 0; i < n_examples; ++i) {
      const steer_eval_example& e = examples[i];
      steer::EvalExample ex;
      ex.id = e.id != nullptr ? e.id : "";
      ex.context = e.context != nullptr ? e.context : "";
      ex.question = e.question != nullptr ? e.question : "";
      for (size_t a = 0; a < e.n_answers; ++a) {
        ex.answers.emplace_back(e.answers[a] != nullptr ? e.answers[a] : "");
      }
      dev.push_back(std::move(ex));
    }
    steer::ProfileParams p;
    p.plan = plan_params_from_c(params->plan);
    p.serving_prefix = params->serving_prefix != nullptr ? params->serving_prefix : "";
    p.budget = params->budget;
    p.top_m = params->top_m;
    p.max_new = params->max_new;
    steer::ProfileResult result = steer::profile(model->weights, dev, p);
    *result_json = dup_string(steer::profile_result_to_json(result));
  });
}

double steer_token_f1(const char* prediction, const char* const* references,
                      size_t n_references) {
  if (prediction == nullptr || references == nullptr || n_references == 0) {
    g_last_error = "token_f1: null argument";
    return -1.0;
  }
  try {
    std::vector<std::string> refs;
    refs.reserve(n_references);
    for (size_t i = 0; i < n_references; ++i) {
      refs.emplace_back(references[i] != nullptr ? references[i] : "");
    }
    return steer::token_f1(prediction, refs);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return -1.0;
  }
}

}  // extern "C"
