/*
 * C API for the steer inference core: a desk-scale decoder-only
 * transformer with prefix caching and query-independent attention
 * steering.
 *
 * All objects are opaque handles created and destroyed through this
 * interface. Functions return steer_status; on any non-OK status a
 * human-readable message is available from steer_last_error() until the
 * next call on the same thread. Strings returned through char** out
 * parameters are heap-allocated and must be released with
 * steer_string_free().
 */
#ifndef STEER_STEER_H
#define STEER_STEER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum steer_status {
  STEER_OK = 0,
  STEER_EINVAL = 1,   /* bad argument or precondition violation */
  STEER_EIO = 2,      /* filesystem failure */
  STEER_EFORMAT = 3,  /* malformed file: magic, version, truncation, size */
  STEER_ECORRUPT = 4, /* checksum or content verification failed */
  STEER_EMISS = 5,    /* cache store lookup found nothing (not an error) */
  STEER_EINTERNAL = 6
} steer_status;

typedef struct steer_model steer_model;
typedef struct steer_plan steer_plan;
typedef struct steer_cache steer_cache;
typedef struct steer_store steer_store;

typedef struct steer_model_config {
  uint32_t n_layers;
  uint32_t n_heads;
  uint32_t d_model;
  uint32_t d_ff;
  uint32_t vocab_size; /* byte-level: always 259 */
  uint32_t max_positions;
} steer_model_config;

typedef struct steer_plan_params {
  const char* prefix_1;
  const char* prefix_2;
  uint32_t k;
  double alpha;
  const char* mode;        /* "prefill_only" | "decode_only" | "both" */
  int renormalize;         /* nonzero: keep steered rows row-stochastic */
  const char* scale_axis;  /* "column" | "row" */
  const char* aggregation; /* "sum" | "union" */
} steer_plan_params;

typedef struct steer_answer_stats {
  uint64_t prefill_tokens; /* tokens pushed through prefill this request */
  uint64_t decode_tokens;  /* tokens generated */
  uint64_t fma_prefill;    /* fused multiply-adds in the prefill phase */
  uint64_t fma_decode;
  double wall_ms_prefill; /* monotonic clock */
  double wall_ms_decode;
} steer_answer_stats;

typedef struct steer_eval_example {
  const char* id;
  const char* context;
  const char* question;
  const char* const* answers;
  size_t n_answers;
} steer_eval_example;

typedef struct steer_profile_params {
  steer_plan_params plan;
  const char* serving_prefix;
  uint32_t budget; /* 0: 1 + n_layers + top_m * n_heads */
  uint32_t top_m;
  uint32_t max_new;
} steer_profile_params;

#define STEER_KEY_HEX_LEN 64 /* cache keys print as 64 hex chars */

uint32_t steer_api_version(void);
const char* steer_last_error(void);
void steer_string_free(char* s);

/* -- model ------------------------------------------------------------ */

void steer_model_config_default(steer_model_config* out);
steer_status steer_model_init_random(const steer_model_config* config, uint64_t seed,
                                     steer_model** out);
steer_status steer_model_load(const char* path, steer_model** out);
steer_status steer_model_save(const steer_model* model, const char* path);
steer_status steer_model_get_config(const steer_model* model, steer_model_config* out);
uint64_t steer_model_content_hash(const steer_model* model);
void steer_model_free(steer_model* model);

/* -- steering plans ----------------------------------------------------- */

/* Builds the query-independent plan from two re-reading passes over the
 * context. warnings_json, when non-NULL, receives a JSON array of
 * warning strings (possibly empty). */
steer_status steer_plan_build(const steer_model* model, const char* context,
                              const steer_plan_params* params, steer_plan** out,
                              char** warnings_json);
steer_status steer_plan_to_json(const steer_plan* plan, char** out_json);
steer_status steer_plan_save(const steer_plan* plan, const char* path);
steer_status steer_plan_load(const char* path, steer_plan** out);
uint64_t steer_plan_hash(const steer_plan* plan);
void steer_plan_free(steer_plan* plan);

/* -- KV caches ---------------------------------------------------------- */

/* Prefills serving_prefix + context. With a plan, prefill-phase steering
 * is applied according to the plan's mode; with plan NULL the cache is
 * unsteered. */
steer_status steer_cache_build(const steer_model* model, const char* serving_prefix,
                               const char* context, const steer_plan* plan, steer_cache** out);
steer_status steer_cache_key_hex(const steer_cache* cache, char out_hex[STEER_KEY_HEX_LEN + 1]);
uint64_t steer_cache_token_count(const steer_cache* cache);
void steer_cache_free(steer_cache* cache);

/* Key a cache would have, without building it. plan NULL keys the
 * unsteered entry. */
steer_status steer_compute_key_hex(const steer_model* model, const char* serving_prefix,
                                   const char* context, const steer_plan* plan,
                                   char out_hex[STEER_KEY_HEX_LEN + 1]);

/* -- cache store -------------------------------------------------------- */

steer_status steer_store_open(const char* root, steer_store** out);
steer_status steer_store_put(steer_store* store, const char* key_hex, const steer_cache* cache,
                             const steer_plan* plan);
/* STEER_EMISS when absent; STEER_ECORRUPT quarantines the bad entry. On
 * success *out_plan is the stored plan or NULL. out_plan may be NULL if
 * the caller does not want it. */
steer_status steer_store_get(steer_store* store, const char* key_hex, steer_cache** out_cache,
                             steer_plan** out_plan);
steer_status steer_store_contains(steer_store* store, const char* key_hex, int* present);
void steer_store_close(steer_store* store);

/* -- answering ---------------------------------------------------------- */

/* Greedy-decodes an answer. With a cache, only the question is prefilled
 * and serving_prefix must match the cached prefix; context may be NULL.
 * With cache NULL, serving_prefix + context is prefilled in full. The
 * plan (if any) drives prefill- and decode-phase steering per its mode. */
steer_status steer_answer(const steer_model* model, const steer_cache* cache,
                          const steer_plan* plan, const char* serving_prefix, const char* context,
                          const char* question, uint32_t max_new, steer_answer_stats* stats,
                          char** out_text);

/* -- profiling and evaluation ------------------------------------------- */

/* Coarse-to-fine layer/head search; the result (scores, chosen scope,
 * metrics, evaluation ledger) is returned as JSON. */
steer_status steer_profile_run(const steer_model* model, const steer_eval_example* examples,
                               size_t n_examples, const steer_profile_params* params,
                               char** result_json);

/* SQuAD-style token F1 of prediction against the best reference.
 * Returns a negative value on error. */
double steer_token_f1(const char* prediction, const char* const* references, size_t n_references);

#ifdef __cplusplus
}
#endif

#endif /* STEER_STEER_H */
