#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "model.hpp"

namespace steer {

enum class SteerMode { prefill_only, decode_only, both };
enum class ScaleAxis { column, row };
enum class Aggregation { head_sum, head_union };

std::string to_string(SteerMode m);
std::string to_string(ScaleAxis a);
std::string to_string(Aggregation a);
SteerMode steer_mode_from_string(std::string_view s);
ScaleAxis scale_axis_from_string(std::string_view s);
Aggregation aggregation_from_string(std::string_view s);

// Cumulative attention received by each of the first prefix_len +
// context_len tokens, per layer and head, for one re-reading pass.
struct AttentionRecord {
  int pass_id = 0;  // 1 or 2
  size_t prefix_len = 0;
  size_t context_len = 0;
  // scores[layer][head][j], j over the prefix+context span
  std::vector<std::vector<std::vector<double>>> scores;

  size_t span_len() const { return prefix_len + context_len; }
};

struct PlanEntry {
  uint32_t layer = 0;
  std::vector<uint32_t> heads;   // sorted ascending
  std::vector<uint32_t> tokens;  // context-relative, sorted ascending
};

// The query-independent steering artifact: which context tokens to
// amplify at which layers/heads, and how. Hashes pin the plan to the
// context and re-reading prefixes it was derived from.
struct SteeringPlan {
  double alpha = 2.0;
  uint32_t k = 16;
  SteerMode mode = SteerMode::both;
  bool renormalize = true;
  ScaleAxis scale_axis = ScaleAxis::column;
  Aggregation aggregation = Aggregation::head_sum;
  std::vector<PlanEntry> entries;  // sorted by layer
  uint64_t context_hash = 0;
  std::array<uint64_t, 2> prefix_hashes{0, 0};

  // Canonical form: compact JSON, alphabetically ordered keys, sorted
  // index arrays. Plan hashes are FNV-1a over these bytes.
  std::string to_canonical_json() const;
  static SteeringPlan from_json(std::string_view json_text);
  uint64_t hash() const;

  const PlanEntry* entry_for_layer(uint32_t layer) const;
};

// Column-sums the prefix+context slice of recorded attention:
// score(j) = sum_i A[:Lp,:Lp](i, j) for every layer and head.
AttentionRecord cumulative_scores(const AttentionTrace& trace, size_t prefix_len,
                                  size_t context_len, int pass_id);

// Per layer: aggregate scores across heads, rank the context span, take
// top-k (ties to the lower index), then intersect the two passes' sets.
// Indices are context-relative. k larger than the context is clamped,
// with a note appended to *warnings when provided.
std::vector<std::vector<uint32_t>> select_tokens(const AttentionRecord& rec1,
                                                 const AttentionRecord& rec2, uint32_t k,
                                                 Aggregation aggregation = Aggregation::head_sum,
                                                 bool length_normalized = false,
                                                 std::vector<std::string>* warnings = nullptr);

// The weighting matrix for one layer: all ones, except entries for the
// plan's selected tokens (at absolute column prefix_len + t for the
// column axis, or that row for the row axis) which hold alpha. A layer
// without a plan entry yields all ones.
Tensor2D build_weight_matrix(const SteeringPlan& plan, uint32_t layer, size_t prefix_len,
                             size_t total_len);

// Elementwise M * A on the listed heads, leaving other heads untouched.
// With renormalize set, each modified row is rescaled to keep its
// pre-steering mass, so rows of a row-stochastic input stay stochastic
// and an all-ones M is a bit-exact no-op.
Tensor3D steer_attention(const Tensor3D& attn, const Tensor2D& weight_matrix,
                         std::span<const uint32_t> heads, bool renormalize);

// Restricts steering to particular layers/heads. Default-constructed
// means no restriction (every layer, all heads); restricted with an
// empty layer list means steer nothing.
struct LayerHeadScope {
  bool restricted = false;
  std::vector<PlanEntry> layers;  // tokens fields unused

  bool all() const { return !restricted; }
  const PlanEntry* find(uint32_t layer) const;
};

struct PlanBuildParams {
  std::string prefix_1;
  std::string prefix_2;
  uint32_t k = 16;
  double alpha = 2.0;
  SteerMode mode = SteerMode::both;
  bool renormalize = true;
  ScaleAxis scale_axis = ScaleAxis::column;
  Aggregation aggregation = Aggregation::head_sum;
  bool length_normalized = false;
  LayerHeadScope scope;
};

struct PlanBuildResult {
  SteeringPlan plan;
  AttentionRecord record_1;
  AttentionRecord record_2;
  std::vector<std::string> warnings;
};

// Contextual re-reading end to end: prefill prefix_1+context and
// prefix_2+context (two independent sessions, run concurrently), score,
// select, and assemble the plan. The query never participates. An empty
// intersection everywhere still yields a valid (no-op) plan plus a
// warning.
PlanBuildResult build_plan(const ModelWeights& weights, std::string_view context,
                           const PlanBuildParams& params);

// Keeps only the scoped layers/heads of a built plan; drops entries that
// end up with no heads.
SteeringPlan restrict_plan(const SteeringPlan& plan, const LayerHeadScope& scope);

// Attention hook that applies the plan's weighting at its layers. Exactly
// equivalent, bit for bit, to build_weight_matrix + steer_attention.
AttentionHook make_steering_hook(const SteeringPlan& plan, size_t serving_prefix_len);

// Prefill serving_prefix+context with prefill-phase steering per the
// plan's mode, stamped with full provenance. Rejects a plan whose
// context_hash does not match the given context.
KVCache build_steered_cache(const ModelWeights& weights, std::string_view serving_prefix,
                            std::string_view context, const SteeringPlan& plan);

// Same prefill without any steering; plan_hash stays zero.
KVCache build_context_cache(const ModelWeights& weights, std::string_view serving_prefix,
                            std::string_view context);

struct AnswerResult {
  std::string text;
  GenerateStats stats;
};

// Tokenizes the question, extends the cache (building it first when none
// is given), applies decode-phase steering per the plan's mode, and
// greedy-decodes. The caller's cache is never mutated.
AnswerResult answer(const ModelWeights& weights, const KVCache* cache, const SteeringPlan* plan,
                    std::string_view serving_prefix, std::string_view context,
                    std::string_view question, size_t max_new);

}  // namespace steer
