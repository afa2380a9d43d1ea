#include "steering.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace steer {

namespace {

using nlohmann::json;

std::vector<uint32_t> sorted_unique(std::vector<uint32_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Indices of the k largest scores, ties broken by the lower index.
// Returned ascending (set order).
std::vector<uint32_t> top_k_indices(std::span<const double> scores, uint32_t k) {
  std::vector<uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  const size_t take = std::min<size_t>(k, order.size());
  std::vector<uint32_t> picked(order.begin(), order.begin() + static_cast<ptrdiff_t>(take));
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::vector<uint32_t> intersect_sorted(const std::vector<uint32_t>& a,
                                       const std::vector<uint32_t>& b) {
  std::vector<uint32_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// Head-aggregated, context-relative scores for one pass and layer.
// Length normalization divides each absolute position j by the number of
// causal rows that can attend to it, L_p - j.
std::vector<double> context_scores_sum(const AttentionRecord& rec, size_t layer,
                                       bool length_normalized) {
  const size_t lp = rec.span_len();
  std::vector<double> combined(rec.context_len, 0.0);
  for (const auto& head_scores : rec.scores[layer]) {
    for (size_t t = 0; t < rec.context_len; ++t) {
      combined[t] += head_scores[rec.prefix_len + t];
    }
  }
  if (length_normalized) {
    for (size_t t = 0; t < rec.context_len; ++t) {
      const size_t j = rec.prefix_len + t;
      combined[t] /= static_cast<double>(lp - j);
    }
  }
  return combined;
}

std::vector<uint32_t> pass_top_k(const AttentionRecord& rec, size_t layer, uint32_t k,
                                 Aggregation aggregation, bool length_normalized) {
  if (aggregation == Aggregation::head_sum) {
    return top_k_indices(context_scores_sum(rec, layer, length_normalized), k);
  }
  // head_union: per-head top-k over the context span, then union.
  const size_t lp = rec.span_len();
  std::vector<uint32_t> merged;
  for (const auto& head_scores : rec.scores[layer]) {
    std::vector<double> ctx(rec.context_len);
    for (size_t t = 0; t < rec.context_len; ++t) {
      ctx[t] = head_scores[rec.prefix_len + t];
      if (length_normalized) ctx[t] /= static_cast<double>(lp - (rec.prefix_len + t));
    }
    auto picked = top_k_indices(ctx, k);
    merged.insert(merged.end(), picked.begin(), picked.end());
  }
  return sorted_unique(std::move(merged));
}

json entries_to_json(const std::vector<PlanEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    json obj;
    obj["layer"] = e.layer;
    obj["heads"] = e.heads;
    obj["tokens"] = e.tokens;
    arr.push_back(obj);
  }
  return arr;
}

void check_known_keys(const json& obj, std::initializer_list<const char*> allowed,
                      const char* what) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* k) { return it.key() == k; }) == allowed.end()) {
      fail(ErrorCode::invalid_argument,
           std::string(what) + ": unknown key \"" + it.key() + "\"");
    }
  }
}

uint64_t parse_hash_field(const json& j, const char* key) {
  uint64_t v = 0;
  if (!j.at(key).is_string() || !parse_hex16(j.at(key).get<std::string>(), v)) {
    fail(ErrorCode::invalid_argument, std::string("plan: field ") + key + " must be 16 hex chars");
  }
  return v;
}

}  // namespace

std::string to_string(SteerMode m) {
  switch (m) {
    case SteerMode::prefill_only: return "prefill_only";
    case SteerMode::decode_only: return "decode_only";
    case SteerMode::both: return "both";
  }
  return "both";
}

std::string to_string(ScaleAxis a) { return a == ScaleAxis::column ? "column" : "row"; }

std::string to_string(Aggregation a) { return a == Aggregation::head_sum ? "sum" : "union"; }

SteerMode steer_mode_from_string(std::string_view s) {
  if (s == "prefill_only") return SteerMode::prefill_only;
  if (s == "decode_only") return SteerMode::decode_only;
  if (s == "both") return SteerMode::both;
  fail(ErrorCode::invalid_argument, "unknown steering mode \"" + std::string(s) + "\"");
}

ScaleAxis scale_axis_from_string(std::string_view s) {
  if (s == "column") return ScaleAxis::column;
  if (s == "row") return ScaleAxis::row;
  fail(ErrorCode::invalid_argument, "unknown scale axis \"" + std::string(s) + "\"");
}

Aggregation aggregation_from_string(std::string_view s) {
  if (s == "sum") return Aggregation::head_sum;
  if (s == "union") return Aggregation::head_union;
  fail(ErrorCode::invalid_argument, "unknown aggregation \"" + std::string(s) + "\"");
}

const PlanEntry* SteeringPlan::entry_for_layer(uint32_t layer) const {
  for (const auto& e : entries) {
    if (e.layer == layer) return &e;
  }
  return nullptr;
}

std::string SteeringPlan::to_canonical_json() const {
  json j;
  j["version"] = 1;
  j["alpha"] = alpha;
  j["k"] = k;
  j["mode"] = to_string(mode);
  j["renormalize"] = renormalize;
  j["scale_axis"] = to_string(scale_axis);
  j["aggregation"] = to_string(aggregation);
  j["context_hash"] = to_hex16(context_hash);
  j["prefix_hashes"] = {to_hex16(prefix_hashes[0]), to_hex16(prefix_hashes[1])};
  j["entries"] = entries_to_json(entries);
  return j.dump();
}

SteeringPlan SteeringPlan::from_json(std::string_view json_text) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    fail(ErrorCode::corrupt, "plan: not valid JSON");
  }
  check_known_keys(j,
                   {"version", "alpha", "k", "mode", "renormalize", "scale_axis", "aggregation",
                    "context_hash", "prefix_hashes", "entries"},
                   "plan");
  try {
    if (j.at("version").get<int>() != 1) {
      fail(ErrorCode::bad_version, "plan: unsupported version");
    }
    SteeringPlan plan;
    plan.alpha = j.at("alpha").get<double>();
    plan.k = j.at("k").get<uint32_t>();
    plan.mode = steer_mode_from_string(j.at("mode").get<std::string>());
    plan.renormalize = j.at("renormalize").get<bool>();
    plan.scale_axis = scale_axis_from_string(j.at("scale_axis").get<std::string>());
    plan.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
    plan.context_hash = parse_hash_field(j, "context_hash");
    const auto& ph = j.at("prefix_hashes");
    if (!ph.is_array() || ph.size() != 2 ||
        !parse_hex16(ph[0].get<std::string>(), plan.prefix_hashes[0]) ||
        !parse_hex16(ph[1].get<std::string>(), plan.prefix_hashes[1])) {
      fail(ErrorCode::invalid_argument, "plan: prefix_hashes must hold two 16-hex digests");
    }
    if (!(plan.alpha > 0.0)) {
      fail(ErrorCode::invalid_argument, "plan: alpha must be > 0");
    }
    if (plan.k < 1) fail(ErrorCode::invalid_argument, "plan: k must be >= 1");
    for (const auto& je : j.at("entries")) {
      check_known_keys(je, {"layer", "heads", "tokens"}, "plan entry");
      PlanEntry e;
      e.layer = je.at("layer").get<uint32_t>();
      e.heads = sorted_unique(je.at("heads").get<std::vector<uint32_t>>());
      e.tokens = sorted_unique(je.at("tokens").get<std::vector<uint32_t>>());
      if (e.heads.empty() || e.tokens.empty()) continue;  // no-op entry
      if (plan.entry_for_layer(e.layer) != nullptr) {
        fail(ErrorCode::invalid_argument,
             "plan: duplicate entry for layer " + std::to_string(e.layer));
      }
      plan.entries.push_back(std::move(e));
    }
    std::sort(plan.entries.begin(), plan.entries.end(),
              [](const PlanEntry& a, const PlanEntry& b) { return a.layer < b.layer; });
    return plan;
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, std::string("plan: ") + e.what());
  }
}

uint64_t SteeringPlan::hash() const { return fnv1a64(to_canonical_json()); }

AttentionRecord cumulative_scores(const AttentionTrace& trace, size_t prefix_len,
                                  size_t context_len, int pass_id) {
  if (pass_id != 1 && pass_id != 2) {
    fail(ErrorCode::invalid_argument, "cumulative_scores: pass_id must be 1 or 2");
  }
  const size_t lp = prefix_len + context_len;
  AttentionRecord rec;
  rec.pass_id = pass_id;
  rec.prefix_len = prefix_len;
  rec.context_len = context_len;
  rec.scores.reserve(trace.per_layer.size());
  for (size_t l = 0; l < trace.per_layer.size(); ++l) {
    const Tensor3D& attn = trace.per_layer[l];
    if (attn.d1 != attn.d2 || lp > attn.d1) {
      fail(ErrorCode::invalid_argument,
           "cumulative_scores: span " + std::to_string(lp) + " exceeds attention size " +
               std::to_string(attn.d1) + " at layer " + std::to_string(l));
    }
    std::vector<std::vector<double>> per_head(attn.d0);
    for (size_t h = 0; h < attn.d0; ++h) {
      std::vector<double>& sums = per_head[h];
      sums.assign(lp, 0.0);
      for (size_t i = 0; i < lp; ++i) {
        const double* row = attn.row(h, i);
        for (size_t j = 0; j < lp; ++j) sums[j] += row[j];
      }
    }
    rec.scores.push_back(std::move(per_head));
  }
  return rec;
}

std::vector<std::vector<uint32_t>> select_tokens(const AttentionRecord& rec1,
                                                 const AttentionRecord& rec2, uint32_t k,
                                                 Aggregation aggregation, bool length_normalized,
                                                 std::vector<std::string>* warnings) {
  if (k < 1) fail(ErrorCode::invalid_argument, "select_tokens: k must be >= 1");
  if (rec1.context_len != rec2.context_len) {
    fail(ErrorCode::invalid_argument, "select_tokens: passes disagree on context length");
  }
  if (rec1.scores.size() != rec2.scores.size()) {
    fail(ErrorCode::invalid_argument, "select_tokens: passes disagree on layer count");
  }
  uint32_t effective_k = k;
  if (k > rec1.context_len) {
    effective_k = static_cast<uint32_t>(rec1.context_len);
    if (warnings != nullptr) {
      warnings->push_back("select_tokens: k=" + std::to_string(k) + " clamped to context length " +
                          std::to_string(effective_k));
    }
  }
  std::vector<std::vector<uint32_t>> selected(rec1.scores.size());
  for (size_t l = 0; l < rec1.scores.size(); ++l) {
    auto top1 = pass_top_k(rec1, l, effective_k, aggregation, length_normalized);
    auto top2 = pass_top_k(rec2, l, effective_k, aggregation, length_normalized);
    selected[l] = intersect_sorted(top1, top2);
  }
  return selected;
}

Tensor2D build_weight_matrix(const SteeringPlan& plan, uint32_t layer, size_t prefix_len,
                             size_t total_len) {
  Tensor2D m(total_len, total_len);
  std::fill(m.data.begin(), m.data.end(), 1.0);
  const PlanEntry* entry = plan.entry_for_layer(layer);
  if (entry == nullptr) return m;
  for (uint32_t t : entry->tokens) {
    const size_t pos = prefix_len + t;
    if (pos >= total_len) {
      fail(ErrorCode::invalid_argument, "build_weight_matrix: selected token at position " +
                                            std::to_string(pos) + " >= total length " +
                                            std::to_string(total_len));
    }
    if (plan.scale_axis == ScaleAxis::column) {
      for (size_t i = 0; i < total_len; ++i) m.at(i, pos) = plan.alpha;
    } else {
      for (size_t j = 0; j < total_len; ++j) m.at(pos, j) = plan.alpha;
    }
  }
  return m;
}

Tensor3D steer_attention(const Tensor3D& attn, const Tensor2D& weight_matrix,
                         std::span<const uint32_t> heads, bool renormalize) {
  if (weight_matrix.rows != attn.d1 || weight_matrix.cols != attn.d2) {
    fail(ErrorCode::invalid_argument, "steer_attention: weight matrix shape (" +
                                          std::to_string(weight_matrix.rows) + "x" +
                                          std::to_string(weight_matrix.cols) +
                                          ") does not match attention rows");
  }
  Tensor3D out = attn;
  const std::vector<uint32_t> head_set = sorted_unique({heads.begin(), heads.end()});
  for (uint32_t h : head_set) {
    if (h >= attn.d0) {
      fail(ErrorCode::invalid_argument,
           "steer_attention: head " + std::to_string(h) + " out of range");
    }
    for (size_t i = 0; i < attn.d1; ++i) {
      double* row = out.row(h, i);
      const double* w = weight_matrix.row(i);
      double orig_sum = 0.0;
      if (renormalize) {
        for (size_t j = 0; j < attn.d2; ++j) orig_sum += row[j];
      }
      for (size_t j = 0; j < attn.d2; ++j) row[j] *= w[j];
      if (renormalize) {
        double scaled_sum = 0.0;
        for (size_t j = 0; j < attn.d2; ++j) scaled_sum += row[j];
        if (scaled_sum == 0.0) {
          fail(ErrorCode::invalid_argument,
               "steer_attention: row " + std::to_string(i) + " sums to zero after scaling");
        }
        const double factor = orig_sum / scaled_sum;
        for (size_t j = 0; j < attn.d2; ++j) row[j] *= factor;
      }
    }
  }
  return out;
}

const PlanEntry* LayerHeadScope::find(uint32_t layer) const {
  for (const auto& e : layers) {
    if (e.layer == layer) return &e;
  }
  return nullptr;
}

PlanBuildResult build_plan(const ModelWeights& weights, std::string_view context,
                           const PlanBuildParams& params) {
  if (context.empty()) {
    fail(ErrorCode::invalid_argument, "build_plan: context must be non-empty");
  }
  if (params.prefix_1 == params.prefix_2) {
    fail(ErrorCode::invalid_argument, "build_plan: the two re-reading prefixes must differ");
  }
  if (!(params.alpha > 0.0)) {
    fail(ErrorCode::invalid_argument, "build_plan: alpha must be > 0");
  }
  if (params.k < 1) {
    fail(ErrorCode::invalid_argument, "build_plan: k must be >= 1");
  }
  for (const auto& s : params.scope.layers) {
    if (s.layer >= weights.config.n_layers) {
      fail(ErrorCode::invalid_argument, "build_plan: scope layer out of range");
    }
    for (uint32_t h : s.heads) {
      if (h >= weights.config.n_heads) {
        fail(ErrorCode::invalid_argument, "build_plan: scope head out of range");
      }
    }
  }

  // The two re-reading passes are independent sessions over shared
  // read-only weights; run them concurrently.
  AttentionRecord recs[2];
  std::exception_ptr errs[2];
  auto run_pass = [&](int pass, const std::string& prefix) {
    try {
      TokenSequence seq = make_sequence(prefix, context, "", weights.config);
      PrefillResult pr = prefill(weights, seq, {}, /*record_attention=*/true);
      recs[pass - 1] = cumulative_scores(*pr.attention, seq.prefix_len, seq.context_len, pass);
    } catch (...) {
      errs[pass - 1] = std::current_exception();
    }
  };
  std::thread second([&] { run_pass(2, params.prefix_2); });
  run_pass(1, params.prefix_1);
  second.join();
  if (errs[0]) std::rethrow_exception(errs[0]);
  if (errs[1]) std::rethrow_exception(errs[1]);

  PlanBuildResult result;
  auto selected = select_tokens(recs[0], recs[1], params.k, params.aggregation,
                                params.length_normalized, &result.warnings);

  std::vector<uint32_t> all_heads(weights.config.n_heads);
  std::iota(all_heads.begin(), all_heads.end(), 0u);

  SteeringPlan plan;
  plan.alpha = params.alpha;
  plan.k = params.k;
  plan.mode = params.mode;
  plan.renormalize = params.renormalize;
  plan.scale_axis = params.scale_axis;
  plan.aggregation = params.aggregation;
  plan.context_hash = fnv1a64(context);
  plan.prefix_hashes = {fnv1a64(params.prefix_1), fnv1a64(params.prefix_2)};
  for (uint32_t l = 0; l < weights.config.n_layers; ++l) {
    const PlanEntry* scoped = params.scope.all() ? nullptr : params.scope.find(l);
    if (!params.scope.all() && scoped == nullptr) continue;
    if (selected[l].empty()) continue;
    PlanEntry entry;
    entry.layer = l;
    entry.heads = scoped != nullptr ? sorted_unique(scoped->heads) : all_heads;
    if (entry.heads.empty()) continue;
    entry.tokens = selected[l];
    plan.entries.push_back(std::move(entry));
  }
  if (plan.entries.empty()) {
    result.warnings.push_back(
        "build_plan: top-k intersection is empty at every layer in scope; steering is a no-op");
  }
  result.plan = std::move(plan);
  result.record_1 = std::move(recs[0]);
  result.record_2 = std::move(recs[1]);
  return result;
}

SteeringPlan restrict_plan(const SteeringPlan& plan, const LayerHeadScope& scope) {
  if (scope.all()) return plan;
  SteeringPlan out = plan;
  out.entries.clear();
  for (const auto& e : plan.entries) {
    const PlanEntry* scoped = scope.find(e.layer);
    if (scoped == nullptr) continue;
    PlanEntry kept;
    kept.layer = e.layer;
    kept.heads = intersect_sorted(e.heads, sorted_unique(scoped->heads));
    kept.tokens = e.tokens;
    if (!kept.heads.empty()) out.entries.push_back(std::move(kept));
  }
  return out;
}

AttentionHook make_steering_hook(const SteeringPlan& plan, size_t serving_prefix_len) {
  return [plan, serving_prefix_len](uint32_t layer, const Tensor3D& attn,
                                    size_t query_offset) -> Tensor3D {
    const PlanEntry* entry = plan.entry_for_layer(layer);
    if (entry == nullptr) return attn;
    Tensor3D out = attn;
    for (uint32_t h : entry->heads) {
      if (h >= attn.d0) {
        fail(ErrorCode::invalid_argument, "steering hook: head out of range");
      }
      for (size_t r = 0; r < attn.d1; ++r) {
        double* row = out.row(h, r);
        double orig_sum = 0.0;
        if (plan.renormalize) {
          for (size_t j = 0; j < attn.d2; ++j) orig_sum += row[j];
        }
        if (plan.scale_axis == ScaleAxis::column) {
          for (uint32_t t : entry->tokens) {
            const size_t col = serving_prefix_len + t;
            if (col >= attn.d2) {
              fail(ErrorCode::invalid_argument,
                   "steering hook: selected token column beyond sequence");
            }
            row[col] *= plan.alpha;
          }
        } else {
          // Row axis: scale the whole row when it belongs to a selected
          // token. Decode rows sit past the context, so this only fires
          // during prefill.
          const size_t abs_row = query_offset + r;
          const bool selected =
              abs_row >= serving_prefix_len &&
              std::binary_search(entry->tokens.begin(), entry->tokens.end(),
                                 static_cast<uint32_t>(abs_row - serving_prefix_len));
          if (selected) {
            for (size_t j = 0; j < attn.d2; ++j) row[j] *= plan.alpha;
          }
        }
        if (plan.renormalize) {
          double scaled_sum = 0.0;
          for (size_t j = 0; j < attn.d2; ++j) scaled_sum += row[j];
          if (scaled_sum == 0.0) {
            fail(ErrorCode::invalid_argument, "steering hook: row sums to zero after scaling");
          }
          const double factor = orig_sum / scaled_sum;
          for (size_t j = 0; j < attn.d2; ++j) row[j] *= factor;
        }
      }
    }
    return out;
  };
}

KVCache build_steered_cache(const ModelWeights& weights, std::string_view serving_prefix,
                            std::string_view context, const SteeringPlan& plan) {
  if (plan.context_hash != fnv1a64(context)) {
    fail(ErrorCode::stale_plan, "build_steered_cache: plan was built for a different context");
  }
  TokenSequence seq = make_sequence(serving_prefix, context, "", weights.config);
  AttentionHook hook;
  if (plan.mode != SteerMode::decode_only && !plan.entries.empty()) {
    hook = make_steering_hook(plan, seq.prefix_len);
  }
  PrefillResult pr = prefill(weights, seq, hook);
  pr.cache.provenance.prefix_hash = fnv1a64(serving_prefix);
  pr.cache.provenance.context_hash = fnv1a64(context);
  pr.cache.provenance.plan_hash = plan.hash();
  return std::move(pr.cache);
}

KVCache build_context_cache(const ModelWeights& weights, std::string_view serving_prefix,
                            std::string_view context) {
  TokenSequence seq = make_sequence(serving_prefix, context, "", weights.config);
  PrefillResult pr = prefill(weights, seq);
  pr.cache.provenance.prefix_hash = fnv1a64(serving_prefix);
  pr.cache.provenance.context_hash = fnv1a64(context);
  pr.cache.provenance.plan_hash = 0;
  return std::move(pr.cache);
}

AnswerResult answer(const ModelWeights& weights, const KVCache* cache, const SteeringPlan* plan,
                    std::string_view serving_prefix, std::string_view context,
                    std::string_view question, size_t max_new) {
  using clock = std::chrono::steady_clock;
  if (question.empty()) {
    fail(ErrorCode::invalid_argument, "answer: question must be non-empty");
  }

  AnswerResult result;
  KVCache built;
  const KVCache* base = cache;
  if (base == nullptr) {
    // Full prefill: the same computation a steered cache build performs,
    // just not persisted.
    const auto t0 = clock::now();
    OpCounter counter;
    TokenSequence seq = make_sequence(serving_prefix, context, "", weights.config);
    if (plan != nullptr && plan->context_hash != fnv1a64(context)) {
      fail(ErrorCode::stale_plan, "answer: plan was built for a different context");
    }
    AttentionHook hook;
    if (plan != nullptr && plan->mode != SteerMode::decode_only && !plan->entries.empty()) {
      hook = make_steering_hook(*plan, seq.prefix_len);
    }
    PrefillResult pr = prefill(weights, seq, hook, false, &counter);
    built = std::move(pr.cache);
    base = &built;
    result.stats.prefill_tokens = seq.size();
    result.stats.fma_prefill = counter.fused_multiply_adds;
    result.stats.wall_ms_prefill =
        std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  } else {
    const KVProvenance& prov = base->provenance;
    if (prov.prefix_hash != 0 && prov.prefix_hash != fnv1a64(serving_prefix)) {
      fail(ErrorCode::stale_plan, "answer: serving prefix does not match the cached prefix");
    }
    if (plan != nullptr && prov.plan_hash != 0 && prov.plan_hash != plan->hash()) {
      fail(ErrorCode::stale_plan, "answer: plan does not match the one the cache was built with");
    }
  }

  const size_t prefix_len = 1 + serving_prefix.size();  // BOS + prefix bytes
  AttentionHook decode_hook;
  if (plan != nullptr && plan->mode != SteerMode::prefill_only && !plan->entries.empty()) {
    decode_hook = make_steering_hook(*plan, prefix_len);
  }

  GenerateStats gen_stats;
  std::vector<uint32_t> query = tokenize(question);
  std::vector<uint32_t> ids =
      generate(weights, *base, query, max_new, decode_hook, &gen_stats);
  result.text = detokenize(ids);
  result.stats.prefill_tokens += gen_stats.prefill_tokens;
  result.stats.decode_tokens = gen_stats.decode_tokens;
  result.stats.fma_prefill += gen_stats.fma_prefill;
  result.stats.fma_decode = gen_stats.fma_decode;
  result.stats.wall_ms_prefill += gen_stats.wall_ms_prefill;
  result.stats.wall_ms_decode = gen_stats.wall_ms_decode;
  return result;
}

}  // namespace steer
