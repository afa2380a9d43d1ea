#include "profiler.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace steer {

namespace {

using nlohmann::json;

LayerHeadScope whole_layer(uint32_t layer, uint32_t n_heads) {
  PlanEntry e;
  e.layer = layer;
  e.heads.resize(n_heads);
  std::iota(e.heads.begin(), e.heads.end(), 0u);
  LayerHeadScope scope;
  scope.restricted = true;
  scope.layers.push_back(std::move(e));
  return scope;
}

LayerHeadScope single_head(uint32_t layer, uint32_t head) {
  PlanEntry e;
  e.layer = layer;
  e.heads = {head};
  LayerHeadScope scope;
  scope.restricted = true;
  scope.layers.push_back(std::move(e));
  return scope;
}

}  // namespace

void EvalExample::validate() const {
  if (context.empty()) fail(ErrorCode::invalid_argument, "eval example " + id + ": empty context");
  if (question.empty()) {
    fail(ErrorCode::invalid_argument, "eval example " + id + ": empty question");
  }
  if (answers.empty()) fail(ErrorCode::invalid_argument, "eval example " + id + ": no answers");
}

ScopeEvaluator::ScopeEvaluator(const ModelWeights& weights, const std::vector<EvalExample>& dev,
                               const ProfileParams& params)
    : weights_(weights), dev_(dev), params_(params) {
  PlanBuildParams full = params_.plan;
  full.scope = LayerHeadScope{};  // every layer, all heads
  full_plans_.reserve(dev_.size());
  f1_memo_.resize(dev_.size());
  for (const auto& example : dev_) {
    example.validate();
    full_plans_.push_back(build_plan(weights_, example.context, full).plan);
  }
}

double ScopeEvaluator::evaluate(const LayerHeadScope& scope) {
  double sum = 0.0;
  for (size_t i = 0; i < dev_.size(); ++i) {
    const SteeringPlan restricted = restrict_plan(full_plans_[i], scope);
    const std::string key = restricted.to_canonical_json();
    auto it = f1_memo_[i].find(key);
    if (it == f1_memo_[i].end()) {
      const SteeringPlan* plan = restricted.entries.empty() ? nullptr : &restricted;
      AnswerResult out = answer(weights_, nullptr, plan, params_.serving_prefix, dev_[i].context,
                                dev_[i].question, params_.max_new);
      it = f1_memo_[i].emplace(key, token_f1(out.text, dev_[i].answers)).first;
    }
    sum += it->second;
  }
  return sum / static_cast<double>(dev_.size());
}

double ScopeEvaluator::evaluate_baseline() {
  LayerHeadScope none;
  none.restricted = true;
  return evaluate(none);
}

ProfileResult profile(const ModelWeights& weights, const std::vector<EvalExample>& dev,
                      const ProfileParams& params) {
  if (dev.empty()) fail(ErrorCode::invalid_argument, "profile: dev set must be non-empty");
  const uint32_t n_layers = weights.config.n_layers;
  const uint32_t n_heads = weights.config.n_heads;
  const uint32_t top_m = std::max<uint32_t>(1, params.top_m);
  uint32_t budget = params.budget;
  if (budget == 0) budget = 1 + n_layers + top_m * n_heads;
  if (budget < n_layers + 1) {
    fail(ErrorCode::invalid_argument, "profile: budget must be at least n_layers + 1");
  }

  ScopeEvaluator evaluator(weights, dev, params);
  ProfileResult result;
  uint64_t count = 0;

  result.dev_metric_baseline = evaluator.evaluate_baseline();
  ++count;
  result.evals_baseline = 1;

  // Stage A: each layer alone, all heads. Fits the budget by the
  // precondition above.
  for (uint32_t l = 0; l < n_layers; ++l) {
    result.stage_a_scores[l] = evaluator.evaluate(whole_layer(l, n_heads));
    ++count;
    ++result.evals_stage_a;
  }

  std::vector<uint32_t> ranked(n_layers);
  std::iota(ranked.begin(), ranked.end(), 0u);
  std::stable_sort(ranked.begin(), ranked.end(), [&](uint32_t a, uint32_t b) {
    const double sa = result.stage_a_scores.at(a);
    const double sb = result.stage_a_scores.at(b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  ranked.resize(std::min<size_t>(top_m, ranked.size()));

  // Stage B: each head alone within the kept layers, best layer first.
  // No budget left at the stage boundary means the stage is skipped
  // outright; running out part-way through is a truncation.
  if (count < budget) {
    for (uint32_t l : ranked) {
      for (uint32_t h = 0; h < n_heads; ++h) {
        if (count >= budget) {
          result.truncated = true;
          break;
        }
        result.stage_b_scores[{l, h}] = evaluator.evaluate(single_head(l, h));
        ++count;
        ++result.evals_stage_b;
      }
      if (result.truncated) break;
    }
  }
  result.eval_call_count = count;

  bool any_strict = false;
  for (const auto& [l, s] : result.stage_a_scores) {
    any_strict = any_strict || s > result.dev_metric_baseline;
  }
  for (const auto& [lh, s] : result.stage_b_scores) {
    any_strict = any_strict || s > result.dev_metric_baseline;
  }

  std::map<uint32_t, std::vector<uint32_t>> improving;
  for (const auto& [lh, s] : result.stage_b_scores) {
    if (s >= result.dev_metric_baseline) improving[lh.first].push_back(lh.second);
  }

  result.dev_metric_steered = result.dev_metric_baseline;
  if (!any_strict) {
    // Nothing beats the baseline: empty scope.
  } else if (!improving.empty()) {
    for (auto& [layer, heads] : improving) {
      std::sort(heads.begin(), heads.end());
      PlanEntry e;
      e.layer = layer;
      e.heads = std::move(heads);
      result.chosen.push_back(std::move(e));
    }
    // Best measured metric among candidates contained in the chosen
    // scope: each chosen head, plus any whole layer fully covered.
    for (const auto& e : result.chosen) {
      for (uint32_t h : e.heads) {
        result.dev_metric_steered =
            std::max(result.dev_metric_steered, result.stage_b_scores.at({e.layer, h}));
      }
      if (e.heads.size() == n_heads) {
        result.dev_metric_steered =
            std::max(result.dev_metric_steered, result.stage_a_scores.at(e.layer));
      }
    }
  } else {
    // No individual head matched the baseline, but some whole layer beat
    // it: keep the best layer.
    const uint32_t best_layer = ranked.front();
    if (result.stage_a_scores.at(best_layer) > result.dev_metric_baseline) {
      PlanEntry e;
      e.layer = best_layer;
      e.heads.resize(n_heads);
      std::iota(e.heads.begin(), e.heads.end(), 0u);
      result.chosen.push_back(std::move(e));
      result.dev_metric_steered = result.stage_a_scores.at(best_layer);
    }
  }
  return result;
}

std::string profile_result_to_json(const ProfileResult& result) {
  json j;
  j["dev_metric_baseline"] = result.dev_metric_baseline;
  j["dev_metric_steered"] = result.dev_metric_steered;
  j["eval_call_count"] = result.eval_call_count;
  j["truncated"] = result.truncated;
  j["ledger"] = {{"baseline", result.evals_baseline},
                 {"stage_a", result.evals_stage_a},
                 {"stage_b", result.evals_stage_b}};
  json stage_a = json::array();
  for (const auto& [layer, metric] : result.stage_a_scores) {
    stage_a.push_back({{"layer", layer}, {"metric", metric}});
  }
  j["stage_a_scores"] = stage_a;
  json stage_b = json::array();
  for (const auto& [lh, metric] : result.stage_b_scores) {
    stage_b.push_back({{"layer", lh.first}, {"head", lh.second}, {"metric", metric}});
  }
  j["stage_b_scores"] = stage_b;
  json chosen = json::array();
  for (const auto& e : result.chosen) {
    chosen.push_back({{"layer", e.layer}, {"heads", e.heads}});
  }
  j["chosen"] = chosen;
  return j.dump();
}

}  // namespace steer
