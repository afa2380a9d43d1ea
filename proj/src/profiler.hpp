#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metrics.hpp"
#include "steering.hpp"

namespace steer {

struct EvalExample {
  std::string id;
  std::string context;
  std::string question;
  std::vector<std::string> answers;

  void validate() const;
};

struct ProfileParams {
  PlanBuildParams plan;
  std::string serving_prefix;
  uint32_t budget = 0;  // 0: default 1 + n_layers + top_m * n_heads
  uint32_t top_m = 3;
  uint32_t max_new = 32;
};

struct ProfileResult {
  std::map<uint32_t, double> stage_a_scores;                          // layer -> metric
  std::map<std::pair<uint32_t, uint32_t>, double> stage_b_scores;     // (layer, head) -> metric
  std::vector<PlanEntry> chosen;                                      // tokens fields unused
  double dev_metric_baseline = 0.0;
  double dev_metric_steered = 0.0;
  uint64_t eval_call_count = 0;
  bool truncated = false;
  uint64_t evals_baseline = 0;
  uint64_t evals_stage_a = 0;
  uint64_t evals_stage_b = 0;
};

// Evaluates steering scopes on a fixed dev set with a fixed metric
// pipeline: per example, restrict that example's full plan to the scope,
// build the steered cache, greedy-decode max_new tokens, score token F1
// against the references, and average. Plans are built once per example;
// predictions are memoized per effective plan, so re-evaluating an
// equivalent scope costs nothing.
class ScopeEvaluator {
 public:
  ScopeEvaluator(const ModelWeights& weights, const std::vector<EvalExample>& dev,
                 const ProfileParams& params);

  double evaluate(const LayerHeadScope& scope);
  double evaluate_baseline();

 private:
  const ModelWeights& weights_;
  const std::vector<EvalExample>& dev_;
  ProfileParams params_;
  std::vector<SteeringPlan> full_plans_;                 // one per example
  std::vector<std::map<std::string, double>> f1_memo_;   // plan json -> f1, per example
};

// Coarse-to-fine search: Stage A scores each whole layer against the
// baseline, Stage B scores each head inside the top_m layers, and the
// chosen scope is the union of heads that at least match the baseline
// (falling back to the best whole layer when no head improves). Every
// metric evaluation is counted and capped by the budget; running out
// mid-stage returns the best so far with the truncated flag set.
ProfileResult profile(const ModelWeights& weights, const std::vector<EvalExample>& dev,
                      const ProfileParams& params);

std::string profile_result_to_json(const ProfileResult& result);

}  // namespace steer
