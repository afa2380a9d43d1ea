#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "profiler.hpp"
#include "test_util.hpp"

using namespace steer;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.max_positions = 256;
  return c;
}

ProfileParams toy_params(double alpha = 8.0, uint32_t k = 4) {
  ProfileParams p;
  p.plan.prefix_1 = "Summarize the key facts of the following passage:";
  p.plan.prefix_2 = "List the entities and relationships in the following passage:";
  p.plan.k = k;
  p.plan.alpha = alpha;
  p.serving_prefix = "Answer from the passage:";
  p.top_m = 2;
  p.max_new = 12;
  return p;
}

LayerHeadScope scope_of(std::vector<PlanEntry> entries) {
  LayerHeadScope s;
  s.restricted = true;
  s.layers = std::move(entries);
  return s;
}

// All 2^(layers*heads) scopes of a toy model.
std::vector<LayerHeadScope> all_scopes(uint32_t layers, uint32_t heads) {
  const uint32_t bits = layers * heads;
  std::vector<LayerHeadScope> scopes;
  for (uint32_t mask = 0; mask < (1u << bits); ++mask) {
    std::map<uint32_t, std::vector<uint32_t>> by_layer;
    for (uint32_t b = 0; b < bits; ++b) {
      if (mask & (1u << b)) by_layer[b / heads].push_back(b % heads);
    }
    std::vector<PlanEntry> entries;
    for (auto& [l, hs] : by_layer) entries.push_back(PlanEntry{l, hs, {}});
    scopes.push_back(scope_of(std::move(entries)));
  }
  return scopes;
}

}  // namespace

TEST_CASE("token_f1 analytic cases") {
  CHECK(token_f1("the cat sat", {"the cat sat"}) == 1.0);
  CHECK(token_f1("x y", {"a b"}) == 0.0);
  CHECK(token_f1("a b c", {"b c d"}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(token_f1("", {""}) == 1.0);
  CHECK(token_f1("something", {""}) == 0.0);
  CHECK(token_f1("", {"something"}) == 0.0);
  CHECK(token_f1("The CAT, sat!", {"the cat sat"}) == 1.0);  // case and punctuation
  CHECK(token_f1("b", {"zzz", "b"}) == 1.0);                 // best reference wins
  CHECK(token_f1("b b", {"b"}) == doctest::Approx(2.0 / 3.0));  // multiset overlap
  CHECK_THROWS_AS(token_f1("x", {}), Error);
}

TEST_CASE("normalize_tokens strips punctuation and lowercases") {
  CHECK(normalize_tokens("Hello, World!") == std::vector<std::string>{"hello", "world"});
  CHECK(normalize_tokens("  a\t b\nc ") == std::vector<std::string>{"a", "b", "c"});
  CHECK(normalize_tokens("...") == std::vector<std::string>{});
}

TEST_CASE("eval example validation") {
  EvalExample bad{"id", "", "q", {"a"}};
  CHECK_THROWS_AS(bad.validate(), Error);
  EvalExample bad2{"id", "ctx", "q", {}};
  CHECK_THROWS_AS(bad2.validate(), Error);
  CHECK_THROWS_AS(profile(init_random(toy_config(), 1), {}, toy_params()), Error);
}

TEST_CASE("profile with alpha forced to 1 chooses the empty scope") {
  ModelWeights w = init_random(toy_config(), 50);
  std::vector<EvalExample> dev{{"e1", "The tower clock rings at noon every day.",
                                "When does the clock ring?", {"noon"}}};
  ProfileParams params = toy_params(/*alpha=*/1.0);
  ProfileResult result = profile(w, dev, params);
  CHECK(result.chosen.empty());
  CHECK(result.dev_metric_steered == result.dev_metric_baseline);
  CHECK(result.eval_call_count == 1 + 2 + 2 * 2);
  CHECK(result.eval_call_count ==
        result.evals_baseline + result.evals_stage_a + result.evals_stage_b);
  CHECK(!result.truncated);
}

TEST_CASE("budget of exactly n_layers+1 skips stage B") {
  ModelWeights w = init_random(toy_config(), 51);
  std::vector<EvalExample> dev{{"e1", "A fox crossed the old stone bridge at dawn.",
                                "What crossed the bridge?", {"a fox"}}};
  ProfileParams params = toy_params();
  params.budget = 2 + 1;  // baseline + one per layer
  ProfileResult result = profile(w, dev, params);
  CHECK(result.stage_b_scores.empty());
  CHECK(result.eval_call_count == 3);
  CHECK(!result.truncated);
  // scope is either empty or the single best layer with all heads
  if (!result.chosen.empty()) {
    REQUIRE(result.chosen.size() == 1);
    CHECK(result.chosen[0].heads.size() == w.config.n_heads);
    CHECK(result.dev_metric_steered == result.stage_a_scores.at(result.chosen[0].layer));
  }
  CHECK(result.dev_metric_steered >= result.dev_metric_baseline);

  // budget below the stage-A minimum is rejected
  ProfileParams tiny = toy_params();
  tiny.budget = 2;
  CHECK_THROWS_AS(profile(w, dev, tiny), Error);
}

TEST_CASE("budget exhaustion mid stage B truncates with best-so-far") {
  ModelWeights w = init_random(toy_config(), 52);
  std::vector<EvalExample> dev{{"e1", "Seven lanterns hang above the harbor gate.",
                                "What hangs above the gate?", {"seven lanterns"}}};
  ProfileParams params = toy_params();
  params.budget = 1 + 2 + 1;  // room for exactly one stage-B evaluation
  ProfileResult result = profile(w, dev, params);
  CHECK(result.truncated);
  CHECK(result.eval_call_count == 4);
  CHECK(result.evals_stage_b == 1);
  CHECK(result.dev_metric_steered >= result.dev_metric_baseline);
  // chosen scope only references evaluated candidates
  for (const auto& e : result.chosen) {
    if (e.heads.size() == w.config.n_heads) {
      CHECK(result.stage_a_scores.count(e.layer) == 1);
    } else {
      for (uint32_t h : e.heads) CHECK(result.stage_b_scores.count({e.layer, h}) == 1);
    }
  }
}

TEST_CASE("profile is deterministic") {
  ModelWeights w = init_random(toy_config(), 53);
  std::vector<EvalExample> dev{{"e1", "Blue boats drift past the lighthouse before sunrise.",
                                "What drifts past the lighthouse?", {"blue boats"}}};
  ProfileParams params = toy_params();
  const std::string a = profile_result_to_json(profile(w, dev, params));
  const std::string b = profile_result_to_json(profile(w, dev, params));
  CHECK(a == b);
}

TEST_CASE("profiler recovers a planted head and matches the exhaustive optimum") {
  // Plant: pick a seed where exactly one single-head scope produces a
  // unique prediction, make that prediction the reference answer, and
  // verify the profiler finds a scope whose dev metric equals the best
  // over all 2^(L*H) scopes.
  const std::string context =
      "Miss Havering keeps the brass key under the third flowerpot on the left windowsill, "
      "next to the dried lavender bundle from last June.";
  const std::string question = "Where is the brass key kept?";

  ProfileParams params = toy_params(/*alpha=*/8.0, /*k=*/4);

  bool planted_found = false;
  for (uint64_t seed : {60, 61, 62, 63, 64, 65, 66, 67, 68, 69, 70, 71}) {
    ModelWeights w = init_random(toy_config(), seed);
    std::vector<EvalExample> probe{{"e1", context, question, {"placeholder"}}};
    ScopeEvaluator probe_eval(w, probe, params);

    // predictions per single-head scope and for the baseline
    auto predict = [&](const LayerHeadScope& scope) {
      // the evaluator memoizes F1, not text, so recompute text directly
      PlanBuildParams full = params.plan;
      SteeringPlan plan = build_plan(w, context, full).plan;
      SteeringPlan restricted = restrict_plan(plan, scope);
      const SteeringPlan* p = restricted.entries.empty() ? nullptr : &restricted;
      return answer(w, nullptr, p, params.serving_prefix, context, question, params.max_new)
          .text;
    };
    const std::string baseline_pred = predict(scope_of({}));
    std::vector<std::pair<std::pair<uint32_t, uint32_t>, std::string>> head_preds;
    for (uint32_t l = 0; l < 2; ++l) {
      for (uint32_t h = 0; h < 2; ++h) {
        head_preds.push_back({{l, h}, predict(scope_of({PlanEntry{l, {h}, {}}}))});
      }
    }

    for (const auto& [planted, reference] : head_preds) {
      if (reference == baseline_pred) continue;
      const double f_base = token_f1(baseline_pred, {reference});
      if (f_base >= 1.0) continue;
      bool others_below = true;
      for (const auto& [other, pred] : head_preds) {
        if (other == planted) continue;
        others_below = others_below && token_f1(pred, {reference}) < f_base;
      }
      if (!others_below) continue;

      // found a clean plant
      planted_found = true;
      std::vector<EvalExample> dev{{"e1", context, question, {reference}}};
      ProfileResult result = profile(w, dev, params);
      REQUIRE(result.chosen.size() == 1);
      CHECK(result.chosen[0].layer == planted.first);
      CHECK(result.chosen[0].heads == std::vector<uint32_t>{planted.second});
      CHECK(result.dev_metric_steered == 1.0);
      CHECK(result.dev_metric_steered >= result.dev_metric_baseline);
      CHECK(result.eval_call_count == 1 + 2 + 4);

      // exhaustive oracle over every scope
      ScopeEvaluator oracle(w, dev, params);
      double best = 0.0;
      for (const auto& scope : all_scopes(2, 2)) {
        best = std::max(best, oracle.evaluate(scope));
      }
      const double chosen_metric = oracle.evaluate(scope_of(result.chosen));
      CHECK(chosen_metric == best);
      break;
    }
    if (planted_found) break;
  }
  REQUIRE(planted_found);
}

TEST_CASE("profile result JSON carries the ledger") {
  ModelWeights w = init_random(toy_config(), 54);
  std::vector<EvalExample> dev{{"e1", "Granite steps lead down to the river path.",
                                "What leads to the river?", {"granite steps"}}};
  ProfileResult result = profile(w, dev, toy_params());
  auto j = nlohmann::json::parse(profile_result_to_json(result));
  CHECK(j.at("eval_call_count").get<uint64_t>() ==
        j.at("ledger").at("baseline").get<uint64_t>() +
            j.at("ledger").at("stage_a").get<uint64_t>() +
            j.at("ledger").at("stage_b").get<uint64_t>());
  CHECK(j.at("stage_a_scores").size() == 2);
  CHECK(j.contains("chosen"));
}
