// Command-line front end for the steer engine. Talks to the engine
// exclusively through the C API in steer/steer.h; dataset and report
// handling live here.
//
// Exit codes: 0 success, 2 usage, 3 data (missing/malformed inputs,
// store misses, corrupt files), 4 internal.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "steer/steer.h"

using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 4;

struct CliError {
  int exit_code;
  std::string message;
};

[[noreturn]] void die(int exit_code, const std::string& message) {
  throw CliError{exit_code, message};
}

int exit_code_for(steer_status status) {
  switch (status) {
    case STEER_OK: return 0;
    case STEER_EINVAL: return kExitUsage;
    case STEER_EIO:
    case STEER_EFORMAT:
    case STEER_ECORRUPT:
    case STEER_EMISS: return kExitData;
    default: return kExitInternal;
  }
}

void check(steer_status status, const std::string& what) {
  if (status != STEER_OK) {
    die(exit_code_for(status), what + ": " + steer_last_error());
  }
}

// RAII over the C handles.
using ModelPtr = std::unique_ptr<steer_model, decltype(&steer_model_free)>;
using PlanPtr = std::unique_ptr<steer_plan, decltype(&steer_plan_free)>;
using CachePtr = std::unique_ptr<steer_cache, decltype(&steer_cache_free)>;
using StorePtr = std::unique_ptr<steer_store, decltype(&steer_store_close)>;

std::string take_string(char* s) {
  std::string out = s != nullptr ? s : "";
  steer_string_free(s);
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) die(kExitData, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void emit_json(const json& j, const std::string& out_path) {
  // Predictions from a byte-level model are arbitrary bytes; replace
  // invalid UTF-8 rather than refuse to report.
  const std::string text = j.dump(2, ' ', false, json::error_handler_t::replace);
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
    if (!f) die(kExitData, "cannot write " + out_path);
    f << text << "\n";
  }
}

// Flat key=value run configuration; command-line flags override it.
struct RunConfig {
  std::string model;
  std::string store;
  std::string serving_prefix = "Read the passage and answer the question concisely:";
  std::string prefix1 = "Summarize the key facts of the following passage:";
  std::string prefix2 = "List the entities and relationships in the following passage:";
  uint32_t k = 16;
  double alpha = 2.0;
  std::string mode = "both";
  bool renormalize = true;
  std::string scale_axis = "column";
  std::string aggregation = "sum";
  uint32_t max_new = 32;
  uint64_t seed = 42;
};

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  die(kExitUsage, "config: bad boolean for " + key + ": " + v);
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream f(path);
  if (!f) die(kExitData, "cannot open config " + path);
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      die(kExitUsage, "config " + path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = unquote(trim(stripped.substr(eq + 1)));
    try {
      if (key == "model") cfg.model = value;
      else if (key == "store") cfg.store = value;
      else if (key == "serving_prefix") cfg.serving_prefix = value;
      else if (key == "prefix1") cfg.prefix1 = value;
      else if (key == "prefix2") cfg.prefix2 = value;
      else if (key == "k") cfg.k = static_cast<uint32_t>(std::stoul(value));
      else if (key == "alpha") cfg.alpha = std::stod(value);
      else if (key == "mode") cfg.mode = value;
      else if (key == "renormalize") cfg.renormalize = parse_bool(value, key);
      else if (key == "scale_axis") cfg.scale_axis = value;
      else if (key == "aggregation") cfg.aggregation = value;
      else if (key == "max_new") cfg.max_new = static_cast<uint32_t>(std::stoul(value));
      else if (key == "seed") cfg.seed = std::stoull(value);
      else die(kExitUsage, "config " + path + ": unknown key \"" + key + "\"");
    } catch (const CliError&) {
      throw;
    } catch (const std::exception&) {
      die(kExitUsage, "config " + path + ": bad value for " + key + ": " + value);
    }
  }
  return cfg;
}

steer_plan_params plan_params(const RunConfig& cfg) {
  steer_plan_params p{};
  p.prefix_1 = cfg.prefix1.c_str();
  p.prefix_2 = cfg.prefix2.c_str();
  p.k = cfg.k;
  p.alpha = cfg.alpha;
  p.mode = cfg.mode.c_str();
  p.renormalize = cfg.renormalize ? 1 : 0;
  p.scale_axis = cfg.scale_axis.c_str();
  p.aggregation = cfg.aggregation.c_str();
  return p;
}

ModelPtr load_model(const RunConfig& cfg) {
  if (cfg.model.empty()) die(kExitUsage, "no model path given (--model or config)");
  steer_model* m = nullptr;
  check(steer_model_load(cfg.model.c_str(), &m), "loading model " + cfg.model);
  return ModelPtr(m, steer_model_free);
}

StorePtr open_store(const RunConfig& cfg) {
  if (cfg.store.empty()) die(kExitUsage, "no store path given (--store or config)");
  steer_store* s = nullptr;
  check(steer_store_open(cfg.store.c_str(), &s), "opening store " + cfg.store);
  return StorePtr(s, steer_store_close);
}

struct DatasetExample {
  std::string id;
  std::string context;
  std::string question;
  std::vector<std::string> answers;
};

std::vector<DatasetExample> load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) die(kExitData, "cannot open dataset " + path);
  std::vector<DatasetExample> examples;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      die(kExitData, path + ":" + std::to_string(line_no) + ": not a JSON object");
    }
    DatasetExample ex;
    try {
      ex.id = j.at("id").get<std::string>();
      ex.context = j.at("context").get<std::string>();
      ex.question = j.at("question").get<std::string>();
      ex.answers = j.at("answers").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      die(kExitData, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (ex.answers.empty()) {
      die(kExitData, path + ":" + std::to_string(line_no) + ": answers must be non-empty");
    }
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) die(kExitData, path + ": dataset is empty");
  return examples;
}

// SplitMix64 again (the CLI only sees the C header), for reproducible
// dataset sampling.
uint64_t splitmix_next(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void sample_examples(std::vector<DatasetExample>& examples, uint32_t sample, uint64_t seed) {
  if (sample == 0 || sample >= examples.size()) return;
  uint64_t state = seed;
  for (size_t i = examples.size() - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(splitmix_next(state) % (i + 1));
    std::swap(examples[i], examples[j]);
  }
  examples.resize(sample);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t mid = v.size() / 2;
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid - 1] + v[mid]);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

json stats_to_json(const steer_answer_stats& st, bool cache_hit) {
  return json{{"prefill_tokens_computed", st.prefill_tokens},
              {"decode_tokens", st.decode_tokens},
              {"wall_ms_prefill", st.wall_ms_prefill},
              {"wall_ms_decode", st.wall_ms_decode},
              {"fma_prefill", st.fma_prefill},
              {"fma_decode", st.fma_decode},
              {"cache_hit", cache_hit}};
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------
// init-model

int cmd_init_model(const RunConfig& cfg, const std::string& out_path, uint32_t layers,
                   uint32_t heads, uint32_t d_model, uint32_t d_ff, uint32_t max_positions,
                   const std::string& report_path) {
  steer_model_config mc;
  steer_model_config_default(&mc);
  if (layers != 0) mc.n_layers = layers;
  if (heads != 0) mc.n_heads = heads;
  if (d_model != 0) mc.d_model = d_model;
  if (d_ff != 0) mc.d_ff = d_ff;
  if (max_positions != 0) mc.max_positions = max_positions;

  steer_model* raw = nullptr;
  check(steer_model_init_random(&mc, cfg.seed, &raw), "initializing model");
  ModelPtr model(raw, steer_model_free);
  check(steer_model_save(model.get(), out_path.c_str()), "saving model to " + out_path);

  json report{{"path", out_path},
              {"seed", cfg.seed},
              {"content_hash", hex64(steer_model_content_hash(model.get()))},
              {"config",
               {{"n_layers", mc.n_layers},
                {"n_heads", mc.n_heads},
                {"d_model", mc.d_model},
                {"d_ff", mc.d_ff},
                {"vocab_size", mc.vocab_size},
                {"max_positions", mc.max_positions}}}};
  emit_json(report, report_path);
  return 0;
}

// ---------------------------------------------------------------------
// build

int cmd_build(const RunConfig& cfg, const std::string& context_path,
              const std::string& plan_out, const std::string& report_path) {
  const std::string context = read_text_file(context_path);
  if (context.empty()) die(kExitData, "context file " + context_path + " is empty");
  ModelPtr model = load_model(cfg);
  StorePtr store = open_store(cfg);

  steer_plan_params params = plan_params(cfg);
  steer_plan* raw_plan = nullptr;
  char* warnings_raw = nullptr;
  check(steer_plan_build(model.get(), context.c_str(), &params, &raw_plan, &warnings_raw),
        "building plan");
  PlanPtr plan(raw_plan, steer_plan_free);
  const json warnings = json::parse(take_string(warnings_raw));

  if (!plan_out.empty()) {
    check(steer_plan_save(plan.get(), plan_out.c_str()), "saving plan to " + plan_out);
  }

  char key_unsteered[STEER_KEY_HEX_LEN + 1];
  check(steer_compute_key_hex(model.get(), cfg.serving_prefix.c_str(), context.c_str(), nullptr,
                              key_unsteered),
        "computing unsteered key");
  char key_steered[STEER_KEY_HEX_LEN + 1];
  check(steer_compute_key_hex(model.get(), cfg.serving_prefix.c_str(), context.c_str(),
                              plan.get(), key_steered),
        "computing steered key");

  // Unsteered serving cache: skip the prefill when the store already has
  // it for this exact model/prefix/context.
  int have_unsteered = 0;
  check(steer_store_contains(store.get(), key_unsteered, &have_unsteered), "probing store");
  if (have_unsteered == 0) {
    steer_cache* raw = nullptr;
    check(steer_cache_build(model.get(), cfg.serving_prefix.c_str(), context.c_str(), nullptr,
                            &raw),
          "prefilling context");
    CachePtr cache(raw, steer_cache_free);
    check(steer_store_put(store.get(), key_unsteered, cache.get(), nullptr), "storing cache");
  }

  int have_steered = 0;
  check(steer_store_contains(store.get(), key_steered, &have_steered), "probing store");
  if (have_steered == 0) {
    steer_cache* raw = nullptr;
    check(steer_cache_build(model.get(), cfg.serving_prefix.c_str(), context.c_str(), plan.get(),
                            &raw),
          "prefilling steered context");
    CachePtr cache(raw, steer_cache_free);
    check(steer_store_put(store.get(), key_steered, cache.get(), plan.get()),
          "storing steered cache");
  }

  char* plan_json_raw = nullptr;
  check(steer_plan_to_json(plan.get(), &plan_json_raw), "serializing plan");
  const json plan_json = json::parse(take_string(plan_json_raw));
  json selected = json::array();
  for (const auto& entry : plan_json.at("entries")) {
    selected.push_back({{"layer", entry.at("layer")},
                        {"n_heads", entry.at("heads").size()},
                        {"n_tokens", entry.at("tokens").size()}});
  }

  json report{{"plan_hash", hex64(steer_plan_hash(plan.get()))},
              {"plan_file", plan_out},
              {"alpha", cfg.alpha},
              {"k", cfg.k},
              {"mode", cfg.mode},
              {"unsteered", {{"key", key_unsteered}, {"cache_hit", have_unsteered != 0}}},
              {"steered", {{"key", key_steered}, {"cache_hit", have_steered != 0}}},
              {"selected_per_layer", selected},
              {"warnings", warnings}};
  emit_json(report, report_path);
  return 0;
}

// ---------------------------------------------------------------------
// answer

int cmd_answer(const RunConfig& cfg, const std::string& context_path, const std::string& key_hex,
               const std::string& question, bool no_cache, const std::string& plan_path,
               const std::string& report_path) {
  if (question.empty()) die(kExitUsage, "answer: question must be non-empty");
  ModelPtr model = load_model(cfg);

  PlanPtr plan(nullptr, steer_plan_free);
  if (!plan_path.empty()) {
    steer_plan* raw = nullptr;
    check(steer_plan_load(plan_path.c_str(), &raw), "loading plan " + plan_path);
    plan.reset(raw);
  }

  std::string context;
  if (!context_path.empty()) context = read_text_file(context_path);

  CachePtr cache(nullptr, steer_cache_free);
  std::string used_key;
  if (!no_cache) {
    StorePtr store = open_store(cfg);
    char computed[STEER_KEY_HEX_LEN + 1];
    if (!key_hex.empty()) {
      used_key = key_hex;
    } else {
      if (context.empty()) {
        die(kExitUsage, "answer: need --key or --context to locate the cache");
      }
      check(steer_compute_key_hex(model.get(), cfg.serving_prefix.c_str(), context.c_str(),
                                  plan.get(), computed),
            "computing cache key");
      used_key = computed;
    }
    steer_cache* raw_cache = nullptr;
    steer_plan* raw_plan = nullptr;
    const steer_status status =
        steer_store_get(store.get(), used_key.c_str(), &raw_cache, &raw_plan);
    if (status == STEER_EMISS) {
      die(kExitData, "answer: no cache for key " + used_key + " (use --no-cache to prefill)");
    }
    check(status, "reading cache " + used_key);
    cache.reset(raw_cache);
    if (plan == nullptr && raw_plan != nullptr) {
      plan.reset(raw_plan);
    } else {
      steer_plan_free(raw_plan);
    }
  } else if (context.empty()) {
    die(kExitUsage, "answer: --no-cache requires --context");
  }

  steer_answer_stats stats{};
  char* text_raw = nullptr;
  check(steer_answer(model.get(), cache.get(), plan.get(), cfg.serving_prefix.c_str(),
                     context.empty() ? nullptr : context.c_str(), question.c_str(), cfg.max_new,
                     &stats, &text_raw),
        "answering");
  json report{{"answer", take_string(text_raw)},
              {"cache_key", used_key},
              {"bench", stats_to_json(stats, cache != nullptr)}};
  emit_json(report, report_path);
  return 0;
}

// ---------------------------------------------------------------------
// profile

int cmd_profile(const RunConfig& cfg, const std::string& dev_path, uint32_t budget,
                uint32_t top_m, uint32_t sample, const std::string& report_path) {
  ModelPtr model = load_model(cfg);
  std::vector<DatasetExample> dev = load_dataset(dev_path);
  sample_examples(dev, sample, cfg.seed);

  std::vector<steer_eval_example> c_examples;
  std::vector<std::vector<const char*>> answer_ptrs(dev.size());
  for (size_t i = 0; i < dev.size(); ++i) {
    for (const auto& a : dev[i].answers) answer_ptrs[i].push_back(a.c_str());
    c_examples.push_back({dev[i].id.c_str(), dev[i].context.c_str(), dev[i].question.c_str(),
                          answer_ptrs[i].data(), answer_ptrs[i].size()});
  }

  steer_profile_params params{};
  params.plan = plan_params(cfg);
  params.serving_prefix = cfg.serving_prefix.c_str();
  params.budget = budget;
  params.top_m = top_m;
  params.max_new = cfg.max_new;

  char* result_raw = nullptr;
  check(steer_profile_run(model.get(), c_examples.data(), c_examples.size(), &params,
                          &result_raw),
        "profiling");
  emit_json(json::parse(take_string(result_raw)), report_path);
  return 0;
}

// ---------------------------------------------------------------------
// bench

int cmd_bench(const RunConfig& cfg, const std::string& dataset_path, uint32_t reps,
              uint32_t sample, const std::string& report_path) {
  if (reps == 0) die(kExitUsage, "bench: --reps must be >= 1");
  ModelPtr model = load_model(cfg);
  StorePtr store = open_store(cfg);
  std::vector<DatasetExample> examples = load_dataset(dataset_path);
  sample_examples(examples, sample, cfg.seed);

  json requests = json::array();
  std::map<std::string, std::vector<double>> prefill_ms, decode_ms, total_ms;

  auto record = [&](const std::string& example_id, const std::string& config_name, uint32_t rep,
                    const steer_answer_stats& st, bool cache_hit) {
    json row = stats_to_json(st, cache_hit);
    row["example_id"] = example_id;
    row["configuration"] = config_name;
    row["rep"] = rep;
    requests.push_back(row);
    prefill_ms[config_name].push_back(st.wall_ms_prefill);
    decode_ms[config_name].push_back(st.wall_ms_decode);
    total_ms[config_name].push_back(st.wall_ms_prefill + st.wall_ms_decode);
  };

  for (const auto& ex : examples) {
    // Preparation (not timed as serving work): the plan, the steered
    // entry, and the unsteered entry for this context.
    steer_plan_params params = plan_params(cfg);
    steer_plan* raw_plan = nullptr;
    check(steer_plan_build(model.get(), ex.context.c_str(), &params, &raw_plan, nullptr),
          "building plan for " + ex.id);
    PlanPtr plan(raw_plan, steer_plan_free);

    char key_plain[STEER_KEY_HEX_LEN + 1];
    char key_steered[STEER_KEY_HEX_LEN + 1];
    check(steer_compute_key_hex(model.get(), cfg.serving_prefix.c_str(), ex.context.c_str(),
                                nullptr, key_plain),
          "computing key");
    check(steer_compute_key_hex(model.get(), cfg.serving_prefix.c_str(), ex.context.c_str(),
                                plan.get(), key_steered),
          "computing key");

    auto ensure_entry = [&](const char* key, const steer_plan* entry_plan) {
      int present = 0;
      check(steer_store_contains(store.get(), key, &present), "probing store");
      if (present == 0) {
        steer_cache* raw = nullptr;
        check(steer_cache_build(model.get(), cfg.serving_prefix.c_str(), ex.context.c_str(),
                                entry_plan, &raw),
              "prefilling " + ex.id);
        CachePtr cache(raw, steer_cache_free);
        check(steer_store_put(store.get(), key, cache.get(), entry_plan), "storing " + ex.id);
      }
    };
    ensure_entry(key_plain, nullptr);
    ensure_entry(key_steered, plan.get());

    steer_cache* raw_plain = nullptr;
    check(steer_store_get(store.get(), key_plain, &raw_plain, nullptr), "reading cache");
    CachePtr cache_plain(raw_plain, steer_cache_free);
    steer_cache* raw_steered = nullptr;
    check(steer_store_get(store.get(), key_steered, &raw_steered, nullptr), "reading cache");
    CachePtr cache_steered(raw_steered, steer_cache_free);

    for (uint32_t rep = 0; rep < reps; ++rep) {
      steer_answer_stats st{};
      char* text = nullptr;
      check(steer_answer(model.get(), nullptr, nullptr, cfg.serving_prefix.c_str(),
                         ex.context.c_str(), ex.question.c_str(), cfg.max_new, &st, &text),
            "no-cache answer");
      steer_string_free(text);
      record(ex.id, "no_cache", rep, st, false);

      check(steer_answer(model.get(), cache_plain.get(), nullptr, cfg.serving_prefix.c_str(),
                         nullptr, ex.question.c_str(), cfg.max_new, &st, &text),
            "cached answer");
      steer_string_free(text);
      record(ex.id, "cached_unsteered", rep, st, true);

      check(steer_answer(model.get(), cache_steered.get(), plan.get(),
                         cfg.serving_prefix.c_str(), nullptr, ex.question.c_str(), cfg.max_new,
                         &st, &text),
            "steered answer");
      steer_string_free(text);
      record(ex.id, "cached_steered", rep, st, true);
    }
  }

  json aggregates;
  for (const auto& [name, totals] : total_ms) {
    aggregates[name] = {{"mean_total_ms", mean(totals)},
                        {"median_total_ms", median(totals)},
                        {"min_total_ms", *std::min_element(totals.begin(), totals.end())},
                        {"mean_prefill_ms", mean(prefill_ms[name])},
                        {"median_prefill_ms", median(prefill_ms[name])},
                        {"min_prefill_ms",
                         *std::min_element(prefill_ms[name].begin(), prefill_ms[name].end())},
                        {"mean_decode_ms", mean(decode_ms[name])},
                        {"median_decode_ms", median(decode_ms[name])}};
  }

  json report{{"reps", reps},
              {"n_examples", examples.size()},
              {"max_new", cfg.max_new},
              {"requests", requests},
              {"aggregates", aggregates}};
  emit_json(report, report_path);
  return 0;
}

// ---------------------------------------------------------------------
// eval

int cmd_eval(const std::string& predictions_path, const std::string& dataset_path,
             const std::string& report_path) {
  std::vector<DatasetExample> dataset = load_dataset(dataset_path);

  std::ifstream f(predictions_path);
  if (!f) die(kExitData, "cannot open predictions " + predictions_path);
  std::map<std::string, std::string> predictions;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      die(kExitData, predictions_path + ":" + std::to_string(line_no) + ": not a JSON object");
    }
    try {
      predictions[j.at("id").get<std::string>()] = j.at("prediction").get<std::string>();
    } catch (const json::exception& e) {
      die(kExitData, predictions_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }

  json per_example = json::array();
  std::vector<std::string> missing;
  std::set<std::string> dataset_ids;
  double sum = 0.0;
  size_t count = 0;
  for (const auto& ex : dataset) {
    dataset_ids.insert(ex.id);
    auto it = predictions.find(ex.id);
    if (it == predictions.end()) {
      missing.push_back(ex.id);
      continue;
    }
    std::vector<const char*> refs;
    for (const auto& a : ex.answers) refs.push_back(a.c_str());
    const double f1 = steer_token_f1(it->second.c_str(), refs.data(), refs.size());
    if (f1 < 0.0) die(kExitInternal, std::string("token_f1: ") + steer_last_error());
    per_example.push_back({{"id", ex.id}, {"f1", f1}});
    sum += f1;
    ++count;
  }
  std::vector<std::string> unmatched;
  for (const auto& [id, _] : predictions) {
    if (dataset_ids.find(id) == dataset_ids.end()) unmatched.push_back(id);
  }

  json report{{"mean_f1", count > 0 ? sum / static_cast<double>(count) : 0.0},
              {"count", count},
              {"per_example", per_example},
              {"missing_predictions", missing},
              {"unmatched_predictions", unmatched}};
  emit_json(report, report_path);
  if (!missing.empty() || !unmatched.empty()) {
    std::cerr << "eval: " << missing.size() << " dataset ids lack predictions, "
              << unmatched.size() << " predictions match no dataset id\n";
    return kExitData;
  }
  return 0;
}

std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc - 1; ++i) {
    if (std::string(argv[i]) == "--config") return argv[i + 1];
  }
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  try {
    RunConfig cfg = load_config(find_config_arg(argc, argv));

    CLI::App app{"steer: transformer inference with prefix caching and attention steering"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "key=value run configuration file");

    // Shared steering/run flags; registered per subcommand so they
    // override the config file.
    auto add_run_flags = [&](CLI::App* cmd, bool with_store) {
      cmd->add_option("--config", config_path, "key=value run configuration file");
      cmd->add_option("--model", cfg.model, "weight file");
      if (with_store) cmd->add_option("--store", cfg.store, "cache store directory");
      cmd->add_option("--serving-prefix", cfg.serving_prefix, "serving instruction text");
      cmd->add_option("--prefix1", cfg.prefix1, "first re-reading prefix");
      cmd->add_option("--prefix2", cfg.prefix2, "second re-reading prefix");
      cmd->add_option("--k", cfg.k, "top-k per layer");
      cmd->add_option("--alpha", cfg.alpha, "attention scaling factor");
      cmd->add_option("--mode", cfg.mode, "prefill_only | decode_only | both");
      cmd->add_option("--renormalize", cfg.renormalize, "renormalize steered rows");
      cmd->add_option("--scale-axis", cfg.scale_axis, "column | row");
      cmd->add_option("--aggregation", cfg.aggregation, "sum | union");
      cmd->add_option("--max-new", cfg.max_new, "max generated tokens");
      cmd->add_option("--seed", cfg.seed, "seed for init/sampling");
    };

    // init-model
    auto* init = app.add_subcommand("init-model", "create a random weight file");
    std::string out_path, report_path;
    uint32_t layers = 0, heads = 0, d_model = 0, d_ff = 0, max_positions = 0;
    init->add_option("--out", out_path, "output weight file")->required();
    init->add_option("--layers", layers, "decoder layers");
    init->add_option("--heads", heads, "attention heads");
    init->add_option("--d-model", d_model, "hidden dimension");
    init->add_option("--d-ff", d_ff, "feed-forward dimension");
    init->add_option("--max-positions", max_positions, "maximum sequence length");
    init->add_option("--seed", cfg.seed, "initialization seed");
    init->add_option("--config", config_path, "key=value run configuration file");
    init->add_option("--json-out", report_path, "write the report here instead of stdout");

    // build
    auto* build = app.add_subcommand("build", "build plan + steered cache for a context");
    std::string context_path, plan_out;
    build->add_option("--context", context_path, "context text file")->required();
    build->add_option("--plan-out", plan_out, "also save the plan JSON here");
    build->add_option("--out", report_path, "write the report here instead of stdout");
    add_run_flags(build, true);

    // answer
    auto* answer_cmd = app.add_subcommand("answer", "answer a question over a cached context");
    std::string question, key_hex, plan_path;
    bool no_cache = false;
    answer_cmd->add_option("--question", question, "question text")->required();
    answer_cmd->add_option("--context", context_path, "context text file");
    answer_cmd->add_option("--key", key_hex, "cache key from build");
    answer_cmd->add_option("--plan", plan_path, "plan JSON file");
    answer_cmd->add_flag("--no-cache", no_cache, "full prefill instead of the store");
    answer_cmd->add_option("--out", report_path, "write the report here instead of stdout");
    add_run_flags(answer_cmd, true);

    // profile
    auto* profile_cmd = app.add_subcommand("profile", "coarse-to-fine layer/head search");
    std::string dev_path;
    uint32_t budget = 0, top_m = 3, sample = 0;
    profile_cmd->add_option("--dev", dev_path, "dev set JSONL")->required();
    profile_cmd->add_option("--budget", budget, "max metric evaluations");
    profile_cmd->add_option("--top-m", top_m, "layers kept for stage B");
    profile_cmd->add_option("--sample", sample, "evaluate a random sample of N examples");
    profile_cmd->add_option("--out", report_path, "write the report here instead of stdout");
    add_run_flags(profile_cmd, false);

    // bench
    auto* bench = app.add_subcommand("bench", "measure request delay per configuration");
    std::string dataset_path;
    uint32_t reps = 5;
    bench->add_option("--dataset", dataset_path, "dataset JSONL")->required();
    bench->add_option("--reps", reps, "repetitions per configuration");
    bench->add_option("--sample", sample, "benchmark a random sample of N examples");
    bench->add_option("--out", report_path, "write the report here instead of stdout");
    add_run_flags(bench, true);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "aggregate token F1 of a predictions file");
    std::string predictions_path;
    eval_cmd->add_option("--predictions", predictions_path, "predictions JSONL")->required();
    eval_cmd->add_option("--dataset", dataset_path, "dataset JSONL")->required();
    eval_cmd->add_option("--config", config_path, "key=value run configuration file");
    eval_cmd->add_option("--out", report_path, "write the report here instead of stdout");

    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return kExitUsage;
    }

    if (init->parsed()) {
      return cmd_init_model(cfg, out_path, layers, heads, d_model, d_ff, max_positions,
                            report_path);
    }
    if (build->parsed()) return cmd_build(cfg, context_path, plan_out, report_path);
    if (answer_cmd->parsed()) {
      return cmd_answer(cfg, context_path, key_hex, question, no_cache, plan_path, report_path);
    }
    if (profile_cmd->parsed()) return cmd_profile(cfg, dev_path, budget, top_m, sample, report_path);
    if (bench->parsed()) return cmd_bench(cfg, dataset_path, reps, sample, report_path);
    if (eval_cmd->parsed()) return cmd_eval(predictions_path, dataset_path, report_path);
    return kExitUsage;
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
