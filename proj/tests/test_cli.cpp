// Drives the installed `steer` binary end to end: exit codes, JSON
// report shapes against the shipped schemas, config/flag layering, and
// the cached-vs-full answer contract.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
};

std::string cli_path() {
  const char* path = std::getenv("STEER_CLI");
  REQUIRE_MESSAGE(path != nullptr, "STEER_CLI must point at the built binary");
  return path;
}

std::string schema_dir() {
  const char* path = std::getenv("STEER_SCHEMAS");
  REQUIRE_MESSAGE(path != nullptr, "STEER_SCHEMAS must point at the schemas directory");
  return path;
}

CliResult run_cli(const std::string& args) {
  const std::string command = cli_path() + " " + args + " 2>/dev/null";
  FILE* pipe = ::popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliResult result;
  char buffer[4096];
  size_t n;
  while ((n = ::fread(buffer, 1, sizeof(buffer), pipe)) > 0) result.out.append(buffer, n);
  const int status = ::pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

void check_schema(const json& value, const std::string& schema_name) {
  const json schema = json::parse(test_util::read_text(schema_dir() + "/" + schema_name));
  const auto errors = test_util::schema_errors(value, schema);
  for (const auto& e : errors) MESSAGE(schema_name, ": ", e);
  CHECK(errors.empty());
}

// Shared fixture: tiny model + context + store under one temp root.
struct Workspace {
  test_util::TempDir dir;
  std::string model, store, context_file, context;

  explicit Workspace(const std::string& context_text) {
    model = dir.file("model.bin").string();
    store = dir.file("store").string();
    context_file = dir.file("ctx.txt").string();
    context = context_text;
    test_util::write_text(context_file, context);
    CliResult init = run_cli("init-model --out " + model +
                             " --layers 2 --heads 2 --d-model 16 --d-ff 32 --seed 5");
    REQUIRE(init.exit_code == 0);
  }

  std::string base_args() const { return " --model " + model + " --store " + store; }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").exit_code == 2);
  CHECK(run_cli("frobnicate").exit_code == 2);
  CHECK(run_cli("init-model").exit_code == 2);  // missing --out
  CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("init-model report: schema, golden hash, seed sensitivity") {
  test_util::TempDir dir;
  CliResult a = run_cli("init-model --out " + dir.file("a.bin").string() + " --seed 42");
  REQUIRE(a.exit_code == 0);
  const json ja = json::parse(a.out);
  check_schema(ja, "init_report.schema.json");
  CHECK(ja.at("content_hash") == "4f7ad0dbd073e9ed");  // frozen reference value

  CliResult b = run_cli("init-model --out " + dir.file("b.bin").string() + " --seed 43");
  REQUIRE(b.exit_code == 0);
  CHECK(json::parse(b.out).at("content_hash") != ja.at("content_hash"));

  CHECK(run_cli("init-model --out /nonexistent-dir/x.bin --seed 1").exit_code == 3);
}

TEST_CASE("build then answer: keys, hits, parity between cached and no-cache") {
  Workspace ws("Maple Street floods every spring; the bakery moves its ovens upstairs.");
  const std::string plan_file = ws.dir.file("plan.json").string();

  CliResult build = run_cli("build" + ws.base_args() + " --context " + ws.context_file +
                            " --plan-out " + plan_file + " --k 6 --alpha 2.0");
  REQUIRE(build.exit_code == 0);
  const json jb = json::parse(build.out);
  check_schema(jb, "build_report.schema.json");
  CHECK(jb.at("unsteered").at("cache_hit") == false);
  CHECK(jb.at("steered").at("cache_hit") == false);
  const std::string steered_key = jb.at("steered").at("key").get<std::string>();

  // plan file round-trips byte-identically through the CLI's save path
  const json plan_json = json::parse(test_util::read_text(plan_file));
  check_schema(plan_json, "plan.schema.json");

  // second run: deterministic keys, prefills skipped
  CliResult again = run_cli("build" + ws.base_args() + " --context " + ws.context_file +
                            " --k 6 --alpha 2.0");
  REQUIRE(again.exit_code == 0);
  const json ja = json::parse(again.out);
  CHECK(ja.at("steered").at("key") == steered_key);
  CHECK(ja.at("unsteered").at("cache_hit") == true);
  CHECK(ja.at("steered").at("cache_hit") == true);

  // cached answer by key; answering must not touch the store
  const std::string manifest_before = test_util::read_text(ws.store + "/manifest.json");
  CliResult cached = run_cli("answer" + ws.base_args() + " --key " + steered_key +
                             " --question \"What moves upstairs?\" --max-new 12");
  REQUIRE(cached.exit_code == 0);
  CHECK(test_util::read_text(ws.store + "/manifest.json") == manifest_before);
  const json jc = json::parse(cached.out);
  check_schema(jc, "answer_report.schema.json");
  CHECK(jc.at("bench").at("cache_hit") == true);
  CHECK(jc.at("bench").at("prefill_tokens_computed") ==
        std::string("What moves upstairs?").size());

  // full prefill with the same plan: identical text, full token count
  CliResult full = run_cli("answer" + ws.base_args() + " --context " + ws.context_file +
                           " --plan " + plan_file +
                           " --no-cache --question \"What moves upstairs?\" --max-new 12");
  REQUIRE(full.exit_code == 0);
  const json jf = json::parse(full.out);
  CHECK(jf.at("answer") == jc.at("answer"));
  CHECK(jf.at("bench").at("cache_hit") == false);
  const size_t serving_prefix_len =
      std::string("Read the passage and answer the question concisely:").size();
  CHECK(jf.at("bench").at("prefill_tokens_computed") ==
        1 + serving_prefix_len + ws.context.size() + std::string("What moves upstairs?").size());

  // cache lookup by context resolves the unsteered entry
  CliResult by_ctx = run_cli("answer" + ws.base_args() + " --context " + ws.context_file +
                             " --question \"What moves upstairs?\" --max-new 4");
  CHECK(by_ctx.exit_code == 0);
}

TEST_CASE("alpha 1 build answers exactly like the unsteered baseline") {
  Workspace ws("Two swans nest by the weir; the miller feeds them at dawn.");
  CliResult build = run_cli("build" + ws.base_args() + " --context " + ws.context_file +
                            " --k 6 --alpha 1.0");
  REQUIRE(build.exit_code == 0);
  const json jb = json::parse(build.out);
  CHECK(jb.at("alpha") == 1.0);
  const std::string steered_key = jb.at("steered").at("key").get<std::string>();
  const std::string plain_key = jb.at("unsteered").at("key").get<std::string>();
  CHECK(steered_key != plain_key);  // the plan still keys the entry

  const std::string q = " --question \"Who feeds the swans?\" --max-new 12";
  CliResult steered = run_cli("answer" + ws.base_args() + " --key " + steered_key + q);
  CliResult plain = run_cli("answer" + ws.base_args() + " --key " + plain_key + q);
  REQUIRE(steered.exit_code == 0);
  REQUIRE(plain.exit_code == 0);
  CHECK(json::parse(steered.out).at("answer") == json::parse(plain.out).at("answer"));
}

TEST_CASE("answer without a cache is a data error; empty question a usage error") {
  Workspace ws("A short context.");
  CliResult miss = run_cli("answer" + ws.base_args() + " --context " + ws.context_file +
                           " --question \"why?\"");
  CHECK(miss.exit_code == 3);
  CliResult empty_q =
      run_cli("answer" + ws.base_args() + " --context " + ws.context_file + " --question \"\"");
  CHECK(empty_q.exit_code == 2);
}

TEST_CASE("config file layering: config values apply, flags win, unknown keys rejected") {
  Workspace ws("The folk band rehearses in the chapel on Mondays.");
  const std::string config_file = ws.dir.file("run.cfg").string();
  test_util::write_text(config_file, "model = " + ws.model +
                                         "\n"
                                         "store = " +
                                         ws.store +
                                         "\n"
                                         "k = 3\n"
                                         "alpha = 4.0\n"
                                         "# comment line\n"
                                         "mode = \"prefill_only\"\n");

  CliResult build =
      run_cli("build --config " + config_file + " --context " + ws.context_file + " --alpha 8.0");
  REQUIRE(build.exit_code == 0);
  const json jb = json::parse(build.out);
  CHECK(jb.at("k") == 3);          // from config
  CHECK(jb.at("alpha") == 8.0);    // flag wins
  CHECK(jb.at("mode") == "prefill_only");

  test_util::write_text(config_file, "mystery_knob = 7\n");
  CHECK(run_cli("build --config " + config_file + " --context " + ws.context_file).exit_code ==
        2);
}

TEST_CASE("eval: analytic mean, schema, and id mismatch handling") {
  test_util::TempDir dir;
  const std::string dataset = dir.file("data.jsonl").string();
  test_util::write_text(
      dataset,
      R"({"id":"a","context":"c","question":"q","answers":["the cat sat"]})"
      "\n"
      R"({"id":"b","context":"c","question":"q","answers":["x y"]})"
      "\n"
      R"({"id":"c","context":"c","question":"q","answers":["b c d"]})"
      "\n");
  const std::string predictions = dir.file("preds.jsonl").string();
  test_util::write_text(predictions,
                        R"({"id":"a","prediction":"the cat sat"})"
                        "\n"
                        R"({"id":"b","prediction":"zz"})"
                        "\n"
                        R"({"id":"c","prediction":"a b c"})"
                        "\n");

  CliResult ok = run_cli("eval --predictions " + predictions + " --dataset " + dataset);
  REQUIRE(ok.exit_code == 0);
  const json je = json::parse(ok.out);
  check_schema(je, "eval_report.schema.json");
  // per-example F1 {1, 0, 2/3} -> mean 5/9
  CHECK(je.at("mean_f1").get<double>() == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
  CHECK(je.at("count") == 3);

  // all-empty predictions score zero
  test_util::write_text(predictions, R"({"id":"a","prediction":""})"
                                     "\n"
                                     R"({"id":"b","prediction":""})"
                                     "\n"
                                     R"({"id":"c","prediction":""})"
                                     "\n");
  CliResult zeros = run_cli("eval --predictions " + predictions + " --dataset " + dataset);
  REQUIRE(zeros.exit_code == 0);
  CHECK(json::parse(zeros.out).at("mean_f1") == 0.0);

  test_util::write_text(predictions, R"({"id":"a","prediction":"the cat sat"})"
                                     "\n"
                                     R"({"id":"zz","prediction":"stray"})"
                                     "\n");
  CliResult mismatch = run_cli("eval --predictions " + predictions + " --dataset " + dataset);
  CHECK(mismatch.exit_code == 3);
  const json jm = json::parse(mismatch.out);
  CHECK(jm.at("missing_predictions").size() == 2);
  CHECK(jm.at("unmatched_predictions") == json::array({"zz"}));

  CHECK(run_cli("eval --predictions nope.jsonl --dataset " + dataset).exit_code == 3);
}

TEST_CASE("bench: schema and token-count contracts") {
  Workspace ws("Grain barges queue at the lock for most of October.");
  const std::string dataset = ws.dir.file("bench.jsonl").string();
  json row{{"id", "e1"},
           {"context", ws.context},
           {"question", "What queues at the lock?"},
           {"answers", json::array({"grain barges"})}};
  test_util::write_text(dataset, row.dump() + "\n");

  CliResult bench = run_cli("bench" + ws.base_args() + " --dataset " + dataset +
                            " --reps 2 --max-new 8 --k 4");
  REQUIRE(bench.exit_code == 0);
  const json jb = json::parse(bench.out);
  check_schema(jb, "bench_report.schema.json");
  REQUIRE(jb.at("requests").size() == 2 * 3);

  const size_t question_len = std::string("What queues at the lock?").size();
  const size_t serving_prefix_len =
      std::string("Read the passage and answer the question concisely:").size();
  for (const auto& req : jb.at("requests")) {
    if (req.at("configuration") == "no_cache") {
      CHECK(req.at("cache_hit") == false);
      CHECK(req.at("prefill_tokens_computed") ==
            1 + serving_prefix_len + ws.context.size() + question_len);
    } else {
      CHECK(req.at("cache_hit") == true);
      CHECK(req.at("prefill_tokens_computed") == question_len);
    }
  }
  CHECK(jb.at("aggregates").contains("cached_steered"));
}

TEST_CASE("profile: schema and sane metrics on a tiny dev set") {
  Workspace ws("The mill wheel turns fastest after heavy rain.");
  const std::string dataset = ws.dir.file("dev.jsonl").string();
  json row{{"id", "d1"},
           {"context", ws.context},
           {"question", "When does the wheel turn fastest?"},
           {"answers", json::array({"after heavy rain"})}};
  test_util::write_text(dataset, row.dump() + "\n");

  CliResult prof =
      run_cli("profile --model " + ws.model + " --dev " + dataset + " --max-new 8 --k 4");
  REQUIRE(prof.exit_code == 0);
  const json jp = json::parse(prof.out);
  check_schema(jp, "profile_result.schema.json");
  CHECK(jp.at("dev_metric_steered").get<double>() >=
        jp.at("dev_metric_baseline").get<double>());
  CHECK(jp.at("eval_call_count") == 1 + 2 + 2 * 2);
}

TEST_CASE("reports can be written to a file with --out") {
  test_util::TempDir dir;
  const std::string dataset = dir.file("d.jsonl").string();
  test_util::write_text(dataset,
                        R"({"id":"a","context":"c","question":"q","answers":["w"]})"
                        "\n");
  const std::string predictions = dir.file("p.jsonl").string();
  test_util::write_text(predictions, R"({"id":"a","prediction":"w"})"
                                     "\n");
  const std::string out_file = dir.file("report.json").string();
  CliResult r = run_cli("eval --predictions " + predictions + " --dataset " + dataset +
                        " --out " + out_file);
  CHECK(r.exit_code == 0);
  CHECK(r.out.empty());
  CHECK(json::parse(test_util::read_text(out_file)).at("mean_f1") == 1.0);
}
