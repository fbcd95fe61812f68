#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "sra/corpus.hpp"
#include "sra/judge.hpp"

using namespace sra;
namespace fs = std::filesystem;

namespace {

struct Run {
  int rc = -1;
  std::string output;  // stdout and stderr
};

Run run(const std::string& args) {
  const std::string cmd = std::string("'") + SRA_CLI_PATH + "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(p);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// Scratch directory with a tiny corpus, vocabulary and base checkpoint.
const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("sra_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    const std::string q = "'" + d.string() + "/";
    auto ok = [](const Run& r) {
      INFO(r.output);
      REQUIRE(r.rc == 0);
    };
    ok(run("synth --out " + q + "conv.jsonl' --conversations 12 --min-turns 8 --max-turns 10 --seed 1 -q"));
    ok(run("train-vocab --corpus " + q + "conv.jsonl' --out " + q + "vocab.txt' --size 300 -q"));
    ok(run("pretrain --corpus " + q + "conv.jsonl' --vocab " + q + "vocab.txt' --out " + q +
           "base.ckpt' --d 16 --layers 1 --heads 2 --epochs 1 --max-len 1024 --max-turn 6 -q"));
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return "'" + (workdir() / name).string() + "'"; }

std::string extend_args(const std::string& out) {
  return "extend --corpus " + at("conv.jsonl") + " --vocab " + at("vocab.txt") + " --checkpoint " + at("base.ckpt") +
         " --max-new-tokens 8 --max-turn 6 --out " + at(out);
}

}  // namespace

TEST_CASE("extend is byte-for-byte reproducible") {
  const auto a = run(extend_args("e1.jsonl") + " --template c1_hf --seed 7 -q");
  const auto b = run(extend_args("e2.jsonl") + " --template c1_hf --seed 7 -q");
  INFO(a.output);
  REQUIRE(a.rc == 0);
  REQUIRE(b.rc == 0);
  const auto e1 = read_file(workdir() / "e1.jsonl");
  CHECK(!e1.empty());
  CHECK(e1 == read_file(workdir() / "e2.jsonl"));
  for (const auto& ex : load_extended(workdir() / "e1.jsonl")) CHECK(ex.job.template_id == "c1_hf");
  REQUIRE(run(extend_args("e3.jsonl") + " --template c1_hf --seed 8 -q").rc == 0);
  CHECK(read_file(workdir() / "e3.jsonl") != e1);
}

TEST_CASE("every run writes reproduction metadata") {
  REQUIRE(run(extend_args("meta.jsonl") + " --template c3_hl --seed 3 -q").rc == 0);
  const auto meta = nlohmann::json::parse(read_file(workdir() / "meta.jsonl.meta.json"));
  CHECK(meta.at("command") == "extend");
  CHECK(meta.contains("tool_version"));
  CHECK(meta.contains("format"));
  const auto cfg = meta.at("config").get<std::string>();
  CHECK(cfg.find("seed=3") != std::string::npos);
  CHECK(cfg.find("template=\"c3_hl\"") != std::string::npos);
  CHECK(fs::exists(workdir() / "base.ckpt.meta.json"));
}

TEST_CASE("config file values apply and flags override them") {
  {
    std::ofstream cfg(workdir() / "run.ini");
    cfg << "[extend]\ntemplate=\"c1_hf\"\nseed=7\n";
  }
  REQUIRE(run(extend_args("cfg1.jsonl") + " --config " + at("run.ini") + " -q").rc == 0);
  REQUIRE(run(extend_args("ref7.jsonl") + " --template c1_hf --seed 7 -q").rc == 0);
  CHECK(read_file(workdir() / "cfg1.jsonl") == read_file(workdir() / "ref7.jsonl"));
  REQUIRE(run(extend_args("cfg2.jsonl") + " --config " + at("run.ini") + " --seed 8 -q").rc == 0);
  REQUIRE(run(extend_args("ref8.jsonl") + " --template c1_hf --seed 8 -q").rc == 0);
  CHECK(read_file(workdir() / "cfg2.jsonl") == read_file(workdir() / "ref8.jsonl"));
}

TEST_CASE("evaluate on a three-record fixture") {
  {
    std::ofstream out(workdir() / "recs.jsonl");
    out << R"({"example_id":"a","prompted":"affirmation","predicted":"affirmation","turn":5,"log_sra":-5.0,"template":"c1_hf","model_tag":"m"})"
        << "\n"
        << R"({"example_id":"b","prompted":"offer_hope","predicted":"affirmation","turn":6,"log_sra":-6.0,"template":"standard","model_tag":"m"})"
        << "\n"
        << R"({"example_id":"c","prompted":"clarification","predicted":"clarification","turn":7,"log_sra":-5.5,"template":"c1_hf","model_tag":"m"})"
        << "\n";
  }
  const auto r = run("evaluate --records " + at("recs.jsonl") + " --out " + at("ev.json") + " -q");
  INFO(r.output);
  REQUIRE(r.rc == 0);
  const auto j = nlohmann::json::parse(read_file(workdir() / "ev.json"));
  // 2 of 3 correct; turns 5,6 share bin 5 (1 of 2), turn 7 alone (1 of 1).
  CHECK(j.at("accuracy").get<double>() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(j.at("n") == 3);
  CHECK(j.at("accuracy_by_turn").size() == 2);
  CHECK(j.at("accuracy_by_turn")[0].at("accuracy") == 0.5);
  CHECK(j.at("accuracy_by_turn")[1].at("bin_start") == 7);
  CHECK(j.at("correlation").at("points")[0].at("mean_log_sra") == -5.25);
  CHECK(std::abs(j.at("correlation").at("pearson_r").get<double>()) == doctest::Approx(1.0));
}

TEST_CASE("missing inputs are reported by path") {
  const auto r = run("extend --corpus " + at("no_such_corpus.jsonl") + " --vocab " + at("vocab.txt") +
                     " --checkpoint " + at("base.ckpt") + " --out " + at("never.jsonl"));
  CHECK(r.rc != 0);
  CHECK(r.output.find("no_such_corpus.jsonl") != std::string::npos);
  CHECK(r.output.rfind("error: ", 0) == 0);
  CHECK_FALSE(fs::exists(workdir() / "never.jsonl"));
}

TEST_CASE("usage errors exit with status 2") {
  auto r = run("evaluate --records x --out y --bogus");
  CHECK(r.rc == 2);
  CHECK(r.output.find("Usage") != std::string::npos);
  r = run("no-such-command");
  CHECK(r.rc == 2);
  r = run("");
  CHECK(r.rc == 2);
  CHECK(run("--help").rc == 0);
}

TEST_CASE("judge replays a cassette without network access") {
  const std::vector<std::string> prompts_in = {
      R"({"pair_id":"p1","history":"Seeker: I feel alone.","strategy":"Affirmation: Acknowledge strengths.","response_a":"You reached out, which takes courage.","response_b":"Okay."})",
      R"({"pair_id":"p2","history":"Seeker: I feel alone.","strategy":"Affirmation: Acknowledge strengths.","response_a":"Fine.","response_b":"You have been strong through this."})"};
  {
    std::ofstream pairs(workdir() / "pairs.jsonl");
    for (const auto& l : prompts_in) pairs << l << "\n";
  }
  // Hand-built cassette: p1 preferred consistently, p2 flips with position.
  std::ofstream cas(workdir() / "cassette.jsonl");
  auto entry = [&](const JudgeRequest& req, const std::string& verdict) {
    const auto body = chat_request_body(JudgeConfig{}.model, render_judge_prompt(req));
    const auto resp = nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", verdict}}}}}}}.dump();
    cas << nlohmann::json{{"request", {{"path", kChatCompletionsPath}, {"body", body}}},
                          {"response", {{"status", 200}, {"body", resp}}}}
               .dump()
        << "\n";
  };
  for (const auto& l : prompts_in) {
    const auto p = nlohmann::json::parse(l);
    const std::string h = p["history"], s = p["strategy"], a = p["response_a"], b = p["response_b"];
    const bool consistent = p["pair_id"] == "p1";
    entry({h, s, a, b}, "A is better. [[A]]");
    entry({h, s, b, a}, consistent ? "[[B]]" : "[[A]]");
  }
  cas.close();
  const auto r = run("judge --pairs " + at("pairs.jsonl") + " --out " + at("verdicts.jsonl") + " --replay " +
                     at("cassette.jsonl") + " --judge-url http://127.0.0.1:9 -q");
  INFO(r.output);
  REQUIRE(r.rc == 0);
  std::ifstream in(workdir() / "verdicts.jsonl");
  std::string line;
  std::vector<nlohmann::json> v;
  while (std::getline(in, line))
    if (!line.empty()) v.push_back(nlohmann::json::parse(line));
  REQUIRE(v.size() == 2);
  CHECK(v[0].at("pair_id") == "p1");
  CHECK(v[0].at("final") == "win");
  CHECK(v[1].at("final") == "tie");
}

TEST_CASE("scratch directory cleanup") {
  fs::remove_all(workdir());
  CHECK_FALSE(fs::exists(workdir()));
}
