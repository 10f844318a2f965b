#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "calm/cli.hpp"
#include "support.hpp"

using namespace calm;
using namespace calm::testing;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args, std::map<std::string, std::string> env = {}) {
    args.insert(args.begin(), "calm");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    auto lookup = [env](const std::string& k) -> std::optional<std::string> {
        auto it = env.find(k);
        if (it == env.end()) return std::nullopt;
        return it->second;
    };
    int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err, lookup);
    return {code, out.str(), err.str()};
}

std::string script_line(const std::string& response, const std::string& conversation = "") {
    json j{{"response", response}};
    if (!conversation.empty()) j["conversation"] = conversation;
    return j.dump() + "\n";
}

void write_corpus(const std::string& path, std::size_t n, Split split = Split::Unassigned) {
    std::vector<Problem> c;
    for (std::size_t i = 0; i < n; ++i)
        c.push_back(make_problem("nl-" + std::to_string(i), 10, Benchmark::NL4Opt, split));
    write_file_atomic(path, to_jsonl(c));
}

} // namespace

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli({}).code, 2);
    EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({"split", "--corpus", "x"}).code, 2);
    EXPECT_EQ(run_cli({"report"}).code, 2);
    EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, SplitIsReproducibleAndSeedFollowsPrecedence) {
    TempDir dir;
    write_corpus(dir / "corpus.jsonl", 46);
    auto a = run_cli({"split", "--corpus", dir / "corpus.jsonl", "--out", dir / "a", "--seed", "5"},
                     {{"CALM_SEED", "6"}});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_NE(a.out.find("8 sft, 8 rl, 30 test"), std::string::npos);
    auto b = run_cli({"split", "--corpus", dir / "corpus.jsonl", "--out", dir / "b", "--seed", "5"});
    ASSERT_EQ(b.code, 0);
    for (auto f : {"sft.jsonl", "rl.jsonl", "test.jsonl", "plan.json"})
        EXPECT_EQ(read_file(dir / (std::string("a/") + f)), read_file(dir / (std::string("b/") + f)));
    EXPECT_EQ(json::parse(read_file(dir / "a/plan.json"))["seed"], 5);

    auto env = run_cli({"split", "--corpus", dir / "corpus.jsonl", "--out", dir / "c"}, {{"CALM_SEED", "6"}});
    ASSERT_EQ(env.code, 0);
    EXPECT_EQ(json::parse(read_file(dir / "c/plan.json"))["seed"], 6);
}

TEST(Cli, SplitCountMismatchIsRuntimeError) {
    TempDir dir;
    write_corpus(dir / "corpus.jsonl", 45);
    auto r = run_cli({"split", "--corpus", dir / "corpus.jsonl", "--out", dir / "o"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("CountMismatch"), std::string::npos);
}

TEST(Cli, CurateThenEmit) {
    TempDir dir;
    write_corpus(dir / "p.jsonl", 1, Split::SFT);
    write_file_atomic(dir / "reasoner.jsonl",
                      script_line("Model it.\n```python\nprint(10)\n```\n") + script_line("\\boxed{10}"));
    write_file_atomic(dir / "intervener.jsonl", script_line("NO INTERVENTION"));
    write_file_atomic(dir / "runner.jsonl",
                      R"({"stdout":"10\n","stderr":"","exit":"ok","exit_code":0})" "\n");
    auto r = run_cli({"curate", "--problems", dir / "p.jsonl", "--out", dir / "out.jsonl", "--reasoner-mock",
                      dir / "reasoner.jsonl", "--intervener-mock", dir / "intervener.jsonl", "--runner-mock",
                      dir / "runner.jsonl"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto outcomes = read_jsonl<CalmOutcome>(dir / "out.jsonl", [](const json& j, const std::string& w) {
        return outcome_from_json(j, w);
    });
    ASSERT_EQ(outcomes.size(), 1u);
    EXPECT_EQ(outcomes[0].status, CalmStatus::GoldenAccepted);
    EXPECT_EQ(read_file(dir / "out.jsonl.failures.jsonl"), "");

    auto e = run_cli({"emit-sft", "--in", dir / "out.jsonl", "--out", dir / "sft.jsonl"});
    ASSERT_EQ(e.code, 0) << e.err;
    auto recs = read_jsonl<SftRecord>(dir / "sft.jsonl", [](const json& j, const std::string& w) {
        return sft_record_from_json(j, w);
    });
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].mask_spans.size(), 1u);
    auto funnel = json::parse(read_file(dir / "sft.jsonl.funnel.json"));
    EXPECT_EQ(funnel["emitted"], 1);
    EXPECT_EQ(funnel["reference_fraction"], 0.026);

    auto rep = run_cli({"report", "--funnel", dir / "sft.jsonl.funnel.json"});
    EXPECT_EQ(rep.code, 0);
    EXPECT_NE(rep.out.find("emitted 1"), std::string::npos);
}

TEST(Cli, MissingEndpointIsConfigError) {
    TempDir dir;
    write_corpus(dir / "p.jsonl", 1);
    auto r = run_cli({"curate", "--problems", dir / "p.jsonl", "--out", dir / "o.jsonl"});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("CALM_REASONER_BASE_URL"), std::string::npos);
}

TEST(Cli, CredentialsInConfigAreRejected) {
    TempDir dir;
    write_corpus(dir / "p.jsonl", 1);
    write_file_atomic(dir / "c.json", R"({"endpoints":{"reasoner":{"api_key":"sk-123"}}})");
    auto r = run_cli({"curate", "--problems", dir / "p.jsonl", "--out", dir / "o.jsonl", "--config", dir / "c.json"});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("environment"), std::string::npos);
    write_file_atomic(dir / "d.json", R"({"epsilonn": 1})");
    EXPECT_EQ(run_cli({"split", "--corpus", dir / "p.jsonl", "--out", dir / "s", "--config", dir / "d.json"}).code, 3);
    EXPECT_EQ(run_cli({"split", "--corpus", dir / "p.jsonl", "--out", dir / "s"}, {{"CALM_SEED", "x1"}}).code, 3);
}

TEST(Cli, UnreachableEndpointFailsTheProblemNotTheRun) {
    TempDir dir;
    write_corpus(dir / "p.jsonl", 1);
    write_file_atomic(dir / "c.json",
                      R"({"endpoints":{"reasoner":{"retry_attempts":1,"retry_backoff_ms":1,"timeout_seconds":2}}})");
    write_file_atomic(dir / "intervener.jsonl", script_line("NO INTERVENTION"));
    auto r = run_cli({"curate", "--problems", dir / "p.jsonl", "--out", dir / "o.jsonl", "--config",
                      dir / "c.json", "--intervener-mock", dir / "intervener.jsonl"},
                     {{"CALM_REASONER_BASE_URL", "http://127.0.0.1:1"}});
    EXPECT_EQ(r.code, 1);
    auto failures = read_file(dir / "o.jsonl.failures.jsonl");
    auto j = json::parse(failures.substr(0, failures.find('\n')));
    EXPECT_EQ(j["problem_id"], "nl-0");
    EXPECT_EQ(j["error"], "GenerationFailed");
    EXPECT_EQ(read_file(dir / "o.jsonl"), "");
}

TEST(Cli, EvaluateEpsilonPrecedence) {
    TempDir dir;
    write_corpus(dir / "t.jsonl", 1, Split::Test);
    // Answer 10.5 vs truth 10: 5% relative error.
    std::string script;
    for (int k = 0; k < 2; ++k) script += script_line("\\boxed{10.5}", "nl-0#" + std::to_string(k));
    write_file_atomic(dir / "r.jsonl", script);
    write_file_atomic(dir / "c.json", R"({"epsilon": 0.1, "samples": 2})");
    auto eval = [&](std::vector<std::string> extra, std::map<std::string, std::string> env) {
        std::vector<std::string> args{"evaluate", "--problems", dir / "t.jsonl", "--out", dir / "e.json",
                                      "--reasoner-mock", dir / "r.jsonl", "--config", dir / "c.json"};
        args.insert(args.end(), extra.begin(), extra.end());
        auto r = run_cli(args, env);
        EXPECT_EQ(r.code, 0) << r.err;
        return json::parse(read_file(dir / "e.json"));
    };
    auto from_config = eval({}, {});
    EXPECT_EQ(from_config["epsilon"], 0.1);
    EXPECT_EQ(from_config["macro_avg"], 1.0);
    auto from_env = eval({}, {{"CALM_EPSILON", "0.01"}});
    EXPECT_EQ(from_env["epsilon"], 0.01);
    EXPECT_EQ(from_env["macro_avg"], 0.0);
    auto from_flag = eval({"--epsilon", "0.2"}, {{"CALM_EPSILON", "0.01"}});
    EXPECT_EQ(from_flag["epsilon"], 0.2);
    EXPECT_EQ(from_flag["samples_per_problem"], 2);
    EXPECT_NE(read_file(dir / "e.json.md").find("NL4Opt"), std::string::npos);
}

TEST(Cli, EvaluateRejectsUnknownBenchmark) {
    TempDir dir;
    write_corpus(dir / "t.jsonl", 1, Split::Test);
    write_file_atomic(dir / "r.jsonl", script_line("\\boxed{10}"));
    auto r = run_cli({"evaluate", "--problems", dir / "t.jsonl", "--out", dir / "e.json", "--reasoner-mock",
                      dir / "r.jsonl", "--benchmarks", "NL4Opt,Nope"});
    EXPECT_EQ(r.code, 3);
}

TEST(Cli, AnnotateAgreementAndReport) {
    TempDir dir;
    write_corpus(dir / "p.jsonl", 2);
    Trajectory a;
    a.id = "nl-0#0";
    a.problem_id = "nl-0";
    a.final_text = "\\boxed{10}";
    auto b = a;
    b.id = "nl-1#0";
    b.problem_id = "nl-1";
    write_file_atomic(dir / "t.jsonl", to_jsonl(std::vector<Trajectory>{a, b}));
    write_file_atomic(dir / "ann.jsonl", script_line("Trigger 4 at step 0: no check.", "nl-0#0") +
                                             script_line("NO FLAWS", "nl-1#0"));
    auto r = run_cli({"annotate", "--in", dir / "t.jsonl", "--problems", dir / "p.jsonl", "--out",
                      dir / "llm.jsonl", "--annotator-mock", dir / "ann.jsonl", "--workers", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto dist = json::parse(read_file(dir / "llm.jsonl.distribution.json"));
    EXPECT_EQ(dist["macro_categories"]["LackOfOrExpertise"], 0.5);

    write_file_atomic(dir / "human.jsonl",
                      R"({"trajectory_id":"nl-0#0","instances":[{"trigger":4,"step_index":0},{"trigger":5,"step_index":0}]})"
                      "\n"
                      R"({"trajectory_id":"nl-1#0","instances":[]})"
                      "\n");
    auto ag = run_cli({"agreement", "--llm", dir / "llm.jsonl", "--human", dir / "human.jsonl", "--out",
                       dir / "ag.json"});
    ASSERT_EQ(ag.code, 0) << ag.err;
    EXPECT_EQ(json::parse(read_file(dir / "ag.json"))["accuracy"], 0.5);

    auto rep = run_cli({"report", "--distribution", dir / "llm.jsonl.distribution.json"});
    EXPECT_EQ(rep.code, 0);
    EXPECT_NE(rep.out.find("| Macro AVG |  | 0.000 | 0.500 | 0.000 |"), std::string::npos) << rep.out;

    write_file_atomic(dir / "other.jsonl", R"({"trajectory_id":"zz","instances":[]})" "\n");
    EXPECT_EQ(run_cli({"agreement", "--llm", dir / "llm.jsonl", "--human", dir / "other.jsonl"}).code, 1);
}
