#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <thread>

#include "calm/grader.hpp"
#include "support.hpp"

using namespace calm;
using namespace calm::testing;

namespace {

// Exact decimal oracle: values are integers in micro-units, so the
// tolerance test |a - t| <= |t| / 10^4 needs no floating point at all.
bool oracle_within(std::int64_t a_micro, std::int64_t t_micro, std::int64_t eps_denominator) {
    __int128 diff = a_micro > t_micro ? a_micro - t_micro : t_micro - a_micro;
    __int128 mag = t_micro < 0 ? -static_cast<__int128>(t_micro) : t_micro;
    return diff * eps_denominator <= mag;
}

double from_micro(std::int64_t v) { return static_cast<double>(v) / 1e6; }

} // namespace

TEST(Grade, BoundaryTable) {
    EXPECT_EQ(grade(100.01, 100, 1e-4).reward, 1);
    EXPECT_EQ(grade(100.02, 100, 1e-4).reward, 0);
    EXPECT_EQ(grade(99.99, 100, 1e-4).reward, 1);
    EXPECT_EQ(grade(10, 10, 1e-4).reward, 1);
    auto missing = grade(std::nullopt, 10, 1e-4);
    EXPECT_EQ(missing.reward, 0);
    EXPECT_EQ(missing.failure_reason, GradeNote::NoBoxedAnswer);
}

TEST(Grade, ZeroTruthFallsBackToAbsoluteAndFlags) {
    auto near = grade(0.00005, 0, 1e-4);
    EXPECT_EQ(near.reward, 1);
    EXPECT_EQ(near.failure_reason, GradeNote::ZeroTruthAbsoluteFallback);
    auto far = grade(0.5, 0, 1e-4);
    EXPECT_EQ(far.reward, 0);
    EXPECT_EQ(far.failure_reason, GradeNote::ZeroTruthAbsoluteFallback);
}

TEST(Grade, AgreesWithExactOracleAroundTheBoundary) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::int64_t> mag(1, 1'000'000);
    for (int i = 0; i < 20000; ++i) {
        std::int64_t t = mag(rng) * 10'000;  // exact boundary exists in micro-units
        if (rng() % 2) t = -t;
        std::int64_t boundary = (t < 0 ? -t : t) / 10'000;
        std::int64_t deltas[] = {boundary - 1, boundary, boundary + 1, 0, 3 * boundary};
        for (auto d : deltas) {
            std::int64_t a = rng() % 2 ? t + d : t - d;
            bool expected = oracle_within(a, t, 10'000);
            EXPECT_EQ(grade(from_micro(a), from_micro(t), 1e-4).reward, expected ? 1 : 0)
                << "a=" << a << " t=" << t;
        }
    }
}

TEST(Grade, ScaleAndSignInvariance) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.5, 2000.0);
    std::uniform_real_distribution<double> rel(0.0, 3e-4);
    for (int i = 0; i < 5000; ++i) {
        double t = u(rng);
        double a = t * (1.0 + rel(rng));
        int base = grade(a, t, 1e-4).reward;
        // Skip draws within rounding distance of the boundary.
        double r = std::abs(a - t) / t;
        if (std::abs(r - 1e-4) < 1e-9) continue;
        EXPECT_EQ(grade(-a, -t, 1e-4).reward, base);
        EXPECT_EQ(grade(a * 1024.0, t * 1024.0, 1e-4).reward, base);
        EXPECT_EQ(grade(a / 8.0, t / 8.0, 1e-4).reward, base);
    }
}

TEST(Grade, TextExtractionCases) {
    EXPECT_EQ(grade_text("so \\boxed{2800}", 2800, 1e-4).reward, 1);
    EXPECT_EQ(grade_text("\\boxed{\\$2,800.00}", 2800, 1e-4).reward, 1);
    EXPECT_EQ(grade_text("\\boxed{1} then \\boxed{2800}", 2800, 1e-4).reward, 1);
    auto words = grade_text("\\boxed{2800 dollars}", 2800, 1e-4);
    EXPECT_EQ(words.reward, 0);
    EXPECT_EQ(words.failure_reason, GradeNote::NonNumeric);
    auto none = grade_text("The answer is 2800.", 2800, 1e-4);
    EXPECT_EQ(none.failure_reason, GradeNote::NoBoxedAnswer);
    EXPECT_EQ(extract_final_answer("\\boxed{-1.5e3}"), -1500.0);
    EXPECT_EQ(extract_final_answer("\\boxed{12\\%}"), 12.0);
    EXPECT_FALSE(extract_final_answer("\\boxed{\\frac{1}{2}}"));
    EXPECT_FALSE(extract_final_answer("\\boxed{inf}"));
}

// ── pass@1 ──────────────────────────────────────────────────────────

namespace {

std::vector<ScriptEntry> samples_script(const Problem& p, const std::vector<std::string>& answers) {
    std::vector<ScriptEntry> s;
    for (std::size_t k = 0; k < answers.size(); ++k)
        s.push_back(entry(sample_trajectory_id(p, k), answer_turn("Solved.\n", answers[k])));
    return s;
}

/// Delays each response by a pseudo-random amount so completion order
/// differs from submission order.
class JitterClient final : public ModelClient {
public:
    explicit JitterClient(std::shared_ptr<ModelClient> inner) : inner_(std::move(inner)) {}
    Completion complete(std::span<const ChatMessage> m, const SamplingConfig& c,
                        const RequestContext& ctx) override {
        auto h = std::hash<std::string>{}(ctx.conversation);
        std::this_thread::sleep_for(std::chrono::milliseconds(h % 7));
        return inner_->complete(m, c, ctx);
    }

private:
    std::shared_ptr<ModelClient> inner_;
};

} // namespace

TEST(PassAtOne, SixOfEightIsThreeQuarters) {
    auto p = make_problem("p", 10);
    ScriptedClient reasoner(samples_script(p, {"10", "10", "11", "10", "10", "12", "10", "10"}));
    EchoRunner runner("");
    auto r = pass_at_1(p, reasoner, runner, EvalConfig{});
    EXPECT_EQ(r.samples, 8u);
    EXPECT_EQ(r.successes, 6u);
    EXPECT_DOUBLE_EQ(r.score, 0.75);
}

TEST(PassAtOne, FailedFlowScoresZeroAndIsFlagged) {
    auto p = make_problem("p", 10);
    auto script = samples_script(p, {"10", "10"});
    script[1].fail = ErrorKind::EndpointUnavailable;
    ScriptedClient reasoner(script);
    EchoRunner runner("");
    EvalConfig cfg;
    cfg.samples_per_problem = 2;
    auto r = pass_at_1(p, reasoner, runner, cfg);
    EXPECT_DOUBLE_EQ(r.score, 0.5);
    EXPECT_TRUE(r.sample_results[1].flow_failed);
    EXPECT_TRUE(r.sample_results[1].trajectory.failure.has_value());
}

TEST(EvalReport, MacroAverageIsUnweightedOverBenchmarks) {
    std::vector<ProblemScore> scores{
        {"a", Benchmark::NL4Opt, 4, 8, 0},      {"b", Benchmark::NL4Opt, 4, 8, 0},
        {"c", Benchmark::IndustryOR, 8, 8, 0},
    };
    auto r = assemble_report(scores, {}, 1e-4, 8);
    EXPECT_DOUBLE_EQ(*r.score(Benchmark::NL4Opt), 0.5);
    EXPECT_DOUBLE_EQ(*r.score(Benchmark::IndustryOR), 1.0);
    EXPECT_DOUBLE_EQ(r.macro_avg, 0.75);
}

TEST(EvalReport, EmptyRequestedBenchmarkFails) {
    std::vector<ProblemScore> scores{{"a", Benchmark::NL4Opt, 4, 8, 0}};
    try {
        assemble_report(scores, {Benchmark::NL4Opt, Benchmark::OptMath}, 1e-4, 8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyBenchmark);
    }
}

TEST(EvalReport, ColumnsFollowReportingOrder) {
    std::vector<ProblemScore> scores{{"x", Benchmark::OptMath, 1, 1, 0},
                                     {"y", Benchmark::NL4Opt, 0, 1, 0},
                                     {"z", Benchmark::MamoEasy, 1, 1, 0}};
    auto r = assemble_report(scores, {}, 1e-4, 1);
    ASSERT_EQ(r.per_benchmark.size(), 3u);
    EXPECT_EQ(r.per_benchmark[0].first, Benchmark::NL4Opt);
    EXPECT_EQ(r.per_benchmark[1].first, Benchmark::MamoEasy);
    EXPECT_EQ(r.per_benchmark[2].first, Benchmark::OptMath);
    auto table = render_table(r);
    EXPECT_NE(table.find("epsilon=0.0001"), std::string::npos);
    EXPECT_LT(table.find("NL4Opt"), table.find("MAMO-Easy"));
    EXPECT_NE(table.find("| 66.7 |"), std::string::npos);
}

TEST(EvaluateSuite, IndependentOfCompletionOrder) {
    std::vector<Problem> problems;
    std::vector<ScriptEntry> script;
    std::mt19937 rng(3);
    for (int i = 0; i < 6; ++i) {
        auto p = make_problem("q" + std::to_string(i), 7, i % 2 ? Benchmark::OptMath : Benchmark::NL4Opt);
        std::vector<std::string> answers;
        for (int k = 0; k < 8; ++k) answers.push_back(rng() % 3 ? "7" : "8");
        auto s = samples_script(p, answers);
        script.insert(script.end(), s.begin(), s.end());
        problems.push_back(p);
    }
    EchoRunner runner("");
    EvalConfig serial;
    auto base = evaluate_suite(problems, *scripted_mock(script), runner, serial);

    for (std::size_t workers : {2u, 5u, 16u}) {
        EvalConfig par;
        par.workers = workers;
        JitterClient jitter(scripted_mock(script));
        auto r = evaluate_suite(problems, jitter, runner, par);
        EXPECT_EQ(r, base);
        EXPECT_EQ(to_json(r).dump(), to_json(base).dump());
    }

    auto shuffled = problems;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto r = evaluate_suite(shuffled, *scripted_mock(script), runner, serial);
    EXPECT_DOUBLE_EQ(r.macro_avg, base.macro_avg);
    EXPECT_EQ(r.per_benchmark, base.per_benchmark);
}

TEST(EvaluateSuite, RejectsNonTestProblems) {
    std::vector<Problem> problems{make_problem("s", 1, Benchmark::NL4Opt, Split::SFT)};
    EchoRunner runner("");
    ScriptedClient reasoner({entry("", "\\boxed{1}")});
    EXPECT_THROW(evaluate_suite(problems, reasoner, runner, EvalConfig{}), Error);
}

TEST(EvaluateSuite, SampleSeedsDifferPerSample) {
    auto p = make_problem("p", 1);
    auto reasoner = scripted_mock(samples_script(p, {"1", "1", "1"}));
    EchoRunner runner("");
    EvalConfig cfg;
    cfg.samples_per_problem = 3;
    cfg.sampling.seed = 100;
    evaluate_suite({p}, *reasoner, runner, cfg);
    std::set<std::int64_t> seeds;
    for (const auto& c : reasoner->calls()) seeds.insert(*c.sampling.seed);
    EXPECT_EQ(seeds, (std::set<std::int64_t>{100, 101, 102}));
}

TEST(EvalReport, JsonRoundTrip) {
    std::vector<ProblemScore> scores{{"a", Benchmark::NL4Opt, 3, 8, 1},
                                     {"c", Benchmark::IndustryOR, 8, 8, 0}};
    auto r = assemble_report(scores, {}, 1e-4, 8);
    auto back = eval_report_from_json(to_json(r));
    EXPECT_EQ(back, r);
    EXPECT_NE(to_json(r)["epsilon_note"].get<std::string>().find("tolerance"), std::string::npos);
}
