// Acceptance checks: one PASS/FAIL line per criterion, non-zero exit if
// any check fails or overruns its time limit.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "calm/annotator.hpp"
#include "calm/calm.hpp"
#include "calm/datasets.hpp"
#include "calm/flow.hpp"
#include "calm/grader.hpp"
#include "../unit/case_study.hpp"
#include "../unit/support.hpp"

using namespace calm;
using namespace calm::testing;

namespace {

class Check {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok && first_.empty()) first_ = what;
        failures_ += !ok;
    }
    template <class A, class B>
    void equal(const A& a, const B& b, const std::string& what) {
        if (a == b) return;
        std::ostringstream s;
        s << what << " (got " << a << ", want " << b << ")";
        expect(false, s.str());
    }
    bool ok() const { return failures_ == 0; }
    const std::string& first() const { return first_; }
    int failures() const { return failures_; }

private:
    int failures_ = 0;
    std::string first_;
};

int run(const char* name, double limit_seconds, const std::function<void(Check&)>& body) {
    Check c;
    auto start = std::chrono::steady_clock::now();
    try {
        body(c);
    } catch (const std::exception& e) {
        c.expect(false, std::string("exception: ") + e.what());
    }
    double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (took > limit_seconds) c.expect(false, "took longer than the time limit");
    if (c.ok()) {
        std::printf("PASS  %-28s %8.3fs (limit %.0fs)\n", name, took, limit_seconds);
    } else {
        std::printf("FAIL  %-28s %8.3fs (limit %.0fs): %s [%d failed]\n", name, took, limit_seconds,
                    c.first().c_str(), c.failures());
    }
    std::fflush(stdout);
    return c.ok() ? 0 : 1;
}

// ── Grading ─────────────────────────────────────────────────────────

void grading(Check& c) {
    c.equal(grade(100.01, 100, 1e-4).reward, 1, "100.01 vs 100");
    c.equal(grade(100.02, 100, 1e-4).reward, 0, "100.02 vs 100");
    c.equal(grade(10, 10, 1e-4).reward, 1, "10 vs 10");
    auto missing = grade_text("no box here", 10, 1e-4);
    c.equal(missing.reward, 0, "missing answer");
    c.expect(missing.failure_reason == GradeNote::NoBoxedAnswer, "missing answer reason");
    auto zero = grade(0.0, 0.0, 1e-4);
    c.equal(zero.reward, 1, "zero truth exact");
    c.expect(zero.failure_reason == GradeNote::ZeroTruthAbsoluteFallback, "zero truth flagged");

    // Integer oracle in micro-units: |a - t| * 10^4 <= |t|.
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20000; ++i) {
        std::int64_t t = static_cast<std::int64_t>(1 + rng() % 1'000'000) * 10'000;
        if (rng() % 2) t = -t;
        std::int64_t boundary = (t < 0 ? -t : t) / 10'000;
        for (std::int64_t d : {boundary - 1, boundary, boundary + 1, std::int64_t{0}, 2 * boundary}) {
            std::int64_t a = rng() % 2 ? t + d : t - d;
            __int128 diff = a > t ? a - t : t - a;
            __int128 mag = t < 0 ? -static_cast<__int128>(t) : t;
            int want = diff * 10'000 <= mag ? 1 : 0;
            int got = grade(static_cast<double>(a) / 1e6, static_cast<double>(t) / 1e6, 1e-4).reward;
            if (got != want) {
                c.equal(got, want, "oracle at a=" + std::to_string(a) + " t=" + std::to_string(t));
                return;
            }
        }
    }
}

// ── Reflective flow ─────────────────────────────────────────────────

void flow(Check& c) {
    auto p = make_problem("flow", 4);
    std::vector<ScriptEntry> script;
    for (int i = 0; i < 5; ++i)
        script.push_back(entry("", code_turn("Attempt " + std::to_string(i) + ".\n",
                                             "print(" + std::to_string(i) + ")")));
    script.push_back(entry("", answer_turn("Done.\n", "4")));
    std::vector<SandboxResult> outputs;
    for (int i = 0; i < 5; ++i) outputs.push_back(printed(std::to_string(i) + "\n"));

    std::string first;
    for (int run = 0; run < 3; ++run) {
        ScriptedClient reasoner(script);
        ScriptedRunner runner(outputs);
        auto t = run_reflective_flow(p, reasoner, runner, FlowBudgets{});
        c.equal(runner.requests().size(), 4u, "executions dispatched");
        c.equal(t.code_execution_count, 4u, "code_execution_count");
        c.expect(t.steps.size() == 5 && !t.steps[4].output, "fifth block refused");
        c.expect(t.budget_capped, "budget_capped set");

        std::string expected;
        for (int i = 0; i < 5; ++i) {
            expected += script[i].response;
            if (i < 4) expected += "```output\n" + std::to_string(i) + "\n```\n";
        }
        expected += script[5].response;
        c.expect(render_transcript(t) == expected, "transcript byte-identical");
        auto line = serialize_trajectory(t);
        if (run == 0) first = line;
        c.expect(line == first, "deterministic across runs");
    }
}

// ── Correction loop ─────────────────────────────────────────────────

void calm_cases(Check& c) {
    {
        auto s = case_study();
        ScriptedClient reasoner(s.reasoner), intervener(s.intervener);
        ScriptedRunner runner(s.runner);
        auto o = calm_loop(make_problem("case", 10), reasoner, intervener, runner);
        c.expect(o.status == CalmStatus::GoldenAccepted, "case study accepted");
        c.equal(o.interventions_used, 3u, "case study interventions");
        c.expect(o.trajectory.final_answer == 10.0, "case study answer");
    }
    {
        std::vector<ScriptEntry> reasoner, intervener;
        for (int i = 0; i < 6; ++i) reasoner.push_back(entry("", answer_turn("Answer: ", "10")));
        for (int i = 0; i < 6; ++i)
            intervener.push_back(entry("", "Trigger 4 at step 0: Let me reflect on whether this is plausible."));
        ScriptedClient r(reasoner), iv(intervener);
        EchoRunner runner("");
        auto o = calm_loop(make_problem("flawed", 10), r, iv, runner);
        c.expect(o.status == CalmStatus::DiscardedBudgetExhausted, "always flawed exhausted");
        c.equal(o.interventions_used, 5u, "always flawed interventions");
    }
    {
        ScriptedClient r({entry("", answer_turn("", "798.04"))}), iv({entry("", "NO INTERVENTION")});
        EchoRunner runner("");
        auto o = calm_loop(make_problem("wrong", 10), r, iv, runner);
        c.expect(o.status == CalmStatus::DiscardedIncorrect, "flawless but wrong discarded");
    }
}

// ── Golden filter ───────────────────────────────────────────────────

void golden_filter(Check& c) {
    std::mt19937_64 rng(2025);
    std::vector<CalmOutcome> outcomes;
    for (std::size_t i = 0; i < 1000; ++i) outcomes.push_back(random_outcome(rng, i));
    auto e = emit_sft_dataset(outcomes);

    std::map<std::string, const CalmOutcome*> by_problem;
    for (const auto& o : outcomes) by_problem[o.trajectory.problem_id] = &o;
    std::size_t golden = 0;
    for (const auto& o : outcomes) golden += o.grading.reward == 1 && o.final_verdict_clean();
    c.equal(e.records.size(), golden, "emitted count");
    c.expect(golden > 100 && golden < 900, "sample mixes accepted and rejected outcomes");

    for (const auto& r : e.records) {
        const auto& o = *by_problem.at(r.problem_id);
        c.expect(o.grading.reward == 1, "emitted record has reward 1");
        c.expect(o.final_verdict_clean(), "emitted record ends on NO INTERVENTION");
        // Expected spans: walk the transcript and note where each output lands.
        std::vector<CharSpan> want;
        std::size_t pos = 0;
        for (const auto& s : o.trajectory.steps) {
            pos += render_step(s).size();
            if (s.output) want.push_back({pos - s.output->size() - 1, pos - 1});
        }
        c.expect(r.mask_spans == want, "mask spans cover exactly the output blocks");
        c.expect(unmasked_text(r).find("```output") == std::string::npos, "no output left unmasked");
    }
    const auto& f = e.funnel;
    c.expect(f.attempted >= f.correct && f.correct >= f.flawless && f.flawless >= f.emitted,
             "funnel monotone");
    c.equal(f.attempted, 1000u, "attempted");
}

// ── Splits ──────────────────────────────────────────────────────────

void splits(Check& c) {
    struct Row {
        Benchmark b;
        std::size_t sft, rl, test;
    };
    const std::vector<Row> table = {
        {Benchmark::NL4Opt, 8, 8, 30},          {Benchmark::MamoEasy, 200, 350, 100},
        {Benchmark::MamoComplex, 55, 56, 100},  {Benchmark::IndustryOR, 6, 12, 80},
        {Benchmark::OptMath, 30, 36, 100},      {Benchmark::OptiBench, 250, 257, 100},
        {Benchmark::ComplexOR, 0, 0, 18},       {Benchmark::NLP4LP, 0, 0, 12},
    };
    std::vector<Problem> corpus;
    for (const auto& row : table)
        for (std::size_t i = 0; i < row.sft + row.rl + row.test; ++i)
            corpus.push_back(make_problem(std::string(to_string(row.b)) + "/" + std::to_string(i), 1, row.b,
                                          Split::Unassigned));
    c.equal(corpus.size(), 1808u, "corpus size");

    auto count = [](const std::vector<Problem>& v, Benchmark b) {
        return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [b](const Problem& p) { return p.benchmark == b; }));
    };
    auto parts = split_corpus(corpus, SplitPlan::defaults());
    for (const auto& row : table) {
        auto name = std::string(to_string(row.b));
        c.equal(count(parts.sft, row.b), row.sft, name + " sft");
        c.equal(count(parts.rl, row.b), row.rl, name + " rl");
        c.equal(count(parts.test, row.b), row.test, name + " test");
    }

    std::set<std::string> all;
    for (const auto& p : corpus) all.insert(p.id);
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        auto seeded = split_corpus(corpus, SplitPlan::defaults(rng()));
        std::set<std::string> seen;
        std::size_t n = 0;
        for (const auto* part : {&seeded.sft, &seeded.rl, &seeded.test})
            for (const auto& p : *part) {
                seen.insert(p.id);
                ++n;
            }
        c.expect(n == corpus.size() && seen == all, "disjoint and exhaustive");
    }
}

// ── pass@1 ──────────────────────────────────────────────────────────

class JitterClient final : public ModelClient {
public:
    explicit JitterClient(std::shared_ptr<ModelClient> inner) : inner_(std::move(inner)) {}
    Completion complete(std::span<const ChatMessage> m, const SamplingConfig& cfg,
                        const RequestContext& ctx) override {
        std::this_thread::sleep_for(std::chrono::milliseconds(std::hash<std::string>{}(ctx.conversation) % 5));
        return inner_->complete(m, cfg, ctx);
    }

private:
    std::shared_ptr<ModelClient> inner_;
};

void pass_at_one(Check& c) {
    auto p = make_problem("p", 10);
    std::vector<ScriptEntry> script;
    const char* answers[] = {"10", "10", "11", "10", "10", "12", "10", "10"};
    for (std::size_t k = 0; k < 8; ++k)
        script.push_back(entry(sample_trajectory_id(p, k), answer_turn("", answers[k])));
    EchoRunner runner("");
    ScriptedClient reasoner(script);
    c.equal(pass_at_1(p, reasoner, runner, EvalConfig{}).score, 0.75, "6 of 8");

    std::vector<ProblemScore> scores{{"a", Benchmark::NL4Opt, 4, 8, 0}, {"b", Benchmark::OptMath, 8, 8, 0}};
    c.equal(assemble_report(scores, {}, 1e-4, 8).macro_avg, 0.75, "macro of {0.5, 1.0}");

    std::vector<Problem> problems;
    std::vector<ScriptEntry> all;
    std::mt19937 rng(9);
    for (int i = 0; i < 6; ++i) {
        auto q = make_problem("q" + std::to_string(i), 3, i % 2 ? Benchmark::IndustryOR : Benchmark::NL4Opt);
        for (std::size_t k = 0; k < 8; ++k)
            all.push_back(entry(sample_trajectory_id(q, k), answer_turn("", rng() % 2 ? "3" : "4")));
        problems.push_back(q);
    }
    auto base = evaluate_suite(problems, *scripted_mock(all), runner, EvalConfig{});
    for (std::size_t workers : {3u, 12u}) {
        EvalConfig cfg;
        cfg.workers = workers;
        JitterClient jitter(scripted_mock(all));
        auto shuffled = problems;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        auto r = evaluate_suite(shuffled, jitter, runner, cfg);
        c.expect(r.macro_avg == base.macro_avg && r.per_benchmark == base.per_benchmark,
                 "independent of completion order");
    }
}

// ── Flaw aggregation ────────────────────────────────────────────────

void flaw_aggregation(Check& c) {
    using T = TriggerType;
    for (auto t : {T::PrematureNlSolving, T::FragmentedCoding, T::RedundantManualVerification})
        c.expect(category_of(t) == FlawCategory::CodeUtilizationDistrust, "1-3 map to code distrust");
    for (auto t : {T::LackOfSanityCheck, T::FlawedReasoningOrModeling, T::ImplementationError})
        c.expect(category_of(t) == FlawCategory::LackOfOrExpertise, "4-6 map to OR expertise");

    auto rep = [](std::string id, std::vector<int> trig) {
        FlawReport r{std::move(id), {}};
        for (int n : trig) r.instances.push_back({*trigger_from_number(n), 0, ""});
        return r;
    };
    std::vector<Problem> problems{make_problem("a", 1, Benchmark::NL4Opt), make_problem("b", 1, Benchmark::NL4Opt),
                                  make_problem("c", 1, Benchmark::OptMath)};
    std::vector<FlawReport> reports{rep("a#0", {1, 7}), rep("b#0", {2, 5}), rep("c#0", {4, 7, 7})};
    auto d = aggregate_distribution(reports, problems);
    // NL4Opt: code distrust (1 + 1) / 2 = 1.0, expertise 1 / 2 = 0.5.
    // OptMath: code distrust 0, expertise 1.0. Macro: 0.5 and 0.75.
    c.equal(d.category(FlawCategory::CodeUtilizationDistrust), 0.5, "macro code distrust");
    c.equal(d.category(FlawCategory::LackOfOrExpertise), 0.75, "macro OR expertise");
    c.equal(d.trigger(T::PrematureNlSolving), 0.25, "macro trigger 1");
    c.equal(d.trigger(T::ProtocolViolation), (0.5 + 2.0) / 2, "macro trigger 7 kept separately");
    c.equal(annotator_agreement(reports, reports), 1.0, "agreement with itself");
}

// ── Token modification ──────────────────────────────────────────────

void token_metric(Check& c) {
    auto golden = [](std::size_t hint, std::size_t generated) {
        CalmOutcome o;
        o.status = CalmStatus::GoldenAccepted;
        o.grading.reward = 1;
        o.verdict_log = {{0, "NO INTERVENTION", false}};
        o.trajectory.hint_token_count = hint;
        o.trajectory.generated_token_count = generated;
        return o;
    };
    c.equal(funnel_metrics({golden(0, 500)}).token_modification_fraction, 0.0, "zero hints");
    c.equal(token_modification_fraction(golden(20, 1000)), 0.02, "20 of 1000");
    auto batch = funnel_metrics({golden(20, 1000), golden(0, 500), golden(10, 500)});
    c.equal(batch.token_modification_fraction, 30.0 / 2000.0, "batch fraction");
    c.equal(batch.reference_fraction, 0.026, "reference value");
    c.expect(batch.below_reference(), "batch compared against reference");
}

} // namespace

int main() {
    int failed = 0;
    failed += run("grading-rule", 1, grading);
    failed += run("reflective-flow", 5, flow);
    failed += run("calm-loop", 5, calm_cases);
    failed += run("golden-filter", 30, golden_filter);
    failed += run("splits", 10, splits);
    failed += run("pass-at-1", 5, pass_at_one);
    failed += run("flaw-aggregation", 1, flaw_aggregation);
    failed += run("token-modification", 1, token_metric);
    std::printf("%d of 8 criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
