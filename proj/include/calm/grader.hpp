#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "calm/client.hpp"
#include "calm/flow.hpp"
#include "calm/model.hpp"
#include "calm/parallel.hpp"
#include "calm/record.hpp"

namespace calm {

inline constexpr double kDefaultEpsilon = 1e-4;

namespace grade_detail {
/// Errors are rounded to 12 significant digits so decimal inputs whose
/// binary forms differ by an ulp still land exactly on the boundary.
inline double snap(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return std::strtod(buf, nullptr);
}
} // namespace grade_detail

/// Binary outcome reward: 1 iff |answer - truth| / |truth| <= epsilon
/// (inclusive). A zero truth falls back to |answer| <= epsilon and is
/// flagged.
inline GradingResult grade(std::optional<double> answer, double truth, double epsilon) {
    if (!std::isfinite(truth))
        throw Error(ErrorKind::InvalidArgument, "ground truth is not finite", "truth");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw Error(ErrorKind::InvalidArgument, "epsilon must be positive", "epsilon");
    GradingResult g;
    if (!answer || !std::isfinite(*answer)) {
        g.failure_reason = answer ? GradeNote::NonNumeric : GradeNote::NoBoxedAnswer;
        return g;
    }
    g.extracted_answer = *answer;
    if (truth == 0.0) {
        g.relative_error = grade_detail::snap(std::fabs(*answer));
        g.failure_reason = GradeNote::ZeroTruthAbsoluteFallback;
    } else {
        g.relative_error = grade_detail::snap(std::fabs(*answer - truth) / std::fabs(truth));
    }
    g.reward = *g.relative_error <= epsilon ? 1 : 0;
    return g;
}

/// Grades a final answer segment, telling a missing box apart from a
/// non-numeric one.
inline GradingResult grade_text(std::string_view final_text, double truth, double epsilon) {
    auto boxed = inspect_boxed_answer(final_text);
    auto g = grade(boxed.value, truth, epsilon);
    if (boxed.has_box && !boxed.value) g.failure_reason = GradeNote::NonNumeric;
    return g;
}

// ── Evaluation protocol ─────────────────────────────────────────────

struct EvalConfig {
    std::size_t samples_per_problem = 8;
    double epsilon = kDefaultEpsilon;
    SamplingConfig sampling = reasoner_sampling_defaults();
    FlowBudgets budgets;
    std::size_t workers = 1;
    /// Benchmarks to report; empty = every benchmark present.
    std::vector<Benchmark> benchmarks;

    void validate() const {
        if (samples_per_problem < 1)
            throw Error(ErrorKind::InvalidArgument, "samples_per_problem must be >= 1",
                        "samples_per_problem");
        if (!(epsilon > 0.0))
            throw Error(ErrorKind::InvalidArgument, "epsilon must be positive", "epsilon");
        sampling.validate();
        budgets.validate();
    }
};

struct SampleResult {
    std::size_t sample = 0;
    GradingResult grading;
    /// The flow aborted (endpoint/runner failure); scored 0, not dropped.
    bool flow_failed = false;
    Trajectory trajectory;
};

struct PassAtOne {
    std::string problem_id;
    std::size_t successes = 0;
    std::size_t samples = 0;
    double score = 0.0;
    std::vector<SampleResult> sample_results;
};

inline std::string sample_trajectory_id(const Problem& p, std::size_t k) {
    return p.id + "#" + std::to_string(k);
}

inline SampleResult run_sample(const Problem& p, std::size_t k, ModelClient& reasoner,
                               Runner& runner, const EvalConfig& cfg, const PromptSet& prompts) {
    SamplingConfig sampling = cfg.sampling;
    if (sampling.seed) *sampling.seed += static_cast<std::int64_t>(k);
    SampleResult r;
    r.sample = k;
    try {
        r.trajectory = run_flow(make_flow_request(p, prompts, sampling, sample_trajectory_id(p, k)),
                                reasoner, runner, cfg.budgets);
        r.grading = grade_text(r.trajectory.final_text, p.ground_truth, cfg.epsilon);
    } catch (const FlowFailure& f) {
        r.flow_failed = true;
        r.trajectory = f.partial();
        r.grading = grade(std::nullopt, p.ground_truth, cfg.epsilon);
    }
    return r;
}

inline PassAtOne summarize(const Problem& p, std::vector<SampleResult> results) {
    PassAtOne out;
    out.problem_id = p.id;
    out.samples = results.size();
    for (const auto& r : results) out.successes += static_cast<std::size_t>(r.grading.reward);
    out.score = out.samples == 0 ? 0.0
                                 : static_cast<double>(out.successes) / static_cast<double>(out.samples);
    out.sample_results = std::move(results);
    return out;
}

/// Mean reward over `samples_per_problem` independent flows.
inline PassAtOne pass_at_1(const Problem& p, ModelClient& reasoner, Runner& runner,
                           const EvalConfig& cfg, const PromptSet& prompts = {}) {
    cfg.validate();
    std::vector<SampleResult> results(cfg.samples_per_problem);
    parallel_for(cfg.samples_per_problem, cfg.workers, [&](std::size_t k) {
        results[k] = run_sample(p, k, reasoner, runner, cfg, prompts);
    });
    return summarize(p, std::move(results));
}

struct ProblemScore {
    std::string problem_id;
    Benchmark benchmark = Benchmark::NL4Opt;
    std::size_t successes = 0;
    std::size_t samples = 0;
    std::size_t flagged = 0;

    friend bool operator==(const ProblemScore&, const ProblemScore&) = default;
};

struct EvalReport {
    double epsilon = kDefaultEpsilon;
    std::size_t samples_per_problem = 8;
    /// Reporting order (headline benchmarks first).
    std::vector<std::pair<Benchmark, double>> per_benchmark;
    double macro_avg = 0.0;
    std::vector<ProblemScore> per_problem;

    std::optional<double> score(Benchmark b) const {
        for (const auto& [bb, s] : per_benchmark)
            if (bb == b) return s;
        return std::nullopt;
    }

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Per-benchmark mean of per-problem success rates, then the unweighted
/// mean over benchmarks.
inline EvalReport assemble_report(std::vector<ProblemScore> scores,
                                  const std::vector<Benchmark>& benchmarks, double epsilon,
                                  std::size_t samples) {
    EvalReport report;
    report.epsilon = epsilon;
    report.samples_per_problem = samples;
    std::vector<Benchmark> order = benchmarks;
    if (order.empty())
        for (const auto& s : scores) order.push_back(s.benchmark);
    std::sort(order.begin(), order.end(),
              [](Benchmark a, Benchmark b) { return benchmark_rank(a) < benchmark_rank(b); });
    order.erase(std::unique(order.begin(), order.end()), order.end());
    if (order.empty()) throw Error(ErrorKind::EmptyBenchmark, "no test problems", "problems");
    for (auto b : order) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& s : scores) {
            if (s.benchmark != b) continue;
            sum += static_cast<double>(s.successes) / static_cast<double>(s.samples);
            ++n;
        }
        if (n == 0)
            throw Error(ErrorKind::EmptyBenchmark, "benchmark has zero test problems",
                        std::string(to_string(b)));
        report.per_benchmark.emplace_back(b, sum / static_cast<double>(n));
    }
    double total = 0.0;
    for (const auto& [_, s] : report.per_benchmark) total += s;
    report.macro_avg = total / static_cast<double>(report.per_benchmark.size());
    report.per_problem = std::move(scores);
    return report;
}

/// Runs every (problem, sample) pair, concurrently up to cfg.workers. The
/// report does not depend on completion order. `on_sample`, when set, sees
/// each finished sample in deterministic (problem, sample) order.
template <class OnSample = std::nullptr_t>
EvalReport evaluate_suite(const std::vector<Problem>& problems, ModelClient& reasoner,
                          Runner& runner, const EvalConfig& cfg, const PromptSet& prompts = {},
                          OnSample on_sample = nullptr) {
    cfg.validate();
    std::vector<const Problem*> selected;
    for (const auto& p : problems) {
        if (p.split != Split::Test)
            throw Error(ErrorKind::InvalidArgument, "evaluation requires split=Test problems",
                        p.id);
        if (cfg.benchmarks.empty() ||
            std::find(cfg.benchmarks.begin(), cfg.benchmarks.end(), p.benchmark) !=
                cfg.benchmarks.end())
            selected.push_back(&p);
    }
    const std::size_t s = cfg.samples_per_problem;
    std::vector<SampleResult> results(selected.size() * s);
    parallel_for(results.size(), cfg.workers, [&](std::size_t i) {
        results[i] = run_sample(*selected[i / s], i % s, reasoner, runner, cfg, prompts);
    });

    std::vector<ProblemScore> scores;
    for (std::size_t pi = 0; pi < selected.size(); ++pi) {
        ProblemScore score{selected[pi]->id, selected[pi]->benchmark, 0, s, 0};
        for (std::size_t k = 0; k < s; ++k) {
            const auto& r = results[pi * s + k];
            score.successes += static_cast<std::size_t>(r.grading.reward);
            score.flagged += r.flow_failed ? 1 : 0;
            if constexpr (!std::is_same_v<OnSample, std::nullptr_t>) on_sample(*selected[pi], r);
        }
        scores.push_back(std::move(score));
    }
    return assemble_report(std::move(scores), cfg.benchmarks, cfg.epsilon, s);
}

// ── Report I/O ──────────────────────────────────────────────────────

inline constexpr std::string_view kEpsilonNote =
    "epsilon is a configured tolerance on relative error; the reference protocol does not fix a value";

inline json to_json(const EvalReport& r) {
    json per_benchmark = json::array();
    for (const auto& [b, s] : r.per_benchmark)
        per_benchmark.push_back(json{{"benchmark", std::string(to_string(b))}, {"pass_at_1", s}});
    json per_problem = json::array();
    for (const auto& p : r.per_problem)
        per_problem.push_back(json{{"problem_id", p.problem_id},
                                   {"benchmark", std::string(to_string(p.benchmark))},
                                   {"successes", p.successes},
                                   {"samples", p.samples},
                                   {"flagged", p.flagged}});
    return json{{"epsilon", r.epsilon},
                {"epsilon_note", std::string(kEpsilonNote)},
                {"samples_per_problem", r.samples_per_problem},
                {"per_benchmark", std::move(per_benchmark)},
                {"macro_avg", r.macro_avg},
                {"per_problem", std::move(per_problem)}};
}

inline EvalReport eval_report_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    EvalReport r;
    r.epsilon = num(j, "epsilon", path);
    r.samples_per_problem = count(j, "samples_per_problem", path);
    r.macro_avg = num(j, "macro_avg", path);
    auto bench = [&](const json& o, const std::string& p) {
        auto name = str(o, "benchmark", p);
        auto b = parse_benchmark(name);
        if (!b) throw Error(ErrorKind::MalformedRecord, "unknown benchmark", join(p, "benchmark"));
        return *b;
    };
    const auto& pb = as_array(field(j, "per_benchmark", path), join(path, "per_benchmark"));
    for (std::size_t i = 0; i < pb.size(); ++i) {
        auto p = join(path, "per_benchmark[" + std::to_string(i) + "]");
        r.per_benchmark.emplace_back(bench(pb[i], p), num(pb[i], "pass_at_1", p));
    }
    const auto& pp = as_array(field(j, "per_problem", path), join(path, "per_problem"));
    for (std::size_t i = 0; i < pp.size(); ++i) {
        auto p = join(path, "per_problem[" + std::to_string(i) + "]");
        r.per_problem.push_back(ProblemScore{str(pp[i], "problem_id", p), bench(pp[i], p),
                                             count(pp[i], "successes", p), count(pp[i], "samples", p),
                                             count(pp[i], "flagged", p)});
    }
    return r;
}

inline std::string render_table(const EvalReport& r) {
    auto pct = [](double v) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
        return std::string(buf);
    };
    std::string header = "| Model ";
    std::string rule = "|---";
    std::string row = "| pass@1 ";
    for (const auto& [b, s] : r.per_benchmark) {
        header += "| " + std::string(to_string(b)) + " ";
        rule += "|---";
        row += "| " + pct(s) + " ";
    }
    header += "| Macro AVG |\n";
    rule += "|---|\n";
    row += "| " + pct(r.macro_avg) + " |\n";
    char meta[160];
    std::snprintf(meta, sizeof meta, "epsilon=%g (relative error tolerance), samples=%zu\n",
                  r.epsilon, r.samples_per_problem);
    return std::string(meta) + header + rule + row;
}

} // namespace calm
