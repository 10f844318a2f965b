#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "calm/calm.hpp"
#include "calm/error.hpp"
#include "calm/model.hpp"
#include "calm/record.hpp"

namespace calm {

// ── Splits ──────────────────────────────────────────────────────────

struct SplitCounts {
    std::size_t sft = 0;
    std::size_t rl = 0;
    std::size_t test = 0;

    std::size_t total() const { return sft + rl + test; }
    friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

struct SplitPlan {
    std::map<Benchmark, SplitCounts> counts;
    std::uint64_t seed = 0;

    static SplitPlan defaults(std::uint64_t seed = 0) {
        SplitPlan p;
        p.seed = seed;
        p.counts = {
            {Benchmark::NL4Opt, {8, 8, 30}},        {Benchmark::MamoEasy, {200, 350, 100}},
            {Benchmark::MamoComplex, {55, 56, 100}}, {Benchmark::IndustryOR, {6, 12, 80}},
            {Benchmark::OptMath, {30, 36, 100}},    {Benchmark::OptiBench, {250, 257, 100}},
            {Benchmark::ComplexOR, {0, 0, 18}},     {Benchmark::NLP4LP, {0, 0, 12}},
        };
        return p;
    }
};

struct PartitionedCorpus {
    std::vector<Problem> sft;
    std::vector<Problem> rl;
    std::vector<Problem> test;

    const std::vector<Problem>& part(Split s) const {
        switch (s) {
        case Split::SFT: return sft;
        case Split::RL: return rl;
        default: return test;
        }
    }
};

namespace split_detail {

/// Uniform draw in [0, bound) by rejection; std distributions are not
/// specified bit-for-bit across standard libraries.
inline std::uint64_t below(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    for (;;) {
        auto x = rng();
        if (x < limit) return x % bound;
    }
}

} // namespace split_detail

/// Per benchmark: order by id, shuffle with a generator keyed by the seed
/// and the benchmark, then hand out SFT, RL and Test slices in that order.
inline PartitionedCorpus split_corpus(const std::vector<Problem>& problems, const SplitPlan& plan) {
    std::map<Benchmark, std::vector<const Problem*>> groups;
    for (const auto& p : problems) groups[p.benchmark].push_back(&p);

    PartitionedCorpus out;
    for (auto& [bench, members] : groups) {
        auto it = plan.counts.find(bench);
        if (it == plan.counts.end())
            throw Error(ErrorKind::CountMismatch, "plan has no entry for benchmark",
                        std::string(to_string(bench)));
        const auto& c = it->second;
        if (c.total() != members.size())
            throw Error(ErrorKind::CountMismatch,
                        "plan sums to " + std::to_string(c.total()) + " but corpus has " +
                            std::to_string(members.size()),
                        std::string(to_string(bench)));
        std::sort(members.begin(), members.end(),
                  [](const Problem* a, const Problem* b) { return a->id < b->id; });
        std::mt19937_64 rng(plan.seed * 1000003ULL + benchmark_rank(bench));
        for (std::size_t i = members.size(); i > 1; --i)
            std::swap(members[i - 1], members[split_detail::below(rng, i)]);
        for (std::size_t i = 0; i < members.size(); ++i) {
            Problem p = *members[i];
            if (i < c.sft) {
                p.split = Split::SFT;
                out.sft.push_back(std::move(p));
            } else if (i < c.sft + c.rl) {
                p.split = Split::RL;
                out.rl.push_back(std::move(p));
            } else {
                p.split = Split::Test;
                out.test.push_back(std::move(p));
            }
        }
    }
    return out;
}

// ── SFT records ─────────────────────────────────────────────────────

struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct SftRecord {
    std::string problem_id;
    std::string system_prompt;
    std::string user_prompt;
    std::string assistant_text;
    /// Execution-output blocks in assistant_text; trainers drop these from
    /// the loss.
    std::vector<CharSpan> mask_spans;

    friend bool operator==(const SftRecord&, const SftRecord&) = default;
};

inline void validate(const SftRecord& r) {
    constexpr std::string_view open = "```output\n";
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < r.mask_spans.size(); ++i) {
        const auto& s = r.mask_spans[i];
        auto path = "mask_spans[" + std::to_string(i) + "]";
        if (s.begin < prev_end || s.end <= s.begin || s.end > r.assistant_text.size())
            throw Error(ErrorKind::InvariantViolation, "span overlaps, is unsorted or out of bounds",
                        path);
        auto body = std::string_view(r.assistant_text).substr(s.begin, s.end - s.begin);
        if (body.substr(0, open.size()) != open || body.size() < open.size() + 3 ||
            body.substr(body.size() - 3) != "```")
            throw Error(ErrorKind::InvariantViolation, "span is not one output block", path);
        prev_end = s.end;
    }
}

inline SftRecord make_sft_record(const CalmOutcome& o) {
    SftRecord r;
    r.problem_id = o.trajectory.problem_id;
    r.system_prompt = o.system_prompt;
    r.user_prompt = o.user_prompt;
    for (const auto& s : o.trajectory.steps) {
        r.assistant_text += s.reasoning;
        if (s.code) r.assistant_text += render_code_block(*s.code) + "\n";
        if (s.output) {
            auto begin = r.assistant_text.size();
            r.assistant_text += *s.output;
            r.mask_spans.push_back({begin, r.assistant_text.size()});
            r.assistant_text += "\n";
        }
    }
    r.assistant_text += o.trajectory.final_text;
    if (r.assistant_text != render_transcript(o.trajectory))
        throw Error(ErrorKind::InvariantViolation, "record text diverges from transcript",
                    o.trajectory.id);
    validate(r);
    return r;
}

/// assistant_text with every masked span removed.
inline std::string unmasked_text(const SftRecord& r) {
    std::string out;
    std::size_t pos = 0;
    for (const auto& s : r.mask_spans) {
        out.append(r.assistant_text, pos, s.begin - pos);
        pos = s.end;
    }
    out.append(r.assistant_text, pos);
    return out;
}

// ── Funnel ──────────────────────────────────────────────────────────

/// Token-modification share reported by the original curation run.
inline constexpr double kReferenceTokenFraction = 0.026;

/// Correct final answer that the intervener never cleared.
inline bool is_flagged_correct(const CalmOutcome& o) {
    return o.status == CalmStatus::CorrectButFlagged ||
           (o.status == CalmStatus::DiscardedBudgetExhausted && o.grading.reward == 1);
}

struct FunnelMetrics {
    std::size_t attempted = 0;
    std::size_t correct = 0;
    std::size_t flawless = 0;
    std::size_t emitted = 0;
    std::size_t flagged_correct = 0;
    std::size_t budget_exhausted = 0;
    double mean_interventions = 0.0;
    double mean_response_tokens = 0.0;
    std::size_t hint_tokens = 0;
    std::size_t generated_tokens = 0;
    double token_modification_fraction = 0.0;
    double reference_fraction = kReferenceTokenFraction;

    bool below_reference() const { return token_modification_fraction < reference_fraction; }

    friend bool operator==(const FunnelMetrics&, const FunnelMetrics&) = default;
};

/// Stages: attempted, graded correct, correct with a clean final verdict,
/// emitted. Token statistics are over emitted trajectories.
inline FunnelMetrics funnel_metrics(const std::vector<CalmOutcome>& outcomes) {
    FunnelMetrics m;
    std::size_t interventions = 0;
    for (const auto& o : outcomes) {
        ++m.attempted;
        bool correct = o.grading.reward == 1;
        if (correct) ++m.correct;
        if (correct && o.final_verdict_clean()) ++m.flawless;
        if (is_flagged_correct(o)) ++m.flagged_correct;
        if (o.status == CalmStatus::DiscardedBudgetExhausted) ++m.budget_exhausted;
        if (o.status != CalmStatus::GoldenAccepted) continue;
        ++m.emitted;
        interventions += o.interventions_used;
        m.hint_tokens += o.trajectory.hint_token_count;
        m.generated_tokens += o.trajectory.generated_token_count;
    }
    if (m.emitted > 0) {
        m.mean_interventions = static_cast<double>(interventions) / static_cast<double>(m.emitted);
        m.mean_response_tokens =
            static_cast<double>(m.generated_tokens) / static_cast<double>(m.emitted);
    }
    if (m.generated_tokens > 0)
        m.token_modification_fraction =
            static_cast<double>(m.hint_tokens) / static_cast<double>(m.generated_tokens);
    return m;
}

struct SftEmission {
    std::vector<SftRecord> records;
    /// Correct answers the intervener never cleared; kept for audit only.
    std::vector<CalmOutcome> flagged;
    FunnelMetrics funnel;
};

inline SftEmission emit_sft_dataset(const std::vector<CalmOutcome>& outcomes) {
    SftEmission out;
    for (const auto& o : outcomes) {
        if (o.status == CalmStatus::GoldenAccepted) {
            if (o.grading.reward != 1 || !o.final_verdict_clean())
                throw Error(ErrorKind::InvariantViolation,
                            "accepted outcome is not correct and clean", o.trajectory.id);
            out.records.push_back(make_sft_record(o));
        } else if (is_flagged_correct(o)) {
            out.flagged.push_back(o);
        }
    }
    out.funnel = funnel_metrics(outcomes);
    return out;
}

// ── JSON ────────────────────────────────────────────────────────────

inline json to_json(const SftRecord& r) {
    json spans = json::array();
    for (const auto& s : r.mask_spans) spans.push_back(json::array({s.begin, s.end}));
    return json{{"problem_id", r.problem_id},       {"system_prompt", r.system_prompt},
                {"user_prompt", r.user_prompt},     {"assistant_text", r.assistant_text},
                {"mask_spans", std::move(spans)}};
}

inline SftRecord sft_record_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    SftRecord r;
    r.problem_id = str(j, "problem_id", path);
    r.system_prompt = str(j, "system_prompt", path);
    r.user_prompt = str(j, "user_prompt", path);
    r.assistant_text = str(j, "assistant_text", path);
    const auto& spans = as_array(field(j, "mask_spans", path), join(path, "mask_spans"));
    for (std::size_t i = 0; i < spans.size(); ++i) {
        auto sp = join(path, "mask_spans[" + std::to_string(i) + "]");
        const auto& pair = as_array(spans[i], sp);
        if (pair.size() != 2) throw Error(ErrorKind::MalformedRecord, "span needs [begin, end]", sp);
        r.mask_spans.push_back({as_count(pair[0], sp), as_count(pair[1], sp)});
    }
    try {
        validate(r);
    } catch (const Error& e) {
        throw Error(ErrorKind::MalformedRecord, e.what(), join(path, e.path()));
    }
    return r;
}

inline json to_json(const FunnelMetrics& m) {
    return json{{"attempted", m.attempted},
                {"correct", m.correct},
                {"flawless", m.flawless},
                {"emitted", m.emitted},
                {"flagged_correct", m.flagged_correct},
                {"budget_exhausted", m.budget_exhausted},
                {"mean_interventions", m.mean_interventions},
                {"mean_response_tokens", m.mean_response_tokens},
                {"hint_tokens", m.hint_tokens},
                {"generated_tokens", m.generated_tokens},
                {"token_modification_fraction", m.token_modification_fraction},
                {"reference_fraction", m.reference_fraction},
                {"below_reference", m.below_reference()}};
}

inline FunnelMetrics funnel_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    FunnelMetrics m;
    m.attempted = count(j, "attempted", path);
    m.correct = count(j, "correct", path);
    m.flawless = count(j, "flawless", path);
    m.emitted = count(j, "emitted", path);
    m.flagged_correct = count(j, "flagged_correct", path);
    m.budget_exhausted = count(j, "budget_exhausted", path);
    m.mean_interventions = num(j, "mean_interventions", path);
    m.mean_response_tokens = num(j, "mean_response_tokens", path);
    m.hint_tokens = count(j, "hint_tokens", path);
    m.generated_tokens = count(j, "generated_tokens", path);
    m.token_modification_fraction = num(j, "token_modification_fraction", path);
    m.reference_fraction = num(j, "reference_fraction", path);
    return m;
}

inline json to_json(const SplitPlan& plan) {
    json counts = json::object();
    for (const auto& [b, c] : plan.counts)
        counts[std::string(to_string(b))] = json{{"sft", c.sft}, {"rl", c.rl}, {"test", c.test}};
    return json{{"seed", plan.seed}, {"counts", std::move(counts)}};
}

inline SplitPlan split_plan_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    SplitPlan plan;
    plan.seed = count(j, "seed", path);
    const auto& counts = field(j, "counts", path);
    if (!counts.is_object())
        throw Error(ErrorKind::MalformedRecord, "expected object", join(path, "counts"));
    for (const auto& [name, c] : counts.items()) {
        auto cp = join(path, "counts." + name);
        auto b = parse_benchmark(name);
        if (!b) throw Error(ErrorKind::MalformedRecord, "unknown benchmark", cp);
        plan.counts[*b] = SplitCounts{count(c, "sft", cp), count(c, "rl", cp), count(c, "test", cp)};
    }
    return plan;
}

} // namespace calm
