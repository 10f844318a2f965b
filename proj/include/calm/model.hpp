#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calm/error.hpp"
#include "calm/tokenizer.hpp"

namespace calm {

// ── Benchmarks and splits ───────────────────────────────────────────

enum class Benchmark {
    NL4Opt,
    MamoEasy,
    MamoComplex,
    IndustryOR,
    OptMath,
    OptiBench,
    ComplexOR,
    NLP4LP,
};

/// Reporting order: the five headline benchmarks first, then the rest.
inline constexpr std::array<Benchmark, 8> kAllBenchmarks = {
    Benchmark::NL4Opt,    Benchmark::MamoEasy,  Benchmark::MamoComplex,
    Benchmark::IndustryOR, Benchmark::OptMath,  Benchmark::OptiBench,
    Benchmark::ComplexOR, Benchmark::NLP4LP,
};

inline std::string_view to_string(Benchmark b) {
    switch (b) {
        case Benchmark::NL4Opt: return "NL4Opt";
        case Benchmark::MamoEasy: return "MAMO-Easy";
        case Benchmark::MamoComplex: return "MAMO-Complex";
        case Benchmark::IndustryOR: return "IndustryOR";
        case Benchmark::OptMath: return "OptMath";
        case Benchmark::OptiBench: return "OptiBench";
        case Benchmark::ComplexOR: return "ComplexOR";
        case Benchmark::NLP4LP: return "NLP4LP";
    }
    return "?";
}

namespace detail {
inline std::string fold_name(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '-' || c == '_' || c == ' ') continue;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}
} // namespace detail

/// Accepts the canonical names case-insensitively, ignoring '-', '_' and spaces.
inline std::optional<Benchmark> parse_benchmark(std::string_view name) {
    auto folded = detail::fold_name(name);
    for (auto b : kAllBenchmarks)
        if (detail::fold_name(to_string(b)) == folded) return b;
    return std::nullopt;
}

inline std::size_t benchmark_rank(Benchmark b) {
    return static_cast<std::size_t>(b);
}

enum class Split { SFT, RL, Test, Unassigned };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::SFT: return "SFT";
        case Split::RL: return "RL";
        case Split::Test: return "Test";
        case Split::Unassigned: return "Unassigned";
    }
    return "?";
}

inline std::optional<Split> parse_split(std::string_view name) {
    for (auto s : {Split::SFT, Split::RL, Split::Test, Split::Unassigned})
        if (detail::fold_name(to_string(s)) == detail::fold_name(name)) return s;
    return std::nullopt;
}

struct Problem {
    std::string id;
    Benchmark benchmark = Benchmark::NL4Opt;
    std::string description;
    double ground_truth = 0.0;
    Split split = Split::Unassigned;

    friend bool operator==(const Problem&, const Problem&) = default;
};

inline void validate(const Problem& p) {
    if (p.id.empty())
        throw Error(ErrorKind::InvariantViolation, "problem id is empty", "id");
    if (!std::isfinite(p.ground_truth))
        throw Error(ErrorKind::InvariantViolation, "ground truth is not finite",
                    "ground_truth");
}

/// Checks id uniqueness across a loaded corpus.
inline void validate_corpus(const std::vector<Problem>& corpus) {
    std::vector<std::string_view> ids;
    ids.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        try {
            validate(corpus[i]);
        } catch (const Error& e) {
            throw Error(e.kind(), e.what(), "[" + std::to_string(i) + "]." + e.path());
        }
        ids.push_back(corpus[i].id);
    }
    std::sort(ids.begin(), ids.end());
    auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end())
        throw Error(ErrorKind::InvariantViolation,
                    "duplicate problem id '" + std::string(*dup) + "'", "id");
}

// ── Flaw taxonomy ───────────────────────────────────────────────────

enum class TriggerType : int {
    PrematureNlSolving = 1,
    FragmentedCoding = 2,
    RedundantManualVerification = 3,
    LackOfSanityCheck = 4,
    FlawedReasoningOrModeling = 5,
    ImplementationError = 6,
    ProtocolViolation = 7,
};

inline constexpr std::array<TriggerType, 7> kAllTriggers = {
    TriggerType::PrematureNlSolving,       TriggerType::FragmentedCoding,
    TriggerType::RedundantManualVerification, TriggerType::LackOfSanityCheck,
    TriggerType::FlawedReasoningOrModeling, TriggerType::ImplementationError,
    TriggerType::ProtocolViolation,
};

enum class FlawCategory { CodeUtilizationDistrust, LackOfOrExpertise, Procedural };

inline constexpr std::array<FlawCategory, 3> kAllCategories = {
    FlawCategory::CodeUtilizationDistrust, FlawCategory::LackOfOrExpertise,
    FlawCategory::Procedural,
};

inline FlawCategory category_of(TriggerType t) {
    switch (t) {
        case TriggerType::PrematureNlSolving:
        case TriggerType::FragmentedCoding:
        case TriggerType::RedundantManualVerification:
            return FlawCategory::CodeUtilizationDistrust;
        case TriggerType::LackOfSanityCheck:
        case TriggerType::FlawedReasoningOrModeling:
        case TriggerType::ImplementationError:
            return FlawCategory::LackOfOrExpertise;
        case TriggerType::ProtocolViolation:
            return FlawCategory::Procedural;
    }
    return FlawCategory::Procedural;
}

inline int trigger_number(TriggerType t) { return static_cast<int>(t); }

inline std::optional<TriggerType> trigger_from_number(long n) {
    if (n < 1 || n > 7) return std::nullopt;
    return static_cast<TriggerType>(n);
}

inline std::string_view trigger_name(TriggerType t) {
    switch (t) {
        case TriggerType::PrematureNlSolving: return "Premature NL Solving";
        case TriggerType::FragmentedCoding: return "Fragmented Coding";
        case TriggerType::RedundantManualVerification: return "Redundant Manual Verification";
        case TriggerType::LackOfSanityCheck: return "Lack of Sanity Check/Reflection";
        case TriggerType::FlawedReasoningOrModeling: return "Flawed Reasoning or Modeling";
        case TriggerType::ImplementationError: return "Implementation Error";
        case TriggerType::ProtocolViolation: return "Protocol Violation";
    }
    return "?";
}

inline std::string_view to_string(FlawCategory c) {
    switch (c) {
        case FlawCategory::CodeUtilizationDistrust: return "CodeUtilizationDistrust";
        case FlawCategory::LackOfOrExpertise: return "LackOfOrExpertise";
        case FlawCategory::Procedural: return "Procedural";
    }
    return "?";
}

// ── Reasoning flow ──────────────────────────────────────────────────

/// One (s_t, a_t, o_t) triple. `output` holds the formatted output block
/// exactly as it was spliced into the transcript.
struct Step {
    std::string reasoning;
    std::optional<std::string> code;
    std::optional<std::string> output;

    friend bool operator==(const Step&, const Step&) = default;
};

struct Hint {
    std::size_t iteration = 0;
    /// Segment index: steps are 0..n-1, the final answer segment is n.
    std::size_t step_index = 0;
    std::size_t char_offset = 0;
    TriggerType trigger = TriggerType::FlawedReasoningOrModeling;
    std::string text;

    friend bool operator==(const Hint&, const Hint&) = default;
};

struct Trajectory {
    std::string id;
    std::string problem_id;
    std::vector<Step> steps;
    std::vector<Hint> hints;
    std::string final_text;
    std::optional<double> final_answer;
    std::size_t generated_token_count = 0;
    std::size_t hint_token_count = 0;
    std::size_t code_execution_count = 0;
    /// A code block was refused because the execution budget was spent.
    bool budget_capped = false;
    /// Generation stopped on the response token budget.
    bool token_capped = false;
    /// Set when the flow aborted; the trajectory is then a partial record.
    std::optional<std::string> failure;

    std::size_t segment_count() const { return steps.size() + 1; }

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

inline constexpr std::string_view kCodeFenceOpen = "```python\n";
inline constexpr std::string_view kFenceClose = "\n```";

inline std::string render_code_block(std::string_view code) {
    std::string out;
    out.reserve(code.size() + 16);
    out += kCodeFenceOpen;
    out += code;
    out += kFenceClose;
    return out;
}

/// reasoning ⊕ code fence ⊕ output fence, in the canonical layout the
/// reflective engine emits.
inline std::string render_step(const Step& s) {
    std::string out = s.reasoning;
    if (s.code) {
        out += render_code_block(*s.code);
        out += '\n';
    }
    if (s.output) {
        out += *s.output;
        out += '\n';
    }
    return out;
}

inline std::string render_steps(const std::vector<Step>& steps) {
    std::string out;
    for (const auto& s : steps) out += render_step(s);
    return out;
}

inline std::string render_transcript(const Trajectory& t) {
    return render_steps(t.steps) + t.final_text;
}

/// Text of the reasoning part of segment `index` (final_text for the last).
inline const std::string& segment_reasoning(const Trajectory& t, std::size_t index) {
    return index < t.steps.size() ? t.steps[index].reasoning : t.final_text;
}

/// Position of `h` inside its segment's reasoning text, if still present.
inline std::optional<std::size_t> locate_hint(const Trajectory& t, const Hint& h) {
    if (h.step_index >= t.segment_count()) return std::nullopt;
    const auto& text = segment_reasoning(t, h.step_index);
    auto pos = text.find(h.text, std::min(h.char_offset, text.size()));
    if (pos == std::string::npos) return std::nullopt;
    return pos;
}

inline std::size_t count_hint_tokens(const std::vector<Hint>& hints, const Tokenizer& tok) {
    std::size_t n = 0;
    for (const auto& h : hints) n += tok.count(h.text);
    return n;
}

/// Tokens of reasoner text plus hints, excluding execution outputs. Hints
/// are counted as their own runs so the hint count never exceeds the total.
inline std::size_t count_generated_tokens(const Trajectory& t, const Tokenizer& tok) {
    std::size_t n = 0;
    for (std::size_t seg = 0; seg < t.segment_count(); ++seg) {
        const auto& text = segment_reasoning(t, seg);
        std::vector<std::pair<std::size_t, std::size_t>> spans;
        for (const auto& h : t.hints) {
            if (h.step_index != seg) continue;
            if (auto pos = locate_hint(t, h)) spans.emplace_back(*pos, *pos + h.text.size());
        }
        std::sort(spans.begin(), spans.end());
        std::size_t cursor = 0;
        for (auto [b, e] : spans) {
            if (b < cursor) continue;
            n += tok.count(std::string_view(text).substr(cursor, b - cursor));
            n += tok.count(std::string_view(text).substr(b, e - b));
            cursor = e;
        }
        n += tok.count(std::string_view(text).substr(cursor));
        if (seg < t.steps.size() && t.steps[seg].code) n += tok.count(*t.steps[seg].code);
    }
    return n;
}

/// Recomputes the derived counters from the content.
inline void refresh_counts(Trajectory& t, const Tokenizer& tok) {
    t.code_execution_count = static_cast<std::size_t>(
        std::count_if(t.steps.begin(), t.steps.end(),
                      [](const Step& s) { return s.output.has_value(); }));
    t.hint_token_count = count_hint_tokens(t.hints, tok);
    t.generated_token_count = count_generated_tokens(t, tok);
}

inline void validate(const Step& s, const std::string& path = "step") {
    if (s.output && !s.code)
        throw Error(ErrorKind::InvariantViolation, "output present without code",
                    path + ".output");
}

/// `execution_budget`, when given, bounds code_execution_count.
inline void validate(const Trajectory& t,
                     std::optional<std::size_t> execution_budget = std::nullopt) {
    std::size_t executed = 0;
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        validate(t.steps[i], "steps[" + std::to_string(i) + "]");
        if (t.steps[i].output) ++executed;
    }
    if (executed != t.code_execution_count)
        throw Error(ErrorKind::InvariantViolation,
                    "code_execution_count " + std::to_string(t.code_execution_count) +
                        " but " + std::to_string(executed) + " steps carry output",
                    "code_execution_count");
    if (execution_budget && t.code_execution_count > *execution_budget)
        throw Error(ErrorKind::InvariantViolation, "execution budget exceeded",
                    "code_execution_count");
    if (t.hint_token_count > t.generated_token_count)
        throw Error(ErrorKind::InvariantViolation,
                    "hint tokens exceed generated tokens", "hint_token_count");
    for (std::size_t i = 0; i < t.hints.size(); ++i) {
        const auto& h = t.hints[i];
        std::string path = "hints[" + std::to_string(i) + "]";
        if (h.text.empty())
            throw Error(ErrorKind::InvariantViolation, "hint text is empty", path + ".text");
        if (i > 0 && h.iteration <= t.hints[i - 1].iteration)
            throw Error(ErrorKind::InvariantViolation,
                        "hint iterations must be strictly increasing", path + ".iteration");
        if (h.step_index >= t.segment_count())
            throw Error(ErrorKind::InvariantViolation, "hint step_index out of range",
                        path + ".step_index");
    }
    if (t.final_answer && !std::isfinite(*t.final_answer))
        throw Error(ErrorKind::InvariantViolation, "final answer is not finite",
                    "final_answer");
}

// ── Grading ─────────────────────────────────────────────────────────

enum class GradeNote { NoBoxedAnswer, NonNumeric, ZeroTruthAbsoluteFallback };

inline std::string_view to_string(GradeNote n) {
    switch (n) {
        case GradeNote::NoBoxedAnswer: return "NoBoxedAnswer";
        case GradeNote::NonNumeric: return "NonNumeric";
        case GradeNote::ZeroTruthAbsoluteFallback: return "ZeroTruthAbsoluteFallback";
    }
    return "?";
}

struct GradingResult {
    std::optional<double> extracted_answer;
    /// |a - t| / |t|; the absolute error |a| when the truth is zero.
    std::optional<double> relative_error;
    int reward = 0;
    std::optional<GradeNote> failure_reason;

    friend bool operator==(const GradingResult&, const GradingResult&) = default;
};

// ── Curation outcome ────────────────────────────────────────────────

enum class CalmStatus {
    GoldenAccepted,
    CorrectButFlagged,
    DiscardedBudgetExhausted,
    DiscardedIncorrect,
};

inline std::string_view to_string(CalmStatus s) {
    switch (s) {
        case CalmStatus::GoldenAccepted: return "GoldenAccepted";
        case CalmStatus::CorrectButFlagged: return "CorrectButFlagged";
        case CalmStatus::DiscardedBudgetExhausted: return "DiscardedBudgetExhausted";
        case CalmStatus::DiscardedIncorrect: return "DiscardedIncorrect";
    }
    return "?";
}

struct VerdictLogEntry {
    std::size_t iteration = 0;
    std::string verdict;
    bool intervene = false;

    friend bool operator==(const VerdictLogEntry&, const VerdictLogEntry&) = default;
};

struct CalmOutcome {
    Trajectory trajectory;
    CalmStatus status = CalmStatus::DiscardedIncorrect;
    std::size_t interventions_used = 0;
    std::vector<VerdictLogEntry> verdict_log;
    GradingResult grading;
    /// Prompts the reasoner was started with, kept for record emission.
    std::string system_prompt;
    std::string user_prompt;

    bool final_verdict_clean() const {
        return !verdict_log.empty() && !verdict_log.back().intervene;
    }

    friend bool operator==(const CalmOutcome&, const CalmOutcome&) = default;
};

inline void validate(const CalmOutcome& o,
                     std::optional<std::size_t> max_interventions = std::nullopt) {
    validate(o.trajectory);
    if (o.status == CalmStatus::GoldenAccepted &&
        (!o.final_verdict_clean() || o.grading.reward != 1))
        throw Error(ErrorKind::InvariantViolation,
                    "GoldenAccepted requires a clean final verdict and reward 1", "status");
    if (max_interventions && o.interventions_used > *max_interventions)
        throw Error(ErrorKind::InvariantViolation, "interventions exceed maximum",
                    "interventions_used");
}

// ── Flaw reports ────────────────────────────────────────────────────

struct FlawInstance {
    TriggerType trigger = TriggerType::FlawedReasoningOrModeling;
    std::size_t step_index = 0;
    std::string rationale;

    friend bool operator==(const FlawInstance&, const FlawInstance&) = default;
};

struct FlawReport {
    std::string trajectory_id;
    std::vector<FlawInstance> instances;

    friend bool operator==(const FlawReport&, const FlawReport&) = default;
};

inline void validate(const FlawReport& r, std::size_t segment_count) {
    for (std::size_t i = 0; i < r.instances.size(); ++i)
        if (r.instances[i].step_index >= segment_count)
            throw Error(ErrorKind::InvariantViolation, "step_index out of trajectory bounds",
                        "instances[" + std::to_string(i) + "].step_index");
}

/// Trajectory ids are "<problem_id>" or "<problem_id>#<suffix>".
inline std::string_view problem_id_of(std::string_view trajectory_id) {
    auto hash = trajectory_id.rfind('#');
    return hash == std::string_view::npos ? trajectory_id : trajectory_id.substr(0, hash);
}

} // namespace calm
