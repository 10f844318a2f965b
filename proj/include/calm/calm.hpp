#pragma once

// Reasoner–Intervener correction loop: the intervener inspects a finished
// flow, names the earliest flaw and supplies an in-voice hint; the flow is
// cut back to that point, the hint appended, and generation resumes.

#include <cctype>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "calm/client.hpp"
#include "calm/flow.hpp"
#include "calm/grader.hpp"
#include "calm/model.hpp"
#include "calm/prompts.hpp"

namespace calm {

enum class VerdictDecision { NoIntervention, Intervene };

struct InterventionVerdict {
    VerdictDecision decision = VerdictDecision::NoIntervention;
    std::optional<TriggerType> trigger;
    std::optional<std::size_t> step_index;
    std::optional<std::size_t> char_offset;
    std::optional<std::string> hint_text;
    std::string rationale;

    friend bool operator==(const InterventionVerdict&, const InterventionVerdict&) = default;
};

inline std::string summarize(const InterventionVerdict& v) {
    if (v.decision == VerdictDecision::NoIntervention) return "NO INTERVENTION";
    std::string out = "Trigger " + std::to_string(trigger_number(*v.trigger)) + " at step " +
                      std::to_string(*v.step_index);
    if (v.char_offset && *v.char_offset > 0) out += ", offset " + std::to_string(*v.char_offset);
    return out + ": " + *v.hint_text;
}

struct CalmConfig {
    std::size_t max_interventions = 5;
    SamplingConfig reasoner_sampling = reasoner_sampling_defaults();
    SamplingConfig intervener_sampling = intervener_sampling_defaults();
    FlowBudgets budgets;
    double epsilon = kDefaultEpsilon;
    /// Show the reference answer to the intervener.
    bool include_ground_truth = true;

    void validate() const {
        if (max_interventions < 1)
            throw Error(ErrorKind::InvalidArgument, "max_interventions must be >= 1",
                        "max_interventions");
        reasoner_sampling.validate();
        intervener_sampling.validate();
        budgets.validate();
        if (!(epsilon > 0.0)) throw Error(ErrorKind::InvalidArgument, "epsilon must be positive", "epsilon");
    }
};

// ── Verdict parsing ─────────────────────────────────────────────────

namespace calm_detail {

inline std::string strip_decoration(std::string_view line) {
    std::string out;
    for (char c : line)
        if (c != '*' && c != '"' && c != '\'' && c != '`' && c != '.' && c != '#') out.push_back(c);
    auto b = out.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return out.substr(b, out.find_last_not_of(" \t\r") - b + 1);
}

inline std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

inline bool has_marker_line(std::string_view text, std::string_view marker) {
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        if (upper(strip_decoration(line)) == marker) return true;
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return false;
}

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    return std::string(s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1));
}

/// "Trigger <n> [(name)] at step <k>[, offset <c>]: <text>"
inline const std::regex& finding_pattern() {
    static const std::regex re(
        R"(\**\[?Trigger\s*(\d+)\]?\**\s*(?:\([^)\n]*\))?\s*(?:at|in|@)\s*step\s*(\d+)(?:\s*,?\s*(?:char(?:acter)?\s*)?offset\s*(\d+))?\**\s*[:\-]\s*)",
        std::regex::icase);
    return re;
}

struct Finding {
    long trigger;
    std::size_t step;
    std::optional<std::size_t> offset;
    std::string text;
};

/// Every finding in `text`; each one's text runs to the next finding, a
/// "Rationale:" line, or the end.
inline std::vector<Finding> findings(const std::string& text, std::string* rationale = nullptr) {
    std::vector<Finding> out;
    const auto& re = finding_pattern();
    std::vector<std::smatch> matches;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it)
        matches.push_back(*it);
    static const std::regex rationale_re(R"((^|\n)\s*\**Rationale\**\s*:\s*)", std::regex::icase);
    for (std::size_t i = 0; i < matches.size(); ++i) {
        const auto& m = matches[i];
        auto begin = static_cast<std::size_t>(m.position(0) + m.length(0));
        auto end = i + 1 < matches.size() ? static_cast<std::size_t>(matches[i + 1].position(0))
                                          : text.size();
        std::string body = text.substr(begin, end - begin);
        std::smatch rm;
        if (std::regex_search(body, rm, rationale_re)) {
            if (rationale && rationale->empty())
                *rationale = trim(std::string_view(body).substr(rm.position(0) + rm.length(0)));
            body = body.substr(0, rm.position(0));
        }
        Finding f;
        f.trigger = std::stol(m[1].str());
        f.step = static_cast<std::size_t>(std::stoul(m[2].str()));
        if (m[3].matched) f.offset = static_cast<std::size_t>(std::stoul(m[3].str()));
        f.text = trim(body);
        out.push_back(std::move(f));
    }
    return out;
}

} // namespace calm_detail

/// Parses an intervener reply; nullopt when it matches neither schema.
inline std::optional<InterventionVerdict> parse_verdict(const std::string& response) {
    using namespace calm_detail;
    if (has_marker_line(response, "NO INTERVENTION")) {
        InterventionVerdict v;
        v.rationale = trim(response);
        return v;
    }
    std::string rationale;
    auto found = findings(response, &rationale);
    if (!found.empty()) {
        const auto& f = found.front();
        auto trigger = trigger_from_number(f.trigger);
        if (!trigger || f.text.empty()) return std::nullopt;
        InterventionVerdict v;
        v.decision = VerdictDecision::Intervene;
        v.trigger = *trigger;
        v.step_index = f.step;
        v.char_offset = f.offset.value_or(0);
        v.hint_text = f.text;
        v.rationale = rationale.empty() ? f.text : rationale;
        return v;
    }
    if (upper(response).find("NO INTERVENTION") != std::string::npos) {
        InterventionVerdict v;
        v.rationale = trim(response);
        return v;
    }
    return std::nullopt;
}

inline std::string intervener_prompt(const Trajectory& t, const Problem& p, const PromptSet& prompts,
                                     bool include_ground_truth) {
    auto truth = include_ground_truth ? format_number(p.ground_truth) : std::string("not provided");
    auto transcript = render_numbered_transcript(t);
    return instantiate(prompts.intervener_template,
                       {{"problem", p.description}, {"transcript", transcript}, {"ground_truth", truth}});
}

/// Asks the intervener for a verdict on `t`. An unparseable or
/// out-of-range reply is retried once before UnparseableVerdict.
inline InterventionVerdict evaluate_trajectory(const Trajectory& t, const Problem& p,
                                               ModelClient& intervener, const CalmConfig& cfg = {},
                                               const PromptSet& prompts = {}) {
    std::vector<ChatMessage> messages{
        {ChatRole::User, intervener_prompt(t, p, prompts, cfg.include_ground_truth)}};
    RequestContext ctx{ModelRole::Intervener, t.id.empty() ? p.id : t.id};
    std::string last;
    for (int attempt = 0; attempt < 2; ++attempt) {
        auto completion = intervener.complete(messages, cfg.intervener_sampling, ctx);
        last = completion.text;
        auto v = parse_verdict(completion.text);
        if (!v) continue;
        if (v->decision == VerdictDecision::Intervene && *v->step_index >= t.segment_count()) continue;
        return *v;
    }
    throw Error(ErrorKind::UnparseableVerdict, "intervener reply matches no verdict schema: " +
                                                   last.substr(0, 200),
                t.id);
}

// ── Localized revision ──────────────────────────────────────────────

struct ResumptionContext {
    std::vector<ChatMessage> messages;
    std::string prefill;
    FlowStart start;
    Hint hint;
};

/// Cuts `t` back to (step_index, char_offset), appends the hint in the
/// reasoner's voice, and returns what generation resumes from. Hints that
/// lay past the cut are dropped with the text they lived in.
inline ResumptionContext splice_hint(const Trajectory& t, const InterventionVerdict& v,
                                     std::size_t iteration, const std::string& system_prompt,
                                     const std::string& user_prompt, bool prefill_supported = true) {
    if (v.decision != VerdictDecision::Intervene || !v.trigger || !v.step_index || !v.hint_text ||
        v.hint_text->empty())
        throw Error(ErrorKind::InvalidArgument, "splice requires an intervention verdict", "verdict");
    const std::size_t step = *v.step_index;
    const std::size_t offset = v.char_offset.value_or(0);
    if (step >= t.segment_count())
        throw Error(ErrorKind::InvalidSplicePoint, "step index past end of trajectory",
                    "step_index " + std::to_string(step));
    const auto& text = segment_reasoning(t, step);
    if (offset > text.size())
        throw Error(ErrorKind::InvalidSplicePoint, "offset past end of step reasoning",
                    "char_offset " + std::to_string(offset));

    ResumptionContext ctx;
    ctx.start.steps.assign(t.steps.begin(), t.steps.begin() + static_cast<std::ptrdiff_t>(step));
    for (const auto& h : t.hints) {
        if (h.step_index < step) {
            ctx.start.hints.push_back(h);
        } else if (h.step_index == step) {
            auto pos = locate_hint(t, h);
            if (pos && *pos + h.text.size() <= offset) ctx.start.hints.push_back(h);
        }
    }
    std::string pending = text.substr(0, offset);
    if (!pending.empty() && !std::isspace(static_cast<unsigned char>(pending.back()))) pending += '\n';
    pending += *v.hint_text;
    if (!std::isspace(static_cast<unsigned char>(pending.back()))) pending += '\n';
    ctx.start.pending = std::move(pending);

    ctx.hint = Hint{iteration, step, offset, *v.trigger, *v.hint_text};
    ctx.start.hints.push_back(ctx.hint);
    ctx.prefill = render_steps(ctx.start.steps) + ctx.start.pending;
    ctx.messages = continuation_messages(system_prompt, user_prompt, ctx.prefill, prefill_supported);
    return ctx;
}

// ── Loop ────────────────────────────────────────────────────────────

/// Failure inside the loop, tagged with the iteration it happened in.
class CalmFailure : public Error {
public:
    CalmFailure(ErrorKind kind, const std::string& what, std::size_t iteration,
                std::optional<Trajectory> partial)
        : Error(kind, what, "iteration " + std::to_string(iteration)),
          iteration_(iteration),
          partial_(std::move(partial)) {}

    std::size_t iteration() const { return iteration_; }
    const std::optional<Trajectory>& partial() const { return partial_; }

private:
    std::size_t iteration_;
    std::optional<Trajectory> partial_;
};

inline CalmOutcome calm_loop(const Problem& p, ModelClient& reasoner, ModelClient& intervener,
                             Runner& runner, const CalmConfig& cfg = {},
                             const PromptSet& prompts = {}) {
    cfg.validate();
    auto request = make_flow_request(p, prompts, cfg.reasoner_sampling);
    CalmOutcome out;
    out.system_prompt = request.system_prompt;
    out.user_prompt = request.user_prompt;

    std::size_t iteration = 0;
    auto guarded_flow = [&](FlowStart start) {
        try {
            return run_flow(request, reasoner, runner, cfg.budgets, std::move(start));
        } catch (const FlowFailure& f) {
            throw CalmFailure(ErrorKind::GenerationFailed, f.what(), iteration, f.partial());
        }
    };

    Trajectory current = guarded_flow({});
    bool exhausted = false;
    for (;; ++iteration) {
        InterventionVerdict verdict;
        try {
            verdict = evaluate_trajectory(current, p, intervener, cfg, prompts);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::UnparseableVerdict)
                throw CalmFailure(ErrorKind::UnparseableVerdict, e.what(), iteration, current);
            if (flow_detail::is_endpoint_error(e.kind()))
                throw CalmFailure(ErrorKind::GenerationFailed, e.what(), iteration, current);
            throw;
        }
        bool intervene = verdict.decision == VerdictDecision::Intervene;
        out.verdict_log.push_back(VerdictLogEntry{iteration, summarize(verdict), intervene});
        if (!intervene) break;
        if (out.interventions_used == cfg.max_interventions) {
            exhausted = true;
            break;
        }
        auto ctx = splice_hint(current, verdict, iteration, request.system_prompt,
                               request.user_prompt, reasoner.supports_prefill());
        current = guarded_flow(std::move(ctx.start));
        ++out.interventions_used;
    }

    out.grading = grade_text(current.final_text, p.ground_truth, cfg.epsilon);
    out.trajectory = std::move(current);
    bool correct = out.grading.reward == 1;
    // Still flawed after the last allowed intervention: discarded whatever
    // the answer. Correct ones are kept aside for audit by the emitter.
    if (exhausted)
        out.status = CalmStatus::DiscardedBudgetExhausted;
    else
        out.status = correct ? CalmStatus::GoldenAccepted : CalmStatus::DiscardedIncorrect;
    return out;
}

/// Share of generated tokens contributed by hints.
inline double token_modification_fraction(const CalmOutcome& o) {
    const auto& t = o.trajectory;
    if (t.generated_token_count == 0) return 0.0;
    return static_cast<double>(t.hint_token_count) / static_cast<double>(t.generated_token_count);
}

} // namespace calm
