#pragma once

// Reflective generation flow: generate until a code fence closes, execute
// the tail block, splice its output back, resume, until the model answers
// or a budget runs out.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "calm/client.hpp"
#include "calm/error.hpp"
#include "calm/model.hpp"
#include "calm/prompts.hpp"
#include "calm/sandbox.hpp"
#include "calm/tokenizer.hpp"

namespace calm {

struct FlowBudgets {
    std::size_t max_executions = 4;
    std::size_t max_response_tokens = 16384;
    ExecutionLimits limits;

    void validate() const {
        limits.validate();
        if (max_response_tokens == 0)
            throw Error(ErrorKind::InvalidArgument, "max_response_tokens must be >= 1",
                        "max_response_tokens");
        if (max_executions > limits.max_executions_per_trajectory)
            throw Error(ErrorKind::InvalidArgument,
                        "max_executions exceeds the sandbox per-trajectory limit",
                        "max_executions");
    }

    static FlowBudgets with_executions(std::size_t n) {
        FlowBudgets b;
        b.max_executions = n;
        b.limits.max_executions_per_trajectory = n == 0 ? 1 : n;
        return b;
    }
};

/// The reasoner stops at the fence close so output can be spliced in.
inline constexpr std::string_view kFenceStop = "```\n";

// ── Answer extraction ───────────────────────────────────────────────

struct BoxedAnswer {
    bool has_box = false;
    std::optional<double> value;
    std::string raw;
};

namespace flow_detail {

inline void erase_all(std::string& s, std::string_view what) {
    std::size_t pos;
    while ((pos = s.find(what)) != std::string::npos) s.erase(pos, what.size());
}

inline std::optional<double> parse_plain_number(std::string s) {
    for (auto sym : {"\\$", "$", "\\%", "%", "\xE2\x82\xAC" /* € */, "\xC2\xA3" /* £ */,
                     "\xC2\xA5" /* ¥ */, "\\,", "\\!", ","})
        erase_all(s, sym);
    auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return std::nullopt;
    s = s.substr(first, s.find_last_not_of(" \t\r\n") - first + 1);
    if (s.empty()) return std::nullopt;
    for (char c : s)
        if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+' ||
              c == 'e' || c == 'E'))
            return std::nullopt;
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

} // namespace flow_detail

/// Content of the last \boxed{...} expression with balanced braces.
inline BoxedAnswer inspect_boxed_answer(std::string_view text) {
    BoxedAnswer out;
    constexpr std::string_view kBox = "\\boxed{";
    auto pos = text.rfind(kBox);
    while (pos != std::string_view::npos) {
        std::size_t depth = 1;
        std::size_t i = pos + kBox.size();
        for (; i < text.size() && depth > 0; ++i) {
            if (text[i] == '{') ++depth;
            else if (text[i] == '}') --depth;
        }
        if (depth == 0) {
            out.has_box = true;
            auto start = pos + kBox.size();
            out.raw = std::string(text.substr(start, i - 1 - start));
            out.value = flow_detail::parse_plain_number(out.raw);
            return out;
        }
        if (pos == 0) break;
        pos = text.rfind(kBox, pos - 1);
    }
    return out;
}

inline std::optional<double> extract_final_answer(std::string_view final_text) {
    return inspect_boxed_answer(final_text).value;
}

// ── Flow ────────────────────────────────────────────────────────────

/// Thrown when the endpoint or runner fails mid-flow. Carries the partial
/// trajectory with its failure marker set.
class FlowFailure : public Error {
public:
    FlowFailure(const Error& cause, Trajectory partial)
        : Error(ErrorKind::GenerationFailed, cause.what(), partial.id),
          cause_kind_(cause.kind()),
          partial_(std::move(partial)) {}

    ErrorKind cause_kind() const { return cause_kind_; }
    const Trajectory& partial() const { return partial_; }

private:
    ErrorKind cause_kind_;
    Trajectory partial_;
};

struct FlowRequest {
    std::string trajectory_id;
    std::string problem_id;
    std::string system_prompt;
    std::string user_prompt;
    /// Routing key for the client; defaults to trajectory_id.
    std::string conversation;
    SamplingConfig sampling = reasoner_sampling_defaults();
};

/// Where generation resumes: kept steps plus in-progress text of the next
/// segment (e.g. a truncated step followed by a hint).
struct FlowStart {
    std::vector<Step> steps;
    std::string pending;
    std::vector<Hint> hints;
};

inline FlowRequest make_flow_request(const Problem& p, const PromptSet& prompts,
                                     SamplingConfig sampling, std::string trajectory_id = {}) {
    FlowRequest r;
    r.trajectory_id = trajectory_id.empty() ? p.id : std::move(trajectory_id);
    r.problem_id = p.id;
    r.system_prompt = prompts.reasoner_system;
    r.user_prompt = prompts.reasoner_user(p);
    r.conversation = r.trajectory_id;
    r.sampling = std::move(sampling);
    return r;
}

namespace flow_detail {

inline std::size_t tokens_so_far(const std::vector<Step>& steps, const std::string& pending,
                                 const Tokenizer& tok) {
    std::size_t n = tok.count(pending);
    for (const auto& s : steps) {
        n += tok.count(s.reasoning);
        if (s.code) n += tok.count(*s.code);
    }
    return n;
}

inline bool is_endpoint_error(ErrorKind k) {
    return k == ErrorKind::EndpointUnavailable || k == ErrorKind::RateLimited ||
           k == ErrorKind::MalformedResponse || k == ErrorKind::RunnerUnavailable;
}

} // namespace flow_detail

inline Trajectory run_flow(const FlowRequest& req, ModelClient& reasoner, Runner& runner,
                           const FlowBudgets& budgets, FlowStart start = {},
                           const Tokenizer& tok = *default_tokenizer()) {
    budgets.validate();
    std::vector<Step> steps = std::move(start.steps);
    std::string pending = std::move(start.pending);
    std::size_t executed = 0;
    for (const auto& s : steps)
        if (s.output) ++executed;
    ExecutionSession session(runner, budgets.limits, executed);

    Trajectory t;
    t.id = req.trajectory_id;
    t.problem_id = req.problem_id;
    t.hints = std::move(start.hints);

    auto finish = [&](std::string final_text) {
        t.steps = std::move(steps);
        t.final_text = std::move(final_text);
        t.final_answer = extract_final_answer(t.final_text);
        refresh_counts(t, tok);
        validate(t, budgets.max_executions);
        return t;
    };

    const std::string conversation = req.conversation.empty() ? req.trajectory_id : req.conversation;
    for (;;) {
        auto used = flow_detail::tokens_so_far(steps, pending, tok);
        if (used >= budgets.max_response_tokens) {
            t.token_capped = true;
            return finish(std::move(pending));
        }
        SamplingConfig cfg = req.sampling;
        cfg.max_tokens = budgets.max_response_tokens - used;
        if (reasoner.supports_stop()) cfg.stop_sequences = {std::string(kFenceStop)};
        auto messages = continuation_messages(req.system_prompt, req.user_prompt,
                                              render_steps(steps) + pending,
                                              reasoner.supports_prefill());
        Completion c;
        try {
            c = reasoner.complete(messages, cfg, RequestContext{ModelRole::Reasoner, conversation});
        } catch (const Error& e) {
            if (!flow_detail::is_endpoint_error(e.kind())) throw;
            t.failure = std::string("generation failed: ") + e.what();
            throw FlowFailure(e, finish(std::move(pending)));
        }

        std::string text = std::move(c.text);
        if (c.finish == FinishReason::Stop && c.stop_hit) text += *c.stop_hit;
        if (!reasoner.supports_stop()) text = truncate_after_first_block(text);
        std::string segment = pending + text;
        pending.clear();

        std::optional<CodeBlock> block;
        try {
            block = extract_code_block(segment);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::UnterminatedFence) throw;
            t.failure = "unterminated code fence";
            if (c.finish == FinishReason::Length) t.token_capped = true;
            return finish(std::move(segment));
        }

        if (!block) {
            // Stopped on a fence that is not a python block: keep generating.
            if (c.finish == FinishReason::Stop) {
                pending = std::move(segment);
                continue;
            }
            if (c.finish == FinishReason::Length) t.token_capped = true;
            return finish(std::move(segment));
        }

        Step step;
        step.reasoning = segment.substr(0, block->begin);
        step.code = block->code;
        if (session.used() < budgets.max_executions) {
            SandboxResult result;
            try {
                result = session.execute(*step.code);
            } catch (const Error& e) {
                if (!flow_detail::is_endpoint_error(e.kind())) throw;
                steps.push_back(std::move(step));
                t.failure = std::string("execution failed: ") + e.what();
                throw FlowFailure(e, finish({}));
            }
            step.output = format_output_block(result);
        } else {
            t.budget_capped = true;
        }
        steps.push_back(std::move(step));
    }
}

inline Trajectory run_reflective_flow(const Problem& p, ModelClient& reasoner, Runner& runner,
                                      const FlowBudgets& budgets, const PromptSet& prompts = {},
                                      SamplingConfig sampling = reasoner_sampling_defaults(),
                                      std::string trajectory_id = {}) {
    return run_flow(make_flow_request(p, prompts, std::move(sampling), std::move(trajectory_id)),
                    reasoner, runner, budgets);
}

} // namespace calm
