#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "calm/error.hpp"
#include "calm/model.hpp"
#include "calm/record.hpp"

namespace calm {

inline constexpr std::string_view kDefaultReasonerTemplate = R"(You are an expert in operations research and mathematical optimization.

Solve the optimization problem below. Think step by step:
1. Identify the decision variables, objective, and constraints, and write down the mathematical model. Pay attention to variable domains (integer, binary, continuous) and units.
2. Implement the whole model in one self-contained Python program using a solver library such as `pulp`, and print the optimal objective value.
3. Read the solver output and check that the result is plausible before answering.

Tool protocol:
- Put code in a fenced block that starts with ```python and ends with ```.
- Each code block is executed in a fresh interpreter; variables do not carry over between blocks.
- The execution result is inserted after your block as a ```output block.
- You may execute code at most 4 times.

Answer protocol: end with the optimal objective value alone inside \boxed{}, on its own line, with no units or extra words, for example
\boxed{2800}

Problem:
{problem}
)";

inline constexpr std::string_view kDefaultIntervenerTemplate = R"(You supervise a reasoning model that solves optimization modeling problems with a Python code interpreter. Examine its reasoning flow and decide whether it deviates from an expert workflow.

Expert workflow: formulate a correct mathematical model, implement it in one complete solver program, run it, sanity-check the solver result at a high level, and state the final answer alone in \boxed{}.

Deviation triggers:
- Trigger 1 (Premature NL Solving): after formulating the model, solves it by hand in natural language instead of writing solver code.
- Trigger 2 (Fragmented Coding): writes small, non-executable, or several solver-running code blocks instead of one comprehensive program.
- Trigger 3 (Redundant Manual Verification): after a solver output, recomputes by hand the exact results the solver already produced.
- Trigger 4 (Lack of Sanity Check/Reflection): takes a correct code output straight to the final answer without reflecting on plausibility.
- Trigger 5 (Flawed Reasoning or Modeling): wrong model, semantic misunderstanding, or missing constraints such as integrality.
- Trigger 6 (Implementation Error): the model is right but the code is buggy or does not implement it faithfully.
- Trigger 7 (Protocol Violation): breaks an explicit instruction, e.g. the boxed answer is embedded in a sentence.

The flow is split into numbered steps, each introduced by a line "[Step k]". Report only the earliest deviation.

Reply in exactly one of these formats:
NO INTERVENTION
or
Trigger <n> at step <k>: <hint>
Rationale: <one sentence>

Write <hint> as one or two sentences in the model's own first-person voice, as if it had the thought itself, so the reasoning can continue from it. Optionally write "Trigger <n> at step <k>, offset <c>: <hint>" to keep the first <c> characters of step k.

Problem:
{problem}

Reference answer: {ground_truth}

Reasoning flow:
{transcript}
)";

inline constexpr std::string_view kDefaultQuantificationTemplate = R"(You are a static classifier of reasoning flaws in optimization modeling solutions. Analyze the completed response below and list every flaw you detect. Do not suggest fixes.

Flaw types:
- Trigger 1 (Premature NL Solving): solves the formulated model by hand instead of writing solver code.
- Trigger 2 (Fragmented Coding): small, non-executable, or multiple solver-running code blocks instead of one program.
- Trigger 3 (Redundant Manual Verification): recomputes by hand results the solver already produced.
- Trigger 4 (Lack of Sanity Check/Reflection): no plausibility reflection on a correct code output before answering.
- Trigger 5 (Flawed Reasoning or Modeling): wrong model, misunderstanding, or missing constraints.
- Trigger 6 (Implementation Error): correct model implemented incorrectly in code.
- Trigger 7 (Protocol Violation): explicit instruction broken, e.g. the boxed answer embedded in a sentence.

The response is split into numbered steps, each introduced by a line "[Step k]".

Reply with one line per detected flaw:
Trigger <n> at step <k>: <short rationale>
or, if there are none, the single line:
NO FLAWS

Problem:
{problem}

Response:
{transcript}
)";

/// Single-pass substitution of "{name}" placeholders; text inserted for one
/// placeholder is never rescanned for another.
inline std::string instantiate(std::string_view text,
                               std::initializer_list<std::pair<std::string_view, std::string_view>> values) {
    std::string out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (pos < text.size()) {
        bool replaced = false;
        if (text[pos] == '{') {
            for (const auto& [name, value] : values) {
                if (text.compare(pos + 1, name.size(), name) == 0 &&
                    pos + 1 + name.size() < text.size() && text[pos + 1 + name.size()] == '}') {
                    out += value;
                    pos += name.size() + 2;
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) out.push_back(text[pos++]);
    }
    return out;
}

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.15g", v);
    return buf;
}

struct PromptSet {
    std::string reasoner_system;
    std::string reasoner_template = std::string(kDefaultReasonerTemplate);
    std::string intervener_template = std::string(kDefaultIntervenerTemplate);
    std::string quantification_template = std::string(kDefaultQuantificationTemplate);

    std::string reasoner_user(const Problem& p) const {
        return instantiate(reasoner_template, {{"problem", p.description}});
    }
};

/// Loads a template file and checks that each required placeholder occurs.
inline std::string load_template(const std::filesystem::path& path,
                                 std::initializer_list<std::string_view> required) {
    auto text = read_file(path);
    for (auto name : required)
        if (text.find("{" + std::string(name) + "}") == std::string::npos)
            throw Error(ErrorKind::InvalidArgument,
                        "template lacks placeholder {" + std::string(name) + "}", path.string());
    return text;
}

/// Transcript with "[Step k]" headers, the final answer segment last.
inline std::string render_numbered_transcript(const Trajectory& t) {
    std::string out;
    for (std::size_t i = 0; i < t.segment_count(); ++i) {
        out += "[Step " + std::to_string(i) + "]\n";
        out += i < t.steps.size() ? render_step(t.steps[i]) : t.final_text;
        if (!out.empty() && out.back() != '\n') out += '\n';
    }
    return out;
}

} // namespace calm
