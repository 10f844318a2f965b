#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "calm/calm.hpp"
#include "calm/scripted_client.hpp"
#include "calm/scripted_runner.hpp"

namespace calm::testing {

inline Problem make_problem(std::string id, double truth, Benchmark b = Benchmark::NL4Opt,
                            Split split = Split::Test) {
    Problem p;
    p.id = std::move(id);
    p.benchmark = b;
    p.description = "Minimize cost for problem " + p.id + ".";
    p.ground_truth = truth;
    p.split = split;
    return p;
}

/// A reasoner turn that ends with one code block, the way a model stopped
/// at the fence close would produce it.
inline std::string code_turn(const std::string& reasoning, const std::string& code) {
    return reasoning + "```python\n" + code + "\n```\n";
}

inline std::string answer_turn(const std::string& reasoning, const std::string& answer) {
    return reasoning + "\\boxed{" + answer + "}";
}

inline ScriptEntry entry(std::string conversation, std::string response) {
    return ScriptEntry{std::move(conversation), std::nullopt, std::move(response), std::nullopt};
}

inline SandboxResult printed(std::string text) {
    SandboxResult r;
    r.stdout_text = std::move(text);
    return r;
}

inline std::string random_words(std::mt19937_64& rng, std::size_t max_words) {
    static const char* vocab[] = {"cost", "x", "= 3", "minimize", "ü", "λ", "\\n", "\"q\"", "\t",
                                  "plan", "y_1", "{", "}", "```", "#", "10.5"};
    std::string out;
    auto n = rng() % (max_words + 1);
    for (std::size_t i = 0; i < n; ++i) {
        out += vocab[rng() % (sizeof vocab / sizeof *vocab)];
        out += rng() % 4 ? " " : "\n";
    }
    return out;
}

/// Structurally valid trajectory with consistent counters.
inline Trajectory random_trajectory(std::mt19937_64& rng, const std::string& id = "r#0") {
    Trajectory t;
    t.id = id;
    t.problem_id = std::string(problem_id_of(id));
    auto steps = rng() % 5;
    for (std::size_t i = 0; i < steps; ++i) {
        Step s;
        s.reasoning = random_words(rng, 12);
        if (rng() % 4) {
            s.code = "print(" + std::to_string(rng() % 100) + ")";
            if (rng() % 3) s.output = "```output\n" + std::to_string(rng() % 100) + "\n```";
        }
        t.steps.push_back(std::move(s));
    }
    t.final_text = random_words(rng, 8) + "\\boxed{" + std::to_string(rng() % 50) + "}";
    std::size_t iter = 0;
    for (auto h = rng() % 3; h > 0; --h) {
        iter += 1 + rng() % 2;
        Hint hint;
        hint.iteration = iter;
        hint.step_index = rng() % t.segment_count();
        hint.trigger = kAllTriggers[rng() % 7];
        hint.text = "Wait, check " + std::to_string(rng() % 9) + ".";
        auto& seg = hint.step_index < t.steps.size() ? t.steps[hint.step_index].reasoning : t.final_text;
        hint.char_offset = seg.size();
        seg += hint.text + "\n";
        t.hints.push_back(std::move(hint));
    }
    if (rng() % 2) t.final_answer = static_cast<double>(rng() % 1000) / 8.0;
    t.budget_capped = rng() % 5 == 0;
    refresh_counts(t, *default_tokenizer());
    return t;
}

/// Outcome whose status follows the curation rules from its own grading
/// and verdict log.
inline CalmOutcome random_outcome(std::mt19937_64& rng, std::size_t index) {
    CalmOutcome o;
    o.trajectory = random_trajectory(rng, "p" + std::to_string(index) + "#0");
    o.system_prompt = "system";
    o.user_prompt = "problem " + std::to_string(index);
    o.grading.reward = rng() % 2 ? 1 : 0;
    std::size_t flagged = rng() % 7;  // 6 means the last verdict still intervened
    std::size_t used = std::min<std::size_t>(flagged, 5);
    for (std::size_t k = 0; k < used; ++k)
        o.verdict_log.push_back({k, "Trigger 1 at step 0: Wait.", true});
    if (flagged < 6)
        o.verdict_log.push_back({used, "NO INTERVENTION", false});
    else
        o.verdict_log.push_back({used, "Trigger 4 at step 0: Check.", true});
    o.interventions_used = used;
    if (!o.final_verdict_clean())
        o.status = CalmStatus::DiscardedBudgetExhausted;
    else
        o.status = o.grading.reward == 1 ? CalmStatus::GoldenAccepted : CalmStatus::DiscardedIncorrect;
    return o;
}

/// Unique scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("calm-test-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

} // namespace calm::testing
