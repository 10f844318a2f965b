#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "calm/error.hpp"

namespace calm {

struct ExecutionLimits {
    double wall_time_seconds = 30.0;
    std::size_t memory_bytes = std::size_t{1} << 30;
    std::size_t output_cap_bytes = 8 * 1024;
    std::size_t max_executions_per_trajectory = 4;

    void validate() const {
        if (!(wall_time_seconds > 0.0) || memory_bytes == 0 || output_cap_bytes == 0 ||
            max_executions_per_trajectory == 0)
            throw Error(ErrorKind::InvalidArgument, "execution limits must be positive",
                        "limits");
    }
};

/// Supervision slack on top of the wall-time limit before the runner
/// process itself is killed.
inline constexpr std::chrono::seconds kSupervisionGrace{2};

enum class ExitKind { Ok, NonZero, Timeout, MemoryKilled, RunnerError };

inline std::string_view to_string(ExitKind k) {
    switch (k) {
        case ExitKind::Ok: return "ok";
        case ExitKind::NonZero: return "nonzero";
        case ExitKind::Timeout: return "timeout";
        case ExitKind::MemoryKilled: return "memory_killed";
        case ExitKind::RunnerError: return "runner_error";
    }
    return "?";
}

inline std::optional<ExitKind> parse_exit_kind(std::string_view s) {
    for (auto k : {ExitKind::Ok, ExitKind::NonZero, ExitKind::Timeout, ExitKind::MemoryKilled,
                   ExitKind::RunnerError})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

struct SandboxResult {
    std::string stdout_text;
    std::string stderr_text;
    ExitKind exit = ExitKind::Ok;
    int exit_code = 0;  // meaningful for NonZero
    double wall_time_used = 0.0;
    bool truncated = false;

    friend bool operator==(const SandboxResult&, const SandboxResult&) = default;
};

struct RunnerRequest {
    std::string code;
    double wall_time_seconds = 30.0;
    std::size_t memory_bytes = std::size_t{1} << 30;
    std::size_t output_cap_bytes = 8 * 1024;
};

inline RunnerRequest make_request(std::string code, const ExecutionLimits& limits) {
    return RunnerRequest{std::move(code), limits.wall_time_seconds, limits.memory_bytes,
                         limits.output_cap_bytes};
}

/// Executes one request in isolation. Throws RunnerUnavailable when no
/// runner can be reached.
class Runner {
public:
    virtual ~Runner() = default;
    virtual SandboxResult run(const RunnerRequest& request) = 0;
};

// ── Wire protocol ───────────────────────────────────────────────────

inline std::string encode_request(const RunnerRequest& r) {
    nlohmann::json j{{"code", r.code},
                     {"wall_time", r.wall_time_seconds},
                     {"memory", r.memory_bytes},
                     {"output_cap", r.output_cap_bytes}};
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

inline SandboxResult decode_response(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::RunnerUnavailable, std::string("bad runner response: ") + e.what(),
                    "runner");
    }
    auto bad = [](const char* field) {
        return Error(ErrorKind::RunnerUnavailable, "bad runner response field", field);
    };
    if (!j.is_object()) throw bad("response");
    SandboxResult r;
    if (!j.contains("stdout") || !j["stdout"].is_string()) throw bad("stdout");
    if (!j.contains("stderr") || !j["stderr"].is_string()) throw bad("stderr");
    if (!j.contains("exit") || !j["exit"].is_string()) throw bad("exit");
    r.stdout_text = j["stdout"].get<std::string>();
    r.stderr_text = j["stderr"].get<std::string>();
    auto kind = parse_exit_kind(j["exit"].get<std::string>());
    if (!kind) throw bad("exit");
    r.exit = *kind;
    if (j.contains("exit_code") && j["exit_code"].is_number_integer())
        r.exit_code = j["exit_code"].get<int>();
    if (j.contains("wall_time_used") && j["wall_time_used"].is_number())
        r.wall_time_used = j["wall_time_used"].get<double>();
    if (j.contains("truncated") && j["truncated"].is_boolean())
        r.truncated = j["truncated"].get<bool>();
    return r;
}

namespace sandbox_detail {
/// Largest n <= limit such that s[0, n) does not split a UTF-8 sequence.
inline std::size_t utf8_floor(std::string_view s, std::size_t limit) {
    if (limit >= s.size()) return s.size();
    std::size_t n = limit;
    while (n > 0 && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) --n;
    return n;
}
} // namespace sandbox_detail

/// Caps stdout+stderr at `cap` bytes, stdout first. Cuts back off to a
/// UTF-8 boundary, so the kept size can fall up to 3 bytes under the cap.
inline SandboxResult enforce_output_cap(SandboxResult r, std::size_t cap) {
    std::size_t total = r.stdout_text.size() + r.stderr_text.size();
    if (total <= cap) return r;
    r.truncated = true;
    if (r.stdout_text.size() >= cap) {
        r.stdout_text.resize(sandbox_detail::utf8_floor(r.stdout_text, cap));
        r.stderr_text.clear();
    } else {
        auto room = cap - r.stdout_text.size();
        r.stderr_text.resize(sandbox_detail::utf8_floor(r.stderr_text, room));
    }
    return r;
}

// ── Code extraction ─────────────────────────────────────────────────

struct CodeBlock {
    std::string code;
    /// [begin, end) of the fenced block, from the opening backticks through
    /// the closing backticks.
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const CodeBlock&, const CodeBlock&) = default;
};

namespace sandbox_detail {

struct Line {
    std::size_t begin;
    std::size_t end;  // excludes '\n'
};

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline bool is_code_open(std::string_view line) {
    if (line.substr(0, 3) != "```") return false;
    std::string tag;
    for (char c : trim(line.substr(3)))
        tag.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return tag == "python" || tag == "py" || tag == "python3";
}

inline bool is_close(std::string_view line) { return trim(line) == "```" && line.substr(0, 3) == "```"; }

inline std::vector<Line> lines(std::string_view text) {
    std::vector<Line> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            out.push_back({pos, text.size()});
            break;
        }
        out.push_back({pos, nl});
        pos = nl + 1;
    }
    return out;
}

} // namespace sandbox_detail

/// The last complete python-fenced block, if it sits at the tail of
/// `generated` (only whitespace after it). Throws UnterminatedFence when the
/// last opened block is never closed.
inline std::optional<CodeBlock> extract_code_block(std::string_view generated) {
    using namespace sandbox_detail;
    auto ls = lines(generated);
    std::optional<std::size_t> open;
    for (std::size_t i = 0; i < ls.size(); ++i)
        if (is_code_open(generated.substr(ls[i].begin, ls[i].end - ls[i].begin))) open = i;
    if (!open) return std::nullopt;
    std::optional<std::size_t> close;
    for (std::size_t i = *open + 1; i < ls.size(); ++i)
        if (is_close(generated.substr(ls[i].begin, ls[i].end - ls[i].begin))) {
            close = i;
            break;
        }
    if (!close)
        throw Error(ErrorKind::UnterminatedFence, "code block opened but never closed",
                    "offset " + std::to_string(ls[*open].begin));
    std::size_t close_end = ls[*close].begin + 3;
    if (!trim(generated.substr(close_end)).empty()) return std::nullopt;

    CodeBlock block;
    block.begin = ls[*open].begin;
    block.end = close_end;
    std::size_t code_begin = ls[*open].end + 1;
    std::size_t close_begin = ls[*close].begin;
    if (close_begin > code_begin) block.code = std::string(generated.substr(code_begin, close_begin - 1 - code_begin));
    return block;
}

/// Drops everything after the first complete python block. Used when the
/// endpoint cannot stop at the fence close itself.
inline std::string truncate_after_first_block(std::string_view text) {
    using namespace sandbox_detail;
    auto ls = lines(text);
    for (std::size_t i = 0; i < ls.size(); ++i) {
        if (!is_code_open(text.substr(ls[i].begin, ls[i].end - ls[i].begin))) continue;
        for (std::size_t k = i + 1; k < ls.size(); ++k)
            if (is_close(text.substr(ls[k].begin, ls[k].end - ls[k].begin)))
                return std::string(text.substr(0, ls[k].begin + 3));
        break;
    }
    return std::string(text);
}

// ── Output formatting ───────────────────────────────────────────────

inline constexpr std::string_view kOutputFenceOpen = "```output\n";
inline constexpr std::string_view kTruncationNotice = "[output truncated]";

inline std::string format_output_block(const SandboxResult& r) {
    std::string body = r.stdout_text;
    auto new_line = [&body] {
        if (!body.empty() && body.back() != '\n') body.push_back('\n');
    };
    if (!r.stderr_text.empty()) {
        new_line();
        body += "stderr:\n";
        body += r.stderr_text;
    }
    switch (r.exit) {
        case ExitKind::Timeout:
            new_line();
            body += "[execution timed out]";
            break;
        case ExitKind::MemoryKilled:
            new_line();
            body += "[execution killed: memory limit exceeded]";
            break;
        case ExitKind::RunnerError:
            new_line();
            body += "[runner error]";
            break;
        case ExitKind::NonZero:
            if (r.stdout_text.empty() && r.stderr_text.empty()) {
                body += "[exit code " + std::to_string(r.exit_code) + "]";
            }
            break;
        case ExitKind::Ok:
            break;
    }
    if (r.truncated) {
        new_line();
        body += kTruncationNotice;
    }
    while (!body.empty() && body.back() == '\n') body.pop_back();
    std::string out(kOutputFenceOpen);
    out += body;
    out += "\n```";
    return out;
}

// ── Per-trajectory budget ───────────────────────────────────────────

/// Dispatches one trajectory's code to a runner while enforcing its
/// execution budget. Not shared between trajectories.
class ExecutionSession {
public:
    ExecutionSession(Runner& runner, ExecutionLimits limits, std::size_t already_used = 0)
        : runner_(&runner), limits_(limits), used_(already_used) {
        limits_.validate();
    }

    SandboxResult execute(std::string code) {
        if (used_ >= limits_.max_executions_per_trajectory)
            throw Error(ErrorKind::BudgetExhausted,
                        "execution " + std::to_string(used_ + 1) + " exceeds budget of " +
                            std::to_string(limits_.max_executions_per_trajectory),
                        "code_execution_count");
        auto result = runner_->run(make_request(std::move(code), limits_));
        ++used_;
        return enforce_output_cap(std::move(result), limits_.output_cap_bytes);
    }

    std::size_t used() const { return used_; }
    std::size_t remaining() const {
        return used_ >= limits_.max_executions_per_trajectory
                   ? 0
                   : limits_.max_executions_per_trajectory - used_;
    }
    const ExecutionLimits& limits() const { return limits_; }

private:
    Runner* runner_;
    ExecutionLimits limits_;
    std::size_t used_;
};

} // namespace calm
