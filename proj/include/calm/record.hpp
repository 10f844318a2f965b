#pragma once

// Line-delimited JSON records for every persisted domain type.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "calm/error.hpp"
#include "calm/model.hpp"

namespace calm {

using json = nlohmann::json;

namespace record_detail {

inline std::string join(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}

inline const json& field(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object())
        throw Error(ErrorKind::MalformedRecord, "expected an object", path);
    auto it = obj.find(key);
    if (it == obj.end())
        throw Error(ErrorKind::MalformedRecord, "missing field", join(path, key));
    return *it;
}

inline const json* optional_field(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return nullptr;
    return &*it;
}

inline std::string as_string(const json& v, const std::string& path) {
    if (!v.is_string()) throw Error(ErrorKind::MalformedRecord, "expected a string", path);
    return v.get<std::string>();
}

inline double as_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw Error(ErrorKind::MalformedRecord, "expected a number", path);
    double d = v.get<double>();
    if (!std::isfinite(d))
        throw Error(ErrorKind::InvariantViolation, "number is not finite", path);
    return d;
}

inline std::size_t as_count(const json& v, const std::string& path) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw Error(ErrorKind::MalformedRecord, "expected a non-negative integer", path);
    return v.get<std::size_t>();
}

inline bool as_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) throw Error(ErrorKind::MalformedRecord, "expected a boolean", path);
    return v.get<bool>();
}

inline const json& as_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw Error(ErrorKind::MalformedRecord, "expected an array", path);
    return v;
}

inline std::string str(const json& obj, const char* key, const std::string& path) {
    return as_string(field(obj, key, path), join(path, key));
}

inline std::optional<std::string> opt_str(const json& obj, const char* key,
                                          const std::string& path) {
    if (auto* v = optional_field(obj, key)) return as_string(*v, join(path, key));
    return std::nullopt;
}

inline double num(const json& obj, const char* key, const std::string& path) {
    return as_number(field(obj, key, path), join(path, key));
}

inline std::optional<double> opt_num(const json& obj, const char* key,
                                     const std::string& path) {
    if (auto* v = optional_field(obj, key)) return as_number(*v, join(path, key));
    return std::nullopt;
}

inline std::size_t count(const json& obj, const char* key, const std::string& path) {
    return as_count(field(obj, key, path), join(path, key));
}

inline bool flag(const json& obj, const char* key, const std::string& path,
                 bool fallback) {
    if (auto* v = optional_field(obj, key)) return as_bool(*v, join(path, key));
    return fallback;
}

inline json parse(std::string_view bytes, const std::string& what) {
    try {
        return json::parse(bytes);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::MalformedRecord, e.what(), what);
    }
}

inline std::string dump_line(const json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
}

template <class T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

inline TriggerType trigger(const json& v, const std::string& path) {
    if (!v.is_number_integer())
        throw Error(ErrorKind::MalformedRecord, "expected a trigger number 1-7", path);
    auto t = trigger_from_number(v.get<long>());
    if (!t) throw Error(ErrorKind::MalformedRecord, "trigger out of range 1-7", path);
    return *t;
}

} // namespace record_detail

// ── Problem ─────────────────────────────────────────────────────────

inline json to_json(const Problem& p) {
    return json{{"id", p.id},
                {"benchmark", std::string(to_string(p.benchmark))},
                {"description", p.description},
                {"ground_truth", p.ground_truth},
                {"split", std::string(to_string(p.split))}};
}

inline Problem problem_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    Problem p;
    p.id = str(j, "id", path);
    auto bname = str(j, "benchmark", path);
    auto b = parse_benchmark(bname);
    if (!b)
        throw Error(ErrorKind::MalformedRecord, "unknown benchmark '" + bname + "'",
                    join(path, "benchmark"));
    p.benchmark = *b;
    p.description = str(j, "description", path);
    p.ground_truth = num(j, "ground_truth", path);
    if (auto s = opt_str(j, "split", path)) {
        auto split = parse_split(*s);
        if (!split)
            throw Error(ErrorKind::MalformedRecord, "unknown split '" + *s + "'",
                        join(path, "split"));
        p.split = *split;
    }
    try {
        validate(p);
    } catch (const Error& e) {
        throw Error(e.kind(), e.what(), join(path, e.path()));
    }
    return p;
}

// ── Trajectory ──────────────────────────────────────────────────────

inline json to_json(const Hint& h) {
    return json{{"iteration", h.iteration},
                {"step_index", h.step_index},
                {"char_offset", h.char_offset},
                {"trigger", trigger_number(h.trigger)},
                {"text", h.text}};
}

inline json to_json(const Trajectory& t) {
    json steps = json::array();
    for (const auto& s : t.steps) {
        json js{{"reasoning", s.reasoning}};
        js["code"] = record_detail::optional_json(s.code);
        js["output"] = record_detail::optional_json(s.output);
        steps.push_back(std::move(js));
    }
    json hints = json::array();
    for (const auto& h : t.hints) hints.push_back(to_json(h));
    json j{{"id", t.id},
           {"problem_id", t.problem_id},
           {"steps", std::move(steps)},
           {"hints", std::move(hints)},
           {"final_text", t.final_text},
           {"generated_token_count", t.generated_token_count},
           {"hint_token_count", t.hint_token_count},
           {"code_execution_count", t.code_execution_count},
           {"budget_capped", t.budget_capped},
           {"token_capped", t.token_capped}};
    j["final_answer"] = record_detail::optional_json(t.final_answer);
    j["failure"] = record_detail::optional_json(t.failure);
    return j;
}

inline Trajectory trajectory_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    Trajectory t;
    t.id = str(j, "id", path);
    t.problem_id = str(j, "problem_id", path);
    const auto& steps = as_array(field(j, "steps", path), join(path, "steps"));
    for (std::size_t i = 0; i < steps.size(); ++i) {
        auto sp = join(path, "steps[" + std::to_string(i) + "]");
        Step s;
        s.reasoning = str(steps[i], "reasoning", sp);
        s.code = opt_str(steps[i], "code", sp);
        s.output = opt_str(steps[i], "output", sp);
        t.steps.push_back(std::move(s));
    }
    const auto& hints = as_array(field(j, "hints", path), join(path, "hints"));
    for (std::size_t i = 0; i < hints.size(); ++i) {
        auto hp = join(path, "hints[" + std::to_string(i) + "]");
        Hint h;
        h.iteration = count(hints[i], "iteration", hp);
        h.step_index = count(hints[i], "step_index", hp);
        h.char_offset = count(hints[i], "char_offset", hp);
        h.trigger = trigger(field(hints[i], "trigger", hp), join(hp, "trigger"));
        h.text = str(hints[i], "text", hp);
        t.hints.push_back(std::move(h));
    }
    t.final_text = str(j, "final_text", path);
    t.final_answer = opt_num(j, "final_answer", path);
    t.generated_token_count = count(j, "generated_token_count", path);
    t.hint_token_count = count(j, "hint_token_count", path);
    t.code_execution_count = count(j, "code_execution_count", path);
    t.budget_capped = flag(j, "budget_capped", path, false);
    t.token_capped = flag(j, "token_capped", path, false);
    t.failure = opt_str(j, "failure", path);
    try {
        validate(t);
    } catch (const Error& e) {
        throw Error(e.kind(), e.what(), join(path, e.path()));
    }
    return t;
}

inline std::string serialize_trajectory(const Trajectory& t) {
    return record_detail::dump_line(to_json(t));
}

inline Trajectory deserialize_trajectory(std::string_view bytes) {
    return trajectory_from_json(record_detail::parse(bytes, "trajectory"));
}

// ── Grading / outcome ───────────────────────────────────────────────

inline json to_json(const GradingResult& g) {
    json j{{"reward", g.reward}};
    j["extracted_answer"] = record_detail::optional_json(g.extracted_answer);
    j["relative_error"] = record_detail::optional_json(g.relative_error);
    j["failure_reason"] = g.failure_reason ? json(std::string(to_string(*g.failure_reason)))
                                           : json(nullptr);
    return j;
}

inline GradingResult grading_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    GradingResult g;
    g.extracted_answer = opt_num(j, "extracted_answer", path);
    g.relative_error = opt_num(j, "relative_error", path);
    auto reward = count(j, "reward", path);
    if (reward > 1)
        throw Error(ErrorKind::MalformedRecord, "reward must be 0 or 1", join(path, "reward"));
    g.reward = static_cast<int>(reward);
    if (auto note = opt_str(j, "failure_reason", path)) {
        bool found = false;
        for (auto n : {GradeNote::NoBoxedAnswer, GradeNote::NonNumeric,
                       GradeNote::ZeroTruthAbsoluteFallback})
            if (to_string(n) == *note) {
                g.failure_reason = n;
                found = true;
            }
        if (!found)
            throw Error(ErrorKind::MalformedRecord, "unknown failure_reason",
                        join(path, "failure_reason"));
    }
    return g;
}

inline json to_json(const CalmOutcome& o) {
    json log = json::array();
    for (const auto& e : o.verdict_log)
        log.push_back(json{{"iteration", e.iteration},
                           {"verdict", e.verdict},
                           {"intervene", e.intervene}});
    return json{{"trajectory", to_json(o.trajectory)},
                {"status", std::string(to_string(o.status))},
                {"interventions_used", o.interventions_used},
                {"verdict_log", std::move(log)},
                {"grading", to_json(o.grading)},
                {"system_prompt", o.system_prompt},
                {"user_prompt", o.user_prompt}};
}

inline CalmOutcome outcome_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    CalmOutcome o;
    o.trajectory = trajectory_from_json(field(j, "trajectory", path), join(path, "trajectory"));
    auto status = str(j, "status", path);
    bool found = false;
    for (auto s : {CalmStatus::GoldenAccepted, CalmStatus::CorrectButFlagged,
                   CalmStatus::DiscardedBudgetExhausted, CalmStatus::DiscardedIncorrect})
        if (to_string(s) == status) {
            o.status = s;
            found = true;
        }
    if (!found)
        throw Error(ErrorKind::MalformedRecord, "unknown status '" + status + "'",
                    join(path, "status"));
    o.interventions_used = count(j, "interventions_used", path);
    const auto& log = as_array(field(j, "verdict_log", path), join(path, "verdict_log"));
    for (std::size_t i = 0; i < log.size(); ++i) {
        auto lp = join(path, "verdict_log[" + std::to_string(i) + "]");
        o.verdict_log.push_back(VerdictLogEntry{count(log[i], "iteration", lp),
                                                str(log[i], "verdict", lp),
                                                flag(log[i], "intervene", lp, false)});
    }
    o.grading = grading_from_json(field(j, "grading", path), join(path, "grading"));
    o.system_prompt = opt_str(j, "system_prompt", path).value_or("");
    o.user_prompt = opt_str(j, "user_prompt", path).value_or("");
    try {
        validate(o);
    } catch (const Error& e) {
        throw Error(e.kind(), e.what(), join(path, e.path()));
    }
    return o;
}

// ── Flaw reports ────────────────────────────────────────────────────

inline json to_json(const FlawReport& r) {
    json inst = json::array();
    for (const auto& i : r.instances)
        inst.push_back(json{{"trigger", trigger_number(i.trigger)},
                            {"step_index", i.step_index},
                            {"rationale", i.rationale}});
    return json{{"trajectory_id", r.trajectory_id}, {"instances", std::move(inst)}};
}

inline FlawReport flaw_report_from_json(const json& j, const std::string& path = {}) {
    using namespace record_detail;
    FlawReport r;
    r.trajectory_id = str(j, "trajectory_id", path);
    const auto& inst = as_array(field(j, "instances", path), join(path, "instances"));
    for (std::size_t i = 0; i < inst.size(); ++i) {
        auto ip = join(path, "instances[" + std::to_string(i) + "]");
        FlawInstance f;
        f.trigger = trigger(field(inst[i], "trigger", ip), join(ip, "trigger"));
        f.step_index = count(inst[i], "step_index", ip);
        f.rationale = opt_str(inst[i], "rationale", ip).value_or("");
        r.instances.push_back(std::move(f));
    }
    return r;
}

// ── Files ───────────────────────────────────────────────────────────

/// Writes to a sibling temp file and renames over the target, so readers
/// never observe a truncated file.
inline void write_file_atomic(const std::filesystem::path& target, std::string_view content) {
    namespace fs = std::filesystem;
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    auto tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, "cannot open for writing", tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw Error(ErrorKind::Io, "write failed", tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw Error(ErrorKind::Io, ec.message(), target.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open for reading", path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Parses each non-blank line; errors carry "<file>:<line>" as their path.
template <class T, class Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse_one) {
    auto content = read_file(path);
    std::vector<T> out;
    std::istringstream in(content);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto where = path.string() + ":" + std::to_string(lineno);
        out.push_back(parse_one(record_detail::parse(line, where), where));
    }
    return out;
}

template <class T>
std::string to_jsonl(const std::vector<T>& items) {
    std::string out;
    for (const auto& item : items) out += record_detail::dump_line(to_json(item));
    return out;
}

inline std::vector<Problem> load_corpus(const std::filesystem::path& path) {
    auto corpus = read_jsonl<Problem>(path, [](const json& j, const std::string& where) {
        return problem_from_json(j, where);
    });
    validate_corpus(corpus);
    return corpus;
}

} // namespace calm
