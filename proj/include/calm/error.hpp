#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace calm {

enum class ErrorKind {
    MalformedRecord,
    InvariantViolation,
    EndpointUnavailable,
    RateLimited,
    MalformedResponse,
    ScriptExhausted,
    ScriptMismatch,
    UnterminatedFence,
    BudgetExhausted,
    RunnerUnavailable,
    GenerationFailed,
    UnparseableVerdict,
    InvalidSplicePoint,
    CountMismatch,
    EmptyBenchmark,
    UnparseableReport,
    UnknownTrajectory,
    KeyMismatch,
    InvalidArgument,
    Io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MalformedRecord: return "MalformedRecord";
        case ErrorKind::InvariantViolation: return "InvariantViolation";
        case ErrorKind::EndpointUnavailable: return "EndpointUnavailable";
        case ErrorKind::RateLimited: return "RateLimited";
        case ErrorKind::MalformedResponse: return "MalformedResponse";
        case ErrorKind::ScriptExhausted: return "ScriptExhausted";
        case ErrorKind::ScriptMismatch: return "ScriptMismatch";
        case ErrorKind::UnterminatedFence: return "UnterminatedFence";
        case ErrorKind::BudgetExhausted: return "BudgetExhausted";
        case ErrorKind::RunnerUnavailable: return "RunnerUnavailable";
        case ErrorKind::GenerationFailed: return "GenerationFailed";
        case ErrorKind::UnparseableVerdict: return "UnparseableVerdict";
        case ErrorKind::InvalidSplicePoint: return "InvalidSplicePoint";
        case ErrorKind::CountMismatch: return "CountMismatch";
        case ErrorKind::EmptyBenchmark: return "EmptyBenchmark";
        case ErrorKind::UnparseableReport: return "UnparseableReport";
        case ErrorKind::UnknownTrajectory: return "UnknownTrajectory";
        case ErrorKind::KeyMismatch: return "KeyMismatch";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

/// Base error for the whole library. `path()` names the offending field
/// (e.g. "steps[2].output") or entity when one is known.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message, std::string path = {})
        : std::runtime_error(compose(kind, message, path)),
          kind_(kind),
          path_(std::move(path)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& path() const noexcept { return path_; }

private:
    static std::string compose(ErrorKind kind, const std::string& message,
                               const std::string& path) {
        std::string out(to_string(kind));
        if (!path.empty()) out += " at " + path;
        out += ": " + message;
        return out;
    }

    ErrorKind kind_;
    std::string path_;
};

} // namespace calm
