#pragma once

#include <deque>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include "calm/record.hpp"
#include "calm/sandbox.hpp"

namespace calm {

/// Runner that answers with canned results in order and records every
/// request it saw.
class ScriptedRunner final : public Runner {
public:
    explicit ScriptedRunner(std::vector<SandboxResult> results) : queue_(results.begin(), results.end()) {}

    SandboxResult run(const RunnerRequest& request) override {
        std::lock_guard lock(mu_);
        requests_.push_back(request);
        if (queue_.empty()) throw Error(ErrorKind::RunnerUnavailable, "no scripted result left", "runner");
        auto r = std::move(queue_.front());
        queue_.pop_front();
        return r;
    }

    std::vector<RunnerRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }

private:
    mutable std::mutex mu_;
    std::deque<SandboxResult> queue_;
    std::vector<RunnerRequest> requests_;
};

/// Runner that prints a fixed stdout for every request.
class EchoRunner final : public Runner {
public:
    explicit EchoRunner(std::string stdout_text) : text_(std::move(stdout_text)) {}

    SandboxResult run(const RunnerRequest&) override {
        SandboxResult r;
        r.stdout_text = text_;
        return r;
    }

private:
    std::string text_;
};

/// One wire-protocol response object per line.
inline std::vector<SandboxResult> load_runner_script(const std::filesystem::path& path) {
    auto content = read_file(path);
    std::vector<SandboxResult> out;
    std::size_t start = 0, lineno = 0;
    while (start < content.size()) {
        auto nl = content.find('\n', start);
        auto line = content.substr(start, nl == std::string::npos ? std::string::npos : nl - start);
        start = nl == std::string::npos ? content.size() : nl + 1;
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(decode_response(line));
        } catch (const Error& e) {
            throw Error(ErrorKind::MalformedRecord, e.what(), path.string() + ":" + std::to_string(lineno));
        }
    }
    return out;
}

} // namespace calm
