#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "calm/client.hpp"
#include "calm/record.hpp"

namespace calm {

struct ScriptEntry {
    /// Entry is served only to this conversation; empty = shared queue.
    std::string conversation;
    /// When set, the prompt must contain this substring.
    std::optional<std::string> expect;
    std::string response;
    /// Simulated endpoint failure instead of a response.
    std::optional<ErrorKind> fail;
};

struct RecordedCall {
    RequestContext context;
    std::vector<ChatMessage> messages;
    SamplingConfig sampling;
    std::size_t entry_index = 0;
};

/// Deterministic client that plays scripted responses in order, honouring
/// stop sequences and max_tokens the way a real endpoint would.
class ScriptedClient final : public ModelClient {
public:
    explicit ScriptedClient(std::vector<ScriptEntry> script,
                            std::shared_ptr<const Tokenizer> tok = default_tokenizer(),
                            bool prefill = true, bool stop = true)
        : tok_(std::move(tok)), prefill_(prefill), stop_(stop) {
        if (script.empty())
            throw Error(ErrorKind::InvalidArgument, "script must be non-empty", "script");
        for (std::size_t i = 0; i < script.size(); ++i)
            queues_[script[i].conversation].push_back(Pending{i, std::move(script[i])});
    }

    Completion complete(std::span<const ChatMessage> messages, const SamplingConfig& cfg,
                        const RequestContext& ctx) override {
        validate_messages(messages);
        cfg.validate();
        std::lock_guard lock(mu_);
        auto it = queues_.find(ctx.conversation);
        if (it == queues_.end() || it->second.empty()) it = queues_.find("");
        if (it == queues_.end() || it->second.empty())
            throw Error(ErrorKind::ScriptExhausted,
                        "no scripted response left for conversation '" + ctx.conversation + "'",
                        std::string(to_string(ctx.role)));
        Pending next = std::move(it->second.front());
        it->second.pop_front();

        calls_.push_back(RecordedCall{ctx, {messages.begin(), messages.end()}, cfg, next.index});
        if (next.entry.expect) {
            std::string prompt;
            for (const auto& m : messages) prompt += m.content;
            if (prompt.find(*next.entry.expect) == std::string::npos)
                throw Error(ErrorKind::ScriptMismatch,
                            "expected substring \"" + *next.entry.expect +
                                "\" absent from prompt",
                            "script[" + std::to_string(next.index) + "]");
        }
        if (next.entry.fail)
            throw Error(*next.entry.fail, "scripted failure",
                        "script[" + std::to_string(next.index) + "]");
        SamplingConfig effective = cfg;
        if (!stop_) effective.stop_sequences.clear();
        return finish_completion(next.entry.response, effective, *tok_);
    }

    bool supports_prefill() const override { return prefill_; }
    bool supports_stop() const override { return stop_; }

    std::vector<RecordedCall> calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

    std::size_t remaining() const {
        std::lock_guard lock(mu_);
        std::size_t n = 0;
        for (const auto& [_, q] : queues_) n += q.size();
        return n;
    }

private:
    struct Pending {
        std::size_t index;
        ScriptEntry entry;
    };

    std::shared_ptr<const Tokenizer> tok_;
    bool prefill_;
    bool stop_;
    mutable std::mutex mu_;
    std::map<std::string, std::deque<Pending>> queues_;
    std::vector<RecordedCall> calls_;
};

inline std::shared_ptr<ScriptedClient> scripted_mock(std::vector<ScriptEntry> script) {
    return std::make_shared<ScriptedClient>(std::move(script));
}

/// Mock script file: one JSON object per line,
/// {"conversation"?: str, "expect"?: str, "response": str, "fail"?: str}.
inline std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
    return read_jsonl<ScriptEntry>(path, [](const json& j, const std::string& where) {
        using namespace record_detail;
        ScriptEntry e;
        e.conversation = opt_str(j, "conversation", where).value_or("");
        e.expect = opt_str(j, "expect", where);
        e.response = opt_str(j, "response", where).value_or("");
        if (auto fail = opt_str(j, "fail", where)) {
            if (*fail == "EndpointUnavailable") e.fail = ErrorKind::EndpointUnavailable;
            else if (*fail == "RateLimited") e.fail = ErrorKind::RateLimited;
            else if (*fail == "MalformedResponse") e.fail = ErrorKind::MalformedResponse;
            else throw Error(ErrorKind::MalformedRecord, "unknown failure kind", where + ".fail");
        } else if (!j.contains("response")) {
            throw Error(ErrorKind::MalformedRecord, "missing field", where + ".response");
        }
        return e;
    });
}

} // namespace calm
