#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calm/error.hpp"
#include "calm/tokenizer.hpp"

namespace calm {

struct SamplingConfig {
    double temperature = 0.6;
    double top_p = 0.95;
    std::size_t max_tokens = 16384;
    std::vector<std::string> stop_sequences;
    std::optional<std::int64_t> seed;

    void validate() const {
        if (!(temperature >= 0.0) || !std::isfinite(temperature))
            throw Error(ErrorKind::InvalidArgument, "temperature must be >= 0", "temperature");
        if (!(top_p > 0.0 && top_p <= 1.0))
            throw Error(ErrorKind::InvalidArgument, "top_p must lie in (0, 1]", "top_p");
        if (max_tokens < 1)
            throw Error(ErrorKind::InvalidArgument, "max_tokens must be >= 1", "max_tokens");
    }
};

inline SamplingConfig reasoner_sampling_defaults() { return SamplingConfig{0.6, 0.95, 16384, {}, {}}; }
inline SamplingConfig intervener_sampling_defaults() { return SamplingConfig{1.0, 0.95, 4096, {}, {}}; }

enum class ChatRole { System, User, Assistant };

inline std::string_view to_string(ChatRole r) {
    switch (r) {
        case ChatRole::System: return "system";
        case ChatRole::User: return "user";
        case ChatRole::Assistant: return "assistant";
    }
    return "?";
}

struct ChatMessage {
    ChatRole role = ChatRole::User;
    std::string content;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

enum class FinishReason { Stop, Length, EndOfTurn };

inline std::string_view to_string(FinishReason f) {
    switch (f) {
        case FinishReason::Stop: return "stop";
        case FinishReason::Length: return "length";
        case FinishReason::EndOfTurn: return "end_of_turn";
    }
    return "?";
}

/// `text` excludes the stop sequence that ended generation; `stop_hit`
/// names it.
struct Completion {
    std::string text;
    std::optional<std::string> stop_hit;
    std::size_t token_count = 0;
    FinishReason finish = FinishReason::EndOfTurn;

    friend bool operator==(const Completion&, const Completion&) = default;
};

enum class ModelRole { Reasoner, Intervener, Annotator };

inline std::string_view to_string(ModelRole r) {
    switch (r) {
        case ModelRole::Reasoner: return "reasoner";
        case ModelRole::Intervener: return "intervener";
        case ModelRole::Annotator: return "annotator";
    }
    return "?";
}

/// Per-request routing. `conversation` keys one logical dialogue
/// (e.g. "<problem>#<sample>") so scripted clients stay deterministic
/// under concurrent flows.
struct RequestContext {
    ModelRole role = ModelRole::Reasoner;
    std::string conversation;
};

class ModelClient {
public:
    virtual ~ModelClient() = default;

    virtual Completion complete(std::span<const ChatMessage> messages,
                                const SamplingConfig& cfg, const RequestContext& ctx) = 0;

    /// Whether a trailing assistant message is continued in place.
    virtual bool supports_prefill() const { return true; }
    virtual bool supports_stop() const { return true; }
};

/// Empty content is allowed only on a trailing assistant prefill message.
inline void validate_messages(std::span<const ChatMessage> messages) {
    if (messages.empty())
        throw Error(ErrorKind::InvalidArgument, "messages must be non-empty", "messages");
    for (std::size_t i = 0; i < messages.size(); ++i) {
        bool prefill = i + 1 == messages.size() && messages[i].role == ChatRole::Assistant;
        if (messages[i].content.empty() && !prefill)
            throw Error(ErrorKind::InvalidArgument, "empty message content",
                        "messages[" + std::to_string(i) + "].content");
    }
}

/// Cuts `raw` at the earliest stop sequence, then at `cfg.max_tokens`.
inline Completion finish_completion(std::string raw, const SamplingConfig& cfg,
                                    const Tokenizer& tok) {
    Completion c;
    std::size_t cut = std::string::npos;
    for (const auto& stop : cfg.stop_sequences) {
        if (stop.empty()) continue;
        auto pos = raw.find(stop);
        if (pos != std::string::npos && (cut == std::string::npos || pos < cut)) {
            cut = pos;
            c.stop_hit = stop;
        }
    }
    if (cut != std::string::npos) {
        raw.resize(cut);
        c.finish = FinishReason::Stop;
    }
    auto keep = tok.prefix_length(raw, cfg.max_tokens);
    if (keep < raw.size()) {
        raw.resize(keep);
        c.finish = FinishReason::Length;
        c.stop_hit.reset();
    }
    c.token_count = tok.count(raw);
    c.text = std::move(raw);
    return c;
}

inline constexpr std::string_view kContinueInstruction =
    "Continue your response exactly from where the partial response below "
    "ends. Do not repeat any of it.\n\n<partial_response>\n";

/// Messages that resume generation after `prefill`. With prefill support
/// the partial response is a trailing assistant message; otherwise it is
/// re-embedded in the user turn.
inline std::vector<ChatMessage> continuation_messages(const std::string& system_prompt,
                                                      const std::string& user_prompt,
                                                      const std::string& prefill,
                                                      bool prefill_supported) {
    std::vector<ChatMessage> msgs;
    if (!system_prompt.empty()) msgs.push_back({ChatRole::System, system_prompt});
    if (prefill.empty()) {
        msgs.push_back({ChatRole::User, user_prompt});
    } else if (prefill_supported) {
        msgs.push_back({ChatRole::User, user_prompt});
        msgs.push_back({ChatRole::Assistant, prefill});
    } else {
        std::string user = user_prompt;
        user += "\n\n";
        user += kContinueInstruction;
        user += prefill;
        user += "\n</partial_response>";
        msgs.push_back({ChatRole::User, std::move(user)});
    }
    return msgs;
}

} // namespace calm
