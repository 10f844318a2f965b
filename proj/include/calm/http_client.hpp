#pragma once

// Chat-completions client over HTTP(S). Wire shape follows the OpenAI
// /v1/chat/completions schema; vLLM-style servers additionally report the
// matched stop string in `stop_reason` and accept assistant prefill via
// `continue_final_message`.

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#if defined(CALM_WITH_OPENSSL) && !defined(CPPHTTPLIB_OPENSSL_SUPPORT)
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include <nlohmann/json.hpp>

#include "calm/client.hpp"
#include "calm/rate_limiter.hpp"

namespace calm {

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{1000};
};

struct EndpointConfig {
    std::string base_url;
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key;
    bool prefill = true;
    bool stop = true;
    double requests_per_minute = 0.0;  // 0 disables rate limiting
    std::chrono::seconds timeout{600};
    RetryPolicy retry;
};

inline nlohmann::json build_request_body(std::span<const ChatMessage> messages,
                                         const SamplingConfig& cfg, const std::string& model,
                                         bool prefill) {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages)
        msgs.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
    nlohmann::json body{{"model", model},
                        {"messages", std::move(msgs)},
                        {"temperature", cfg.temperature},
                        {"top_p", cfg.top_p},
                        {"max_tokens", cfg.max_tokens}};
    if (!cfg.stop_sequences.empty()) body["stop"] = cfg.stop_sequences;
    if (cfg.seed) body["seed"] = *cfg.seed;
    if (prefill && !messages.empty() && messages.back().role == ChatRole::Assistant) {
        body["continue_final_message"] = true;
        body["add_generation_prompt"] = false;
    }
    return body;
}

inline Completion parse_completion_response(std::string_view raw, const SamplingConfig& cfg,
                                            const Tokenizer& tok) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::MalformedResponse, e.what(), "body");
    }
    if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() ||
        j["choices"].empty())
        throw Error(ErrorKind::MalformedResponse, "missing choices", "choices");
    const auto& choice = j["choices"][0];
    if (!choice.is_object() || !choice.contains("message") || !choice["message"].is_object())
        throw Error(ErrorKind::MalformedResponse, "missing message", "choices[0].message");
    const auto& content = choice["message"].value("content", nlohmann::json());
    if (!content.is_string() && !content.is_null())
        throw Error(ErrorKind::MalformedResponse, "content is not a string",
                    "choices[0].message.content");

    Completion c;
    c.text = content.is_string() ? content.get<std::string>() : std::string();
    auto finish = choice.value("finish_reason", nlohmann::json());
    std::string reason = finish.is_string() ? finish.get<std::string>() : "";
    if (reason == "length") {
        c.finish = FinishReason::Length;
    } else {
        c.finish = FinishReason::EndOfTurn;
        auto stop_reason = choice.value("stop_reason", nlohmann::json());
        if (reason == "stop" && stop_reason.is_string()) {
            auto hit = stop_reason.get<std::string>();
            for (const auto& s : cfg.stop_sequences)
                if (s == hit) {
                    c.finish = FinishReason::Stop;
                    c.stop_hit = hit;
                }
        }
    }
    auto keep = tok.prefix_length(c.text, cfg.max_tokens);
    if (keep < c.text.size()) {
        c.text.resize(keep);
        c.finish = FinishReason::Length;
        c.stop_hit.reset();
    }
    c.token_count = tok.count(c.text);
    return c;
}

class HttpModelClient final : public ModelClient {
public:
    explicit HttpModelClient(EndpointConfig cfg,
                             std::shared_ptr<const Tokenizer> tok = default_tokenizer())
        : cfg_(std::move(cfg)), tok_(std::move(tok)) {
        if (cfg_.base_url.empty())
            throw Error(ErrorKind::InvalidArgument, "endpoint base URL is empty", "base_url");
        if (cfg_.retry.attempts < 1)
            throw Error(ErrorKind::InvalidArgument, "retry attempts must be >= 1", "retry");
        if (cfg_.requests_per_minute > 0.0)
            limiter_ = std::make_unique<TokenBucket>(cfg_.requests_per_minute);
    }

    Completion complete(std::span<const ChatMessage> messages, const SamplingConfig& cfg,
                        const RequestContext& ctx) override {
        validate_messages(messages);
        cfg.validate();
        // Serialized once so every retry carries the identical payload.
        const std::string payload = build_request_body(messages, cfg, cfg_.model, cfg_.prefill).dump();
        httplib::Headers headers;
        if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

        auto backoff = cfg_.retry.initial_backoff;
        std::string last_error;
        bool rate_limited = false;
        for (int attempt = 1; attempt <= cfg_.retry.attempts; ++attempt) {
            if (limiter_) limiter_->acquire();
            httplib::Client http(cfg_.base_url);
            http.set_connection_timeout(std::chrono::seconds(10));
            http.set_read_timeout(cfg_.timeout);
            auto res = http.Post(cfg_.path, headers, payload, "application/json");
            if (!res) {
                last_error = "request failed: " + httplib::to_string(res.error());
                rate_limited = false;
            } else if (res->status == 200) {
                return parse_completion_response(res->body, cfg, *tok_);
            } else if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                rate_limited = res->status == 429;
            } else {
                throw Error(ErrorKind::EndpointUnavailable,
                            "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200),
                            std::string(to_string(ctx.role)));
            }
            if (attempt < cfg_.retry.attempts) {
                std::this_thread::sleep_for(backoff);
                backoff *= 2;
            }
        }
        throw Error(rate_limited ? ErrorKind::RateLimited : ErrorKind::EndpointUnavailable,
                    last_error + " after " + std::to_string(cfg_.retry.attempts) + " attempts",
                    std::string(to_string(ctx.role)));
    }

    bool supports_prefill() const override { return cfg_.prefill; }
    bool supports_stop() const override { return cfg_.stop; }

    const EndpointConfig& config() const { return cfg_; }

private:
    EndpointConfig cfg_;
    std::shared_ptr<const Tokenizer> tok_;
    std::unique_ptr<TokenBucket> limiter_;
};

} // namespace calm
