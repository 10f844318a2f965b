#pragma once

#include <cctype>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>

namespace calm {

/// Token accounting is pluggable; nothing in the library assumes a specific
/// vocabulary. Implementations must be thread-safe for concurrent reads.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;

    virtual std::size_t count(std::string_view text) const = 0;

    /// Longest prefix of `text` holding at most `max_tokens` tokens.
    virtual std::size_t prefix_length(std::string_view text,
                                      std::size_t max_tokens) const = 0;
};

/// Whitespace-delimited approximation: a token is a maximal run of
/// non-space characters.
class WhitespaceTokenizer final : public Tokenizer {
public:
    std::size_t count(std::string_view text) const override {
        std::size_t n = 0;
        bool in_token = false;
        for (char c : text) {
            bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
            if (!space && !in_token) ++n;
            in_token = !space;
        }
        return n;
    }

    std::size_t prefix_length(std::string_view text,
                              std::size_t max_tokens) const override {
        std::size_t n = 0;
        bool in_token = false;
        for (std::size_t i = 0; i < text.size(); ++i) {
            bool space = std::isspace(static_cast<unsigned char>(text[i])) != 0;
            if (!space && !in_token) {
                if (n == max_tokens) return i;
                ++n;
            }
            in_token = !space;
        }
        return text.size();
    }
};

inline std::shared_ptr<const Tokenizer> default_tokenizer() {
    static const auto instance = std::make_shared<const WhitespaceTokenizer>();
    return instance;
}

} // namespace calm
