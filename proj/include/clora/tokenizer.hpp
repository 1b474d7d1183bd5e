// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace clora {

struct Token {
    std::string text;
    std::uint64_t id = 0;
    // Character range [begin, end) in the source text; special tokens have begin == end.
    std::size_t begin = 0;
    std::size_t end = 0;
    bool special = false;
};

struct Tokenization {
    std::vector<Token> tokens;

    std::size_t size() const { return tokens.size(); }
};

class Tokenizer {
public:
    virtual ~Tokenizer() = default;

    // Full tokenization including start/end markers. Throws PromptTooLong past max_length().
    virtual Tokenization tokenize(std::string_view text) const = 0;
    // Tokenization of a fragment without markers or length checks.
    virtual std::vector<Token> split(std::string_view text) const = 0;
    virtual std::string decode(std::span<const Token> tokens) const = 0;
    virtual std::size_t max_length() const = 0;
};

// Whitespace/punctuation tokenizer with CLIP-style start and end markers.
// Ids are 64-bit FNV-1a hashes of the token text.
class WordTokenizer final : public Tokenizer {
public:
    explicit WordTokenizer(std::size_t max_length = 77) : max_length_(max_length) {}

    Tokenization tokenize(std::string_view text) const override;
    std::vector<Token> split(std::string_view text) const override;
    std::string decode(std::span<const Token> tokens) const override;
    std::size_t max_length() const override { return max_length_; }

    static constexpr std::string_view kStartToken = "<|startoftext|>";
    static constexpr std::string_view kEndToken = "<|endoftext|>";

private:
    std::size_t max_length_;
};

std::uint64_t fnv1a64(std::string_view text);

}  // namespace clora
