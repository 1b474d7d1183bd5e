// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/tokenizer.hpp"

#include <cctype>

#include "clora/errors.hpp"

namespace clora {

std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

namespace {

bool is_punct(unsigned char c) {
    return c == ',' || c == '.' || c == '!' || c == '?' || c == ';' || c == ':';
}

Token make_token(std::string_view source, std::size_t begin, std::size_t end) {
    Token t;
    t.text = std::string(source.substr(begin, end - begin));
    t.id = fnv1a64(t.text);
    t.begin = begin;
    t.end = end;
    return t;
}

Token special_token(std::string_view text, std::size_t at) {
    Token t;
    t.text = std::string(text);
    t.id = fnv1a64(text);
    t.begin = at;
    t.end = at;
    t.special = true;
    return t;
}

}  // namespace

std::vector<Token> WordTokenizer::split(std::string_view text) const {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (is_punct(c)) {
            out.push_back(make_token(text, i, i + 1));
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size()) {
            const auto d = static_cast<unsigned char>(text[j]);
            if (std::isspace(d) || is_punct(d)) {
                break;
            }
            ++j;
        }
        out.push_back(make_token(text, i, j));
        i = j;
    }
    return out;
}

Tokenization WordTokenizer::tokenize(std::string_view text) const {
    Tokenization result;
    result.tokens.push_back(special_token(kStartToken, 0));
    for (auto& t : split(text)) {
        result.tokens.push_back(std::move(t));
    }
    result.tokens.push_back(special_token(kEndToken, text.size()));
    require(result.tokens.size() <= max_length_, ErrorKind::PromptTooLong,
            "prompt tokenizes to " + std::to_string(result.tokens.size()) + " tokens, limit is " +
                std::to_string(max_length_));
    return result;
}

std::string WordTokenizer::decode(std::span<const Token> tokens) const {
    std::string out;
    for (const auto& t : tokens) {
        if (t.special) {
            continue;
        }
        const bool glue = t.text.size() == 1 && is_punct(static_cast<unsigned char>(t.text[0]));
        if (!out.empty() && !glue) {
            out += ' ';
        }
        out += t.text;
    }
    return out;
}

}  // namespace clora
