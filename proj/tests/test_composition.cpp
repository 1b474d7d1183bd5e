// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <set>

#include "clora/composition.hpp"
#include "clora/errors.hpp"
#include "doctest.h"

using namespace clora;

namespace {

CompositionSpec woman_umbrella() {
    CompositionSpec spec;
    spec.base_prompt = "a woman with an umbrella";
    spec.bindings = {{"woman", "L1", BindingKind::Content, ""}, {"umbrella", "L2", BindingKind::Content, ""}};
    return spec;
}

std::vector<TokenRef> refs(std::initializer_list<std::pair<int, int>> pairs) {
    std::vector<TokenRef> out;
    for (auto [v, t] : pairs) {
        out.push_back({v, t});
    }
    return out;
}

std::string decode_span(const Tokenizer& tok, const PromptVariant& v, const std::vector<int>& span) {
    const auto tokens = tok.tokenize(v.text).tokens;
    std::vector<Token> picked;
    for (int i : span) {
        picked.push_back(tokens[static_cast<std::size_t>(i)]);
    }
    return tok.decode(picked);
}

}  // namespace

TEST_CASE("tokenizer splits words and punctuation with markers") {
    WordTokenizer tok;
    const auto t = tok.tokenize("a cat, sleeping.");
    REQUIRE(t.size() == 7);
    CHECK(t.tokens.front().special);
    CHECK(t.tokens.back().special);
    CHECK(t.tokens[2].text == "cat");
    CHECK(t.tokens[3].text == ",");
    CHECK(t.tokens[5].text == ".");
    CHECK(t.tokens[2].id == fnv1a64("cat"));
}

TEST_CASE("tokenizer enforces the maximum length") {
    WordTokenizer tok(5);
    CHECK_NOTHROW(tok.tokenize("a b c"));
    try {
        tok.tokenize("a b c d");
        FAIL("expected PromptTooLong");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::PromptTooLong);
    }
}

TEST_CASE("woman and umbrella variants") {
    WordTokenizer tok;
    const auto v = build_variants(woman_umbrella(), tok);
    REQUIRE(v.size() == 3);
    CHECK(v[0].text == "a woman with an umbrella");
    CHECK_FALSE(v[0].active_lora.has_value());
    CHECK(v[1].text == "a L1 woman with an umbrella");
    CHECK(*v[1].active_lora == "L1");
    CHECK(v[2].text == "a woman with an L2 umbrella");
    CHECK(*v[2].active_lora == "L2");

    CHECK(v[0].token_spans.at("woman") == std::vector<int>{2});
    CHECK(v[0].token_spans.at("umbrella") == std::vector<int>{5});
    CHECK(*v[1].trigger_span == std::vector<int>{2});
    CHECK(v[1].token_spans.at("woman") == std::vector<int>{3});
    CHECK(v[1].token_spans.at("umbrella") == std::vector<int>{6});
    CHECK(*v[2].trigger_span == std::vector<int>{5});
    CHECK(v[2].token_spans.at("woman") == std::vector<int>{2});
    CHECK(v[2].token_spans.at("umbrella") == std::vector<int>{6});
}

TEST_CASE("woman and umbrella groups") {
    WordTokenizer tok;
    const auto spec = woman_umbrella();
    const auto v = build_variants(spec, tok);
    const auto g = build_groups(v, spec);
    REQUIRE(g.size() == 2);
    CHECK(g[0].concept_text == "woman");
    CHECK(g[0].members == refs({{0, 2}, {1, 2}, {1, 3}, {2, 2}}));
    CHECK(g[1].concept_text == "umbrella");
    CHECK(g[1].members == refs({{0, 5}, {1, 6}, {2, 5}, {2, 6}}));
}

TEST_CASE("mask sources come from the LoRA's own variant") {
    WordTokenizer tok;
    const auto spec = woman_umbrella();
    const auto src = mask_token_sources(spec, build_variants(spec, tok));
    CHECK(src.at("L1") == refs({{1, 2}, {1, 3}}));
    CHECK(src.at("L2") == refs({{2, 5}, {2, 6}}));
}

TEST_CASE("single binding gives two variants, one group, two mask sources") {
    WordTokenizer tok;
    CompositionSpec spec;
    spec.base_prompt = "a cat";
    spec.bindings = {{"cat", "L1", BindingKind::Content, ""}};
    const auto v = build_variants(spec, tok);
    CHECK(v.size() == 2);
    CHECK(build_groups(v, spec).size() == 1);
    CHECK(mask_token_sources(spec, v).at("L1").size() == 2);
}

TEST_CASE("three bindings: four variants, groups of five") {
    WordTokenizer tok;
    CompositionSpec spec;
    spec.base_prompt = "a cat and a dog near a tree";
    spec.bindings = {{"cat", "A", BindingKind::Content, ""},
                     {"dog", "B", BindingKind::Content, ""},
                     {"tree", "C", BindingKind::Content, ""}};
    const auto v = build_variants(spec, tok);
    REQUIRE(v.size() == 4);
    std::set<std::string> active;
    for (std::size_t i = 1; i < v.size(); ++i) {
        active.insert(*v[i].active_lora);
    }
    CHECK(active.size() == 3);
    CHECK(v[3].text == "a cat and a dog near a C tree");

    const auto g = build_groups(v, spec);
    REQUIRE(g.size() == 3);
    std::set<TokenRef> seen;
    for (const auto& group : g) {
        CHECK(group.members.size() == 5);
        for (const auto& m : group.members) {
            CHECK(seen.insert(m).second);
        }
    }
    // Hand enumeration for "tree": index 8 in v0..v2, 9 in v3, trigger at 8 in v3.
    CHECK(g[2].members == refs({{0, 8}, {1, 9}, {2, 9}, {3, 8}, {3, 9}}));
}

TEST_CASE("multi-token concept contributes every token") {
    WordTokenizer tok;
    CompositionSpec spec;
    spec.base_prompt = "a plushie bunny on a shelf";
    spec.bindings = {{"plushie bunny", "P", BindingKind::Content, "sks"}};
    const auto v = build_variants(spec, tok);
    CHECK(v[1].text == "a sks plushie bunny on a shelf");
    const auto src = mask_token_sources(spec, v);
    CHECK(src.at("P") == refs({{1, 2}, {1, 3}, {1, 4}}));
}

TEST_CASE("variant round trips") {
    WordTokenizer tok;
    CompositionSpec spec;
    spec.base_prompt = "a dog, a cat and a bird";
    spec.bindings = {{"dog", "D", BindingKind::Content, "zwx"},
                     {"cat", "C", BindingKind::Content, ""},
                     {"bird", "B", BindingKind::Content, ""}};
    const auto v = build_variants(spec, tok);
    for (const auto& variant : v) {
        for (const auto& [text, span] : variant.token_spans) {
            CHECK(decode_span(tok, variant, span) == text);
        }
        if (variant.trigger_span) {
            // Removing the trigger restores the base prompt.
            const auto tokens = tok.tokenize(variant.text).tokens;
            const auto& first = tokens[static_cast<std::size_t>(variant.trigger_span->front())];
            const auto& last = tokens[static_cast<std::size_t>(variant.trigger_span->back())];
            std::string text = variant.text;
            text.erase(first.begin, last.end - first.begin + 1);
            CHECK(text == spec.base_prompt);
        }
    }
}

TEST_CASE("style bindings get a tail variant but no group") {
    WordTokenizer tok;
    CompositionSpec spec;
    spec.base_prompt = "a cat";
    spec.bindings = {{"cat", "L1", BindingKind::Content, ""}, {"", "ink", BindingKind::Style, ""}};
    const auto v = build_variants(spec, tok);
    CHECK(v.size() == 2);
    const auto s = build_style_variants(spec, tok);
    REQUIRE(s.size() == 1);
    CHECK(s[0].variant_id == 2);
    CHECK(s[0].text == "a cat ink");
    CHECK(s[0].kind == VariantKind::Style);
    CHECK(build_groups(v, spec).size() == 1);
    CHECK(mask_token_sources(spec, v).count("ink") == 0);
}

TEST_CASE("spec validation errors") {
    WordTokenizer tok;
    auto kind_of = [&](const CompositionSpec& s) {
        try {
            build_variants(s, tok);
        } catch (const Error& e) {
            return e.kind();
        }
        return ErrorKind::ContractViolation;
    };
    CompositionSpec s = woman_umbrella();
    s.bindings[1].concept_text = "hat";
    CHECK(kind_of(s) == ErrorKind::SpanNotFound);

    s = woman_umbrella();
    s.bindings[1].lora_id = "L1";
    CHECK(kind_of(s) == ErrorKind::InvalidSpec);

    s = woman_umbrella();
    s.bindings[1].concept_text = "woman";
    CHECK(kind_of(s) == ErrorKind::InvalidSpec);

    s = woman_umbrella();
    s.bindings = {{"", "ink", BindingKind::Style, ""}};
    CHECK(kind_of(s) == ErrorKind::InvalidSpec);

    s = woman_umbrella();
    std::string long_prompt = "a woman with an umbrella";
    for (int i = 0; i < 70; ++i) {
        long_prompt += " x";
    }
    s.base_prompt = long_prompt;
    CHECK(kind_of(s) == ErrorKind::PromptTooLong);
}
