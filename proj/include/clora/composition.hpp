// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clora/settings.hpp"
#include "clora/tokenizer.hpp"

namespace clora {

enum class BindingKind { Content, Style };

struct ConceptBinding {
    std::string concept_text;
    std::string lora_id;
    BindingKind kind = BindingKind::Content;
    // Placeholder inserted into the prompt; empty means "use lora_id".
    std::string trigger;

    const std::string& trigger_text() const { return trigger.empty() ? lora_id : trigger; }
};

struct CompositionSpec {
    std::string base_prompt;
    std::vector<ConceptBinding> bindings;
    std::uint64_t seed = 0;
    GuidanceConfig guidance;
    MaskConfig mask;

    std::vector<const ConceptBinding*> content_bindings() const;
    std::vector<const ConceptBinding*> style_bindings() const;
};

enum class VariantKind { Original, Content, Style };

struct PromptVariant {
    int variant_id = 0;
    VariantKind kind = VariantKind::Original;
    std::string text;
    std::optional<std::string> active_lora;
    // concept_text -> token indices in this variant's tokenization (markers included).
    std::map<std::string, std::vector<int>> token_spans;
    std::optional<std::vector<int>> trigger_span;
    int token_count = 0;
};

struct TokenRef {
    int variant_id = 0;
    int token_index = 0;

    auto operator<=>(const TokenRef&) const = default;
};

struct ConceptGroup {
    std::string concept_text;
    std::string lora_id;
    std::vector<TokenRef> members;
};

// Checks the CompositionSpec invariants against `tokenizer`; throws InvalidSpec,
// SpanNotFound or PromptTooLong.
void validate_spec(const CompositionSpec& spec, const Tokenizer& tokenizer);

// Original prompt plus one variant per content binding, in binding order.
std::vector<PromptVariant> build_variants(const CompositionSpec& spec, const Tokenizer& tokenizer);

// One variant per style binding, trigger appended to the prompt tail. Variant ids
// continue after the content variants.
std::vector<PromptVariant> build_style_variants(const CompositionSpec& spec,
                                                const Tokenizer& tokenizer);

std::vector<ConceptGroup> build_groups(const std::vector<PromptVariant>& variants,
                                       const CompositionSpec& spec);

// Per content LoRA: trigger and concept tokens taken from its own applied variant.
std::map<std::string, std::vector<TokenRef>> mask_token_sources(
    const CompositionSpec& spec, const std::vector<PromptVariant>& variants);

// Locates the first contiguous occurrence of `needle` tokens inside `haystack`;
// returns token indices or nullopt.
std::optional<std::vector<int>> find_token_span(const std::vector<Token>& haystack,
                                                const std::vector<Token>& needle);

}  // namespace clora
