// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/composition.hpp"

#include <algorithm>
#include <set>

#include "clora/errors.hpp"

namespace clora {

std::vector<const ConceptBinding*> CompositionSpec::content_bindings() const {
    std::vector<const ConceptBinding*> out;
    for (const auto& b : bindings) {
        if (b.kind == BindingKind::Content) {
            out.push_back(&b);
        }
    }
    return out;
}

std::vector<const ConceptBinding*> CompositionSpec::style_bindings() const {
    std::vector<const ConceptBinding*> out;
    for (const auto& b : bindings) {
        if (b.kind == BindingKind::Style) {
            out.push_back(&b);
        }
    }
    return out;
}

std::optional<std::vector<int>> find_token_span(const std::vector<Token>& haystack,
                                                const std::vector<Token>& needle) {
    if (needle.empty() || needle.size() > haystack.size()) {
        return std::nullopt;
    }
    for (std::size_t start = 0; start + needle.size() <= haystack.size(); ++start) {
        bool match = true;
        for (std::size_t k = 0; k < needle.size(); ++k) {
            const Token& h = haystack[start + k];
            if (h.special || h.text != needle[k].text) {
                match = false;
                break;
            }
        }
        if (match) {
            std::vector<int> span(needle.size());
            for (std::size_t k = 0; k < needle.size(); ++k) {
                span[k] = static_cast<int>(start + k);
            }
            return span;
        }
    }
    return std::nullopt;
}

namespace {

std::vector<int> locate_concept(const Tokenization& prompt, const ConceptBinding& binding,
                                const Tokenizer& tokenizer) {
    const auto needle = tokenizer.split(binding.concept_text);
    require(!needle.empty(), ErrorKind::InvalidSpec,
            "concept text for '" + binding.lora_id + "' is empty");
    auto span = find_token_span(prompt.tokens, needle);
    require(span.has_value(), ErrorKind::SpanNotFound,
            "concept '" + binding.concept_text + "' does not occur in the base prompt");
    return *span;
}

// Concept spans of every content binding in the base prompt, in binding order.
std::vector<std::vector<int>> base_spans(const CompositionSpec& spec, const Tokenization& base,
                                         const Tokenizer& tokenizer) {
    std::vector<std::vector<int>> spans;
    for (const auto* b : spec.content_bindings()) {
        spans.push_back(locate_concept(base, *b, tokenizer));
    }
    return spans;
}

std::vector<int> shifted(const std::vector<int>& span, int insert_at, int count) {
    std::vector<int> out = span;
    for (int& idx : out) {
        if (idx >= insert_at) {
            idx += count;
        }
    }
    return out;
}

}  // namespace

void validate_spec(const CompositionSpec& spec, const Tokenizer& tokenizer) {
    const auto content = spec.content_bindings();
    require(!content.empty(), ErrorKind::InvalidSpec, "at least one content binding is required");

    std::set<std::string> ids;
    for (const auto& b : spec.bindings) {
        require(!b.lora_id.empty(), ErrorKind::InvalidSpec, "binding with empty lora id");
        require(ids.insert(b.lora_id).second, ErrorKind::InvalidSpec,
                "duplicate lora id '" + b.lora_id + "'");
        require(!tokenizer.split(b.trigger_text()).empty(), ErrorKind::InvalidSpec,
                "trigger for '" + b.lora_id + "' is empty");
    }

    const Tokenization base = tokenizer.tokenize(spec.base_prompt);
    const auto spans = base_spans(spec, base, tokenizer);
    std::set<int> used;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        for (int idx : spans[i]) {
            require(used.insert(idx).second, ErrorKind::InvalidSpec,
                    "concept '" + content[i]->concept_text + "' overlaps another concept span");
        }
    }
}

std::vector<PromptVariant> build_variants(const CompositionSpec& spec, const Tokenizer& tokenizer) {
    validate_spec(spec, tokenizer);
    const auto content = spec.content_bindings();
    const Tokenization base = tokenizer.tokenize(spec.base_prompt);
    const auto spans = base_spans(spec, base, tokenizer);

    std::vector<PromptVariant> variants;
    PromptVariant original;
    original.variant_id = 0;
    original.kind = VariantKind::Original;
    original.text = spec.base_prompt;
    original.token_count = static_cast<int>(base.size());
    for (std::size_t i = 0; i < content.size(); ++i) {
        original.token_spans[content[i]->concept_text] = spans[i];
    }
    variants.push_back(std::move(original));

    for (std::size_t b = 0; b < content.size(); ++b) {
        const ConceptBinding& binding = *content[b];
        const int insert_at = spans[b].front();
        const std::size_t char_at = base.tokens[static_cast<std::size_t>(insert_at)].begin;
        const std::string& trigger = binding.trigger_text();

        PromptVariant v;
        v.variant_id = static_cast<int>(b) + 1;
        v.kind = VariantKind::Content;
        v.active_lora = binding.lora_id;
        v.text = spec.base_prompt.substr(0, char_at) + trigger + " " + spec.base_prompt.substr(char_at);

        const Tokenization tok = tokenizer.tokenize(v.text);
        const int trigger_count = static_cast<int>(tok.size() - base.size());
        require(trigger_count >= 1, ErrorKind::ContractViolation,
                "trigger insertion did not add tokens");
        std::vector<int> trigger_span(static_cast<std::size_t>(trigger_count));
        for (int k = 0; k < trigger_count; ++k) {
            trigger_span[static_cast<std::size_t>(k)] = insert_at + k;
        }
        v.trigger_span = std::move(trigger_span);
        v.token_count = static_cast<int>(tok.size());

        for (std::size_t i = 0; i < content.size(); ++i) {
            auto span = shifted(spans[i], insert_at, trigger_count);
            for (std::size_t k = 0; k < span.size(); ++k) {
                const auto& moved = tok.tokens[static_cast<std::size_t>(span[k])];
                const auto& orig = base.tokens[static_cast<std::size_t>(spans[i][k])];
                require(moved.text == orig.text, ErrorKind::ContractViolation,
                        "token span shifted inconsistently for '" + content[i]->concept_text + "'");
            }
            v.token_spans[content[i]->concept_text] = std::move(span);
        }
        variants.push_back(std::move(v));
    }
    return variants;
}

std::vector<PromptVariant> build_style_variants(const CompositionSpec& spec,
                                                const Tokenizer& tokenizer) {
    validate_spec(spec, tokenizer);
    const auto content = spec.content_bindings();
    const Tokenization base = tokenizer.tokenize(spec.base_prompt);
    const auto spans = base_spans(spec, base, tokenizer);

    std::vector<PromptVariant> variants;
    int next_id = static_cast<int>(content.size()) + 1;
    for (const auto* binding : spec.style_bindings()) {
        PromptVariant v;
        v.variant_id = next_id++;
        v.kind = VariantKind::Style;
        v.active_lora = binding->lora_id;
        const bool needs_space =
            !spec.base_prompt.empty() && spec.base_prompt.back() != ' ';
        v.text = spec.base_prompt + (needs_space ? " " : "") + binding->trigger_text();

        const Tokenization tok = tokenizer.tokenize(v.text);
        const int trigger_count = static_cast<int>(tok.size() - base.size());
        // Appended tokens sit right before the end marker.
        const int first = static_cast<int>(base.size()) - 1;
        std::vector<int> trigger_span(static_cast<std::size_t>(trigger_count));
        for (int k = 0; k < trigger_count; ++k) {
            trigger_span[static_cast<std::size_t>(k)] = first + k;
        }
        v.trigger_span = std::move(trigger_span);
        v.token_count = static_cast<int>(tok.size());
        for (std::size_t i = 0; i < content.size(); ++i) {
            v.token_spans[content[i]->concept_text] = spans[i];
        }
        variants.push_back(std::move(v));
    }
    return variants;
}

std::vector<ConceptGroup> build_groups(const std::vector<PromptVariant>& variants,
                                       const CompositionSpec& spec) {
    std::vector<ConceptGroup> groups;
    std::set<TokenRef> seen;
    for (const auto* binding : spec.content_bindings()) {
        ConceptGroup group;
        group.concept_text = binding->concept_text;
        group.lora_id = binding->lora_id;
        for (const auto& v : variants) {
            if (v.kind == VariantKind::Style) {
                continue;
            }
            std::vector<int> indices;
            if (v.active_lora == binding->lora_id && v.trigger_span) {
                indices = *v.trigger_span;
            }
            const auto span = v.token_spans.find(binding->concept_text);
            require(span != v.token_spans.end(), ErrorKind::ContractViolation,
                    "variant " + std::to_string(v.variant_id) + " lacks span for '" +
                        binding->concept_text + "'");
            indices.insert(indices.end(), span->second.begin(), span->second.end());
            std::sort(indices.begin(), indices.end());
            for (int idx : indices) {
                require(idx >= 0 && idx < v.token_count, ErrorKind::ContractViolation,
                        "token index out of range in variant " + std::to_string(v.variant_id));
                const TokenRef ref{v.variant_id, idx};
                require(seen.insert(ref).second, ErrorKind::ContractViolation,
                        "concept groups overlap at variant " + std::to_string(v.variant_id) +
                            " token " + std::to_string(idx));
                group.members.push_back(ref);
            }
        }
        groups.push_back(std::move(group));
    }
    return groups;
}

std::map<std::string, std::vector<TokenRef>> mask_token_sources(
    const CompositionSpec& spec, const std::vector<PromptVariant>& variants) {
    std::map<std::string, std::vector<TokenRef>> sources;
    for (const auto* binding : spec.content_bindings()) {
        auto own = std::find_if(variants.begin(), variants.end(), [&](const PromptVariant& v) {
            return v.kind == VariantKind::Content && v.active_lora == binding->lora_id;
        });
        require(own != variants.end(), ErrorKind::ContractViolation,
                "no applied variant for '" + binding->lora_id + "'");
        std::vector<int> indices = own->trigger_span.value_or(std::vector<int>{});
        const auto& span = own->token_spans.at(binding->concept_text);
        indices.insert(indices.end(), span.begin(), span.end());
        std::sort(indices.begin(), indices.end());
        auto& out = sources[binding->lora_id];
        for (int idx : indices) {
            out.push_back(TokenRef{own->variant_id, idx});
        }
    }
    return sources;
}

}  // namespace clora
