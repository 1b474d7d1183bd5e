// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clora/backend.hpp"
#include "clora/config.hpp"
#include "clora/evaluation.hpp"
#include "clora/guidance.hpp"

namespace clora {

inline constexpr const char* kVersion = "0.1.0";

enum class Method { CLoRA, Merge, Composite, Switch };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);

struct RunOptions {
    Method method = Method::CLoRA;
    int steps = 50;
    // Classifier-free guidance scale; unset uses the backend default.
    std::optional<double> cfg_scale;
    // Per binding, in binding order; empty means 1 for every adapter.
    std::vector<double> merge_weights;
    // false runs clora with the guidance stage compiled out of the step loop.
    bool guidance_module = true;
    // Inter-group attention IoU per step (an extra capture pass for baselines).
    bool measure_iou = true;
    // JSON Lines dump of every captured token map.
    std::optional<std::filesystem::path> debug_attn;
    // Directory for per-step mask PNGs.
    std::optional<std::filesystem::path> debug_masks;
};

struct RunResult {
    Image image;
    LatentState final_latent;
    std::vector<PromptVariant> variants;  // original, content, then style variants
    std::vector<ConceptGroup> groups;
    GuidanceTrace trace;
    std::vector<double> iou_per_step;
    // JSON document sufficient to replay the run.
    std::string metadata;

    double mean_iou() const;
};

RunResult generate(const ComposeConfig& config, const AdapterMap& adapters, DenoiserBackend& backend,
                   const RunOptions& options);

// Re-runs a generation from its metadata document alone.
RunResult replay(std::string_view metadata, DenoiserBackend& backend);

// Plain sampling of one prompt under one LoRA set.
LatentState sample_plain(std::string_view prompt, const LoRASet& loras, std::uint64_t seed, DenoiserBackend& backend,
                         int steps, std::optional<double> cfg_scale = std::nullopt);

// Prompt used for a binding's single-LoRA reference image.
std::string reference_prompt(const ConceptBinding& binding);

// Prompt with every content trigger inserted and every style trigger appended.
std::string merged_prompt(const CompositionSpec& spec, const Tokenizer& tokenizer);

// One reference image per binding, generated from its LoRA alone.
std::vector<ReferenceSet> make_references(const ComposeConfig& config, const AdapterMap& adapters,
                                          DenoiserBackend& backend, int steps,
                                          std::optional<double> cfg_scale = std::nullopt);

}  // namespace clora
