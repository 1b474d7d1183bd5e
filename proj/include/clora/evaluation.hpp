// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "clora/image.hpp"
#include "clora/tensor.hpp"

namespace clora {

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual Vector features(const Image& image) = 0;
};

// Box-downsampled grayscale, mean-centred, unit norm.
class ToyExtractor final : public FeatureExtractor {
public:
    explicit ToyExtractor(int grid = 8) : grid_(grid) {}
    std::string name() const override { return "toy"; }
    Vector features(const Image& image) override;

private:
    int grid_;
};

// Self-supervised ViT features. The C++ build ships no ViT runtime: construction
// throws ExtractorUnavailable. The Python module can supply one instead.
class DinoExtractor final : public FeatureExtractor {
public:
    DinoExtractor();
    std::string name() const override { return "dino"; }
    Vector features(const Image& image) override;
};

struct LoraSimilarity {
    std::string lora_id;
    double similarity = 0.0;
};

struct EvalReport {
    std::vector<LoraSimilarity> per_lora;
    double min_sim = 0.0;
    double avg_sim = 0.0;
    double max_sim = 0.0;
};

// min / mean / max over the per-LoRA similarities (all zero when empty).
EvalReport make_report(std::vector<LoraSimilarity> per_lora);

struct ReferenceSet {
    std::string lora_id;
    std::vector<Image> images;
};

// Per LoRA: mean cosine similarity between the composed image's features and
// each reference image's features.
EvalReport evaluate(const Image& composed, const std::vector<ReferenceSet>& references,
                    FeatureExtractor& extractor);

}  // namespace clora
