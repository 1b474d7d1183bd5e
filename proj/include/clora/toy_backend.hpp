// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clora/backend.hpp"

namespace clora {

enum class Precision { Float32, Float64 };

struct ToyConfig {
    int channels = 4;
    int height = 16;
    int width = 16;
    int model_dim = 32;
    int heads = 4;
    int text_dim = 16;
    int mlp_dim = 64;
    int blocks = 2;
    // Weight of the network residual in the noise prediction: eps = x + eps_scale * net(x).
    double eps_scale = 0.2;
    std::uint64_t seed = 0x5EEDC10AULL;
    Precision precision = Precision::Float32;
    std::size_t max_tokens = 77;
};

// Small cross-attention denoiser: hashed token embeddings + one linear text
// projection; per block, multi-head cross-attention over the pixel grid followed
// by a tanh MLP, both residual. All weights are drawn from `seed`.
//
// Layer keys: text encoder "proj"; UNet "in_proj", "block<i>_to_q", "block<i>_to_k",
// "block<i>_to_v", "block<i>_to_out", "block<i>_mlp_in", "block<i>_mlp_out", "out_proj".
class ToyBackend final : public DenoiserBackend {
public:
    explicit ToyBackend(ToyConfig config = {});

    const BackendInfo& info() const override { return info_; }
    const Tokenizer& tokenizer() const override { return tokenizer_; }
    const ToyConfig& config() const { return config_; }

    PromptEmbedding encode_text(std::string_view text, const LoRASet& loras) override;
    StepOutput denoise_step(const LatentState& z, const PromptEmbedding& embedding, const LoRASet& loras,
                            bool capture) override;
    LatentGradient grad_wrt_latent(const LatentState& z, std::span<const Conditioning> branches,
                                   const AttentionObjective& objective) override;
    Image decode(const LatentState& z) override;

    // Base weights by layer key (UNet and text encoder share one namespace; the
    // text projection is "proj").
    const std::map<std::string, Matrix>& unet_weights() const { return unet_; }
    const Matrix& text_projection() const { return text_proj_; }

    // Raw (pre-projection) embedding of a single token id.
    Vector token_embedding(std::uint64_t id) const;
    // Query activations (pixels x model_dim) of every block for latent z and prompt
    // embedding under the base weights.
    std::vector<Matrix> block_queries(const LatentState& z, const PromptEmbedding& embedding);

    void set_precision(Precision p) { config_.precision = p; }

private:
    std::map<std::string, Matrix> patched_unet(const LoRASet& loras) const;
    Matrix patched_text_proj(const LoRASet& loras) const;
    void check_latent(const LatentState& z) const;

    ToyConfig config_;
    BackendInfo info_;
    WordTokenizer tokenizer_;
    std::map<std::string, Matrix> unet_;
    Vector in_bias_;
    Vector out_bias_;
    std::vector<Vector> mlp_bias_;
    Matrix time_proj_;
    Matrix positional_;  // pixels x model_dim
    Matrix text_proj_;
};

// Parameters for a synthetic adapter whose trigger token attends to one
// spatial region.
enum class Quadrant { NW, NE, SW, SE, Global };

Quadrant parse_quadrant(std::string_view name);
std::string_view to_string(Quadrant q);

struct ToyAdapterSpec {
    std::string lora_id;
    std::string trigger;
    Quadrant quadrant = Quadrant::NW;
    // Logit boost, in standard deviations of the query projection.
    double strength = 4.0;
    // Norm of the value-path delta that gives the adapter a distinct appearance.
    double appearance = 1.0;
    bool text_encoder = false;
};

// Deterministic toy adapter: rank-1 key deltas aligned with the region's query
// direction for the trigger token, plus a rank-1 value delta keyed on the trigger.
LoRAAdapter synth_toy_adapter(ToyBackend& backend, std::uint64_t seed, const ToyAdapterSpec& spec);

// Mean attention mass the trigger token places on each quadrant (NW, NE, SW, SE)
// for a probe latent under `adapter`, averaged over blocks.
std::array<double, 4> probe_quadrant_mass(ToyBackend& backend, const LoRAAdapter& adapter,
                                          std::string_view prompt, std::uint64_t probe_seed);

}  // namespace clora
