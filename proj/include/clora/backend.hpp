// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clora/composition.hpp"
#include "clora/image.hpp"
#include "clora/lora.hpp"
#include "clora/scheduler.hpp"
#include "clora/tensor.hpp"
#include "clora/tokenizer.hpp"

namespace clora {

struct PromptEmbedding {
    Matrix data;  // tokens x text_dim
    int variant_id = 0;
    std::optional<std::string> encoder_lora;

    int token_count() const { return static_cast<int>(data.rows()); }
};

// Cross-attention probabilities of one layer, averaged over head_count heads.
// Rows are pixels (y * width + x), columns are tokens; every row sums to 1.
struct AttentionRecord {
    std::string layer_id;
    int head_count = 1;
    int height = 0;
    int width = 0;
    Matrix map;
};

struct StepOutput {
    Matrix noise_prediction;  // shaped like LatentState::data
    std::vector<AttentionRecord> records;
};

// One prompt branch evaluated on a shared latent.
struct Conditioning {
    const PromptEmbedding* embedding = nullptr;
    const LoRASet* loras = nullptr;
};

// Scalar objective over the captured records of every branch. Must fill `grads`
// with one matrix per record (same shape as record.map), per branch.
using AttentionObjective = std::function<double(const std::vector<std::vector<AttentionRecord>>& records,
                                                std::vector<std::vector<Matrix>>& grads)>;

struct LatentGradient {
    double loss = 0.0;
    Matrix grad;  // shaped like LatentState::data
    std::vector<StepOutput> outputs;  // forward results per branch at the evaluated latent
};

struct BackendInfo {
    std::string name;
    int latent_channels = 4;
    int latent_height = 16;
    int latent_width = 16;
    int capture_height = 16;
    int capture_width = 16;
    // Default classifier-free guidance scale; 1 disables the unconditional pass.
    double default_cfg_scale = 1.0;
};

// Diffusion backbone contract. A backend instance runs one generation at a time:
// LoRA patching mutates instance state for the duration of a call.
class DenoiserBackend {
public:
    virtual ~DenoiserBackend() = default;

    virtual const BackendInfo& info() const = 0;
    virtual const Tokenizer& tokenizer() const = 0;

    // Text encoder, patched with the text-encoder deltas of `loras` when present.
    virtual PromptEmbedding encode_text(std::string_view text, const LoRASet& loras) = 0;

    virtual StepOutput denoise_step(const LatentState& z, const PromptEmbedding& embedding, const LoRASet& loras,
                                    bool capture) = 0;

    // Exact reverse-mode gradient of objective(records of every branch) w.r.t. z.data.
    virtual LatentGradient grad_wrt_latent(const LatentState& z, std::span<const Conditioning> branches,
                                           const AttentionObjective& objective) = 0;

    virtual Image decode(const LatentState& z) = 0;

    virtual DdimSchedule make_schedule(int steps) const { return DdimSchedule::stable_diffusion(steps); }

    PromptEmbedding encode_prompt(const PromptVariant& variant, const LoRASet& loras);
};

}  // namespace clora
