// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "clora/tensor.hpp"

namespace clora {

// Low-rank update for one weight matrix W (d_out x d_in, y = W x):
//   W' = W + scale * (alpha / rank) * up * down
struct LoRALayerDelta {
    std::string layer_key;
    Matrix down;  // rank x d_in
    Matrix up;    // d_out x rank
    double alpha = 1.0;

    int rank() const { return static_cast<int>(down.rows()); }
    // Throws AdapterMismatch on inconsistent shapes or non-positive alpha.
    void validate() const;
};

struct LoRAAdapter {
    std::string lora_id;
    std::map<std::string, LoRALayerDelta> deltas;
    std::map<std::string, LoRALayerDelta> text_encoder_deltas;
    std::string trigger;

    bool empty() const { return deltas.empty() && text_encoder_deltas.empty(); }
};

using AdapterPtr = std::shared_ptr<const LoRAAdapter>;

struct LoRASetEntry {
    AdapterPtr adapter;
    double weight = 1.0;
};

// Adapters applied together; an empty set is the base model.
struct LoRASet {
    std::vector<LoRASetEntry> entries;

    bool empty() const { return entries.empty(); }
    static LoRASet single(AdapterPtr adapter, double weight = 1.0);
};

Matrix apply_delta(const Matrix& base, const LoRALayerDelta& delta, double scale);

// Linear merge by rank stacking: per layer, up matrices are concatenated with
// w_i * alpha_i / r_i folded in, down matrices stacked, alpha set to the stacked rank.
// Zero-weight entries are dropped.
LoRAAdapter weighted_merge(const LoRASet& set);

// Tensor-container (safetensors) I/O using the kohya key layout:
//   lora_unet_<layer>.lora_down.weight / .lora_up.weight / .alpha
//   lora_te_<layer>.*  for text-encoder deltas
// PEFT-style "unet.<layer>.lora_A.weight" / "lora_B.weight" files are also read.
LoRAAdapter load_adapter(const std::filesystem::path& path);
void save_adapter(const LoRAAdapter& adapter, const std::filesystem::path& path);

}  // namespace clora
