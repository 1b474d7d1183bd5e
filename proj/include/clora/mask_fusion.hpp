// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clora/settings.hpp"
#include "clora/tensor.hpp"

namespace clora {

// height x width, entries 0 or 1.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// 1 where a >= threshold * max(a). An all-zero map yields an all-zero mask and a
// DegenerateMap warning.
Mask binary_mask(const Matrix& attention, double threshold);

// Union of binary_mask over every source map.
Mask lora_mask(std::span<const Matrix> sources, double threshold);

// Nearest-neighbour replication to height x width; sizes must be integer multiples.
Mask upsample_mask(const Mask& mask, int height, int width);

struct MaskSet {
    // Content masks in binding order.
    std::vector<std::pair<std::string, Mask>> per_lora;
    // Pixels covered by no content mask.
    Mask background;

    static MaskSet from_masks(std::vector<std::pair<std::string, Mask>> masks);
    const Mask* find(const std::string& lora_id) const;
};

struct NamedLatent {
    std::string lora_id;
    LatentState latent;
};

// Region-wise composite: background where no mask covers a pixel, the single
// covering branch where one does, and `rule` on overlaps (Average: mean of the
// covering branches; Priority: first in branch order). Masks must already be at
// latent resolution; the channel dimension broadcasts.
LatentState fuse_latents(const LatentState& background, std::span<const NamedLatent> branches,
                         const MaskSet& masks, OverlapRule rule);

// Masking disabled: unweighted mean of the branches.
LatentState mean_latents(std::span<const NamedLatent> branches);

}  // namespace clora
