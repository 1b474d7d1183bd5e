// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/mask_fusion.hpp"

#include "clora/errors.hpp"
#include "clora/log.hpp"

namespace clora {

Mask binary_mask(const Matrix& attention, double threshold) {
    require(attention.size() > 0, ErrorKind::ContractViolation, "empty attention map");
    const double peak = attention.maxCoeff();
    if (!(peak > 0.0)) {
        warn("DegenerateMap: attention map has no positive entry; mask is empty");
        return Mask::Zero(attention.rows(), attention.cols());
    }
    const double cut = threshold * peak;
    return (attention.array() >= cut).cast<std::uint8_t>();
}

Mask lora_mask(std::span<const Matrix> sources, double threshold) {
    require(!sources.empty(), ErrorKind::ContractViolation, "lora_mask needs at least one source");
    Mask out = binary_mask(sources.front(), threshold);
    for (std::size_t i = 1; i < sources.size(); ++i) {
        const Mask m = binary_mask(sources[i], threshold);
        require(m.rows() == out.rows() && m.cols() == out.cols(), ErrorKind::ContractViolation,
                "mask sources differ in shape");
        out = out.max(m);
    }
    return out;
}

Mask upsample_mask(const Mask& mask, int height, int width) {
    require(mask.rows() > 0 && mask.cols() > 0, ErrorKind::ContractViolation, "empty mask");
    require(height % mask.rows() == 0 && width % mask.cols() == 0, ErrorKind::ContractViolation,
            "mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                " does not divide " + std::to_string(height) + "x" + std::to_string(width));
    const auto fy = height / mask.rows();
    const auto fx = width / mask.cols();
    Mask out(height, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out(y, x) = mask(y / fy, x / fx);
        }
    }
    return out;
}

MaskSet MaskSet::from_masks(std::vector<std::pair<std::string, Mask>> masks) {
    MaskSet set;
    set.per_lora = std::move(masks);
    if (set.per_lora.empty()) {
        return set;
    }
    Mask cover = set.per_lora.front().second;
    for (const auto& [id, m] : set.per_lora) {
        require(m.rows() == cover.rows() && m.cols() == cover.cols(), ErrorKind::ContractViolation,
                "masks differ in shape");
        cover = cover.max(m);
    }
    set.background = 1 - cover;
    return set;
}

const Mask* MaskSet::find(const std::string& lora_id) const {
    for (const auto& [id, m] : per_lora) {
        if (id == lora_id) {
            return &m;
        }
    }
    return nullptr;
}

LatentState fuse_latents(const LatentState& background, std::span<const NamedLatent> branches, const MaskSet& masks,
                         OverlapRule rule) {
    std::vector<const Mask*> branch_masks;
    for (const auto& b : branches) {
        require(b.latent.data.rows() == background.data.rows() && b.latent.data.cols() == background.data.cols(),
                ErrorKind::ContractViolation, "branch latent shape differs from background");
        const Mask* m = masks.find(b.lora_id);
        if (m != nullptr) {
            require(m->rows() == background.height && m->cols() == background.width, ErrorKind::ContractViolation,
                    "mask for '" + b.lora_id + "' is not at latent resolution");
        }
        branch_masks.push_back(m);
    }

    LatentState fused = background;
    for (int y = 0; y < background.height; ++y) {
        for (int x = 0; x < background.width; ++x) {
            const Eigen::Index p = static_cast<Eigen::Index>(y) * background.width + x;
            int covering = 0;
            for (std::size_t i = 0; i < branches.size(); ++i) {
                if (branch_masks[i] == nullptr || (*branch_masks[i])(y, x) == 0) {
                    continue;
                }
                if (rule == OverlapRule::Priority) {
                    fused.data.col(p) = branches[i].latent.data.col(p);
                    covering = 1;
                    break;
                }
                if (covering == 0) {
                    fused.data.col(p) = branches[i].latent.data.col(p);
                } else {
                    fused.data.col(p) += branches[i].latent.data.col(p);
                }
                ++covering;
            }
            if (covering > 1) {
                fused.data.col(p) /= static_cast<double>(covering);
            }
        }
    }
    return fused;
}

LatentState mean_latents(std::span<const NamedLatent> branches) {
    require(!branches.empty(), ErrorKind::ContractViolation, "no branches to average");
    LatentState out = branches.front().latent;
    for (std::size_t i = 1; i < branches.size(); ++i) {
        out.data += branches[i].latent.data;
    }
    out.data /= static_cast<double>(branches.size());
    return out;
}

}  // namespace clora
