// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>

namespace clora {

struct GuidanceConfig {
    // Contrastive temperature.
    double temperature = 0.5;
    // Base latent step size; decays linearly over the schedule.
    double step_scale = 20.0;
    // Sampler indices at which the update is repeated inner_iterations times.
    std::set<int> refinement_steps{0, 10, 20};
    int inner_iterations = 5;
    // No latent updates at or after this sampler index.
    int cutoff_step = 25;
    bool enabled = true;

    // Throws InvalidSpec when the config is inconsistent with a run of total_steps.
    void validate(int total_steps) const;
};

enum class UpsampleMode { Nearest };

enum class OverlapRule { Average, Priority };

struct MaskConfig {
    double threshold = 0.5;
    UpsampleMode upsample = UpsampleMode::Nearest;
    OverlapRule overlap_rule = OverlapRule::Average;
    bool enabled = true;

    void validate() const;
};

}  // namespace clora
