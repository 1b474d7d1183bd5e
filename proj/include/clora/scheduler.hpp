// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "clora/tensor.hpp"

namespace clora {

// Deterministic DDIM schedule (eta = 0). Step i moves from alpha_bar[i] to
// alpha_bar[i + 1], or to final_alpha_bar after the last step.
struct DdimSchedule {
    std::vector<int> timesteps;
    std::vector<double> alpha_bar;
    double final_alpha_bar = 1.0;

    int size() const { return static_cast<int>(timesteps.size()); }
    double alpha_prev(int step) const;

    // Stable Diffusion v1.x training schedule (scaled-linear betas 0.00085..0.012
    // over 1000 steps), "leading" spacing with offset 1, no final alpha override.
    static DdimSchedule stable_diffusion(int steps);
    static DdimSchedule from_alphas(std::vector<double> alpha_bar, double final_alpha_bar);
};

// One DDIM update using the predicted noise. Throws ScheduleExhausted once every
// step of the schedule has been taken.
LatentState sampler_step(const LatentState& z, const Matrix& noise_pred, const DdimSchedule& schedule);

}  // namespace clora
