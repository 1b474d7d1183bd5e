// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/scheduler.hpp"

#include <cmath>
#include <string>

#include "clora/errors.hpp"

namespace clora {

double DdimSchedule::alpha_prev(int step) const {
    return step + 1 < size() ? alpha_bar[static_cast<std::size_t>(step + 1)] : final_alpha_bar;
}

DdimSchedule DdimSchedule::stable_diffusion(int steps) {
    constexpr int kTrainSteps = 1000;
    constexpr double kBetaStart = 0.00085;
    constexpr double kBetaEnd = 0.012;
    require(steps >= 1 && steps <= kTrainSteps, ErrorKind::InvalidSpec, "steps must be in [1, 1000]");

    std::vector<double> cumprod(kTrainSteps);
    const double lo = std::sqrt(kBetaStart);
    const double hi = std::sqrt(kBetaEnd);
    double running = 1.0;
    for (int i = 0; i < kTrainSteps; ++i) {
        const double root = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kTrainSteps - 1);
        running *= 1.0 - root * root;
        cumprod[static_cast<std::size_t>(i)] = running;
    }

    DdimSchedule s;
    const int ratio = kTrainSteps / steps;
    for (int i = steps - 1; i >= 0; --i) {
        const int t = i * ratio + 1;
        s.timesteps.push_back(t);
        s.alpha_bar.push_back(cumprod[static_cast<std::size_t>(t)]);
    }
    s.final_alpha_bar = cumprod[0];
    return s;
}

DdimSchedule DdimSchedule::from_alphas(std::vector<double> alpha_bar, double final_alpha_bar) {
    DdimSchedule s;
    s.timesteps.resize(alpha_bar.size());
    for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
        s.timesteps[i] = static_cast<int>(alpha_bar.size() - i);
    }
    s.alpha_bar = std::move(alpha_bar);
    s.final_alpha_bar = final_alpha_bar;
    return s;
}

LatentState sampler_step(const LatentState& z, const Matrix& noise_pred, const DdimSchedule& schedule) {
    require(z.step_index >= 0, ErrorKind::ContractViolation, "negative step index");
    require(z.step_index < schedule.size(), ErrorKind::ScheduleExhausted,
            "step " + std::to_string(z.step_index) + " of a " + std::to_string(schedule.size()) + "-step schedule");
    require(noise_pred.rows() == z.data.rows() && noise_pred.cols() == z.data.cols(),
            ErrorKind::ContractViolation, "noise prediction shape differs from latent");

    const double a_t = schedule.alpha_bar[static_cast<std::size_t>(z.step_index)];
    const double a_prev = schedule.alpha_prev(z.step_index);
    const double sqrt_a_t = std::sqrt(a_t);
    const double sqrt_one_minus_t = std::sqrt(1.0 - a_t);

    LatentState next = z;
    const Matrix x0 = (z.data - sqrt_one_minus_t * noise_pred) / sqrt_a_t;
    next.data = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * noise_pred;
    next.step_index = z.step_index + 1;
    next.timestep = next.step_index < schedule.size() ? schedule.timesteps[static_cast<std::size_t>(next.step_index)] : 0;
    return next;
}

}  // namespace clora
