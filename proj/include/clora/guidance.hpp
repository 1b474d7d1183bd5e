// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "clora/backend.hpp"
#include "clora/composition.hpp"
#include "clora/settings.hpp"
#include "clora/tensor.hpp"

namespace clora {

struct GuidanceStepTrace {
    int step_index = 0;
    int timestep = 0;
    double alpha = 0.0;
    // Loss before each inner update, and the gradient norm used by that update.
    std::vector<double> losses;
    std::vector<double> grad_norms;
    // Loss re-evaluated on the fresh forward pass after the last update.
    std::optional<double> loss_after;

    int iterations() const { return static_cast<int>(losses.size()); }
};

struct GuidanceTrace {
    std::vector<GuidanceStepTrace> steps;
};

// data - alpha * grad. Throws NumericalFailure on a non-finite gradient.
LatentState latent_update(const LatentState& z, const Matrix& grad, double alpha);

// alpha0 * (1 - step_index / total_steps).
double alpha_schedule(int step_index, int total_steps, double alpha0);

// Number of latent updates at `step_index` (0 past the cutoff or when disabled).
int inner_iterations_at(const GuidanceConfig& config, int step_index);

struct GuidedStep {
    LatentState latent;               // shared latent after the updates
    std::vector<StepOutput> outputs;  // every branch evaluated at `latent`, attention captured
    GuidanceStepTrace trace;
};

// Contrastive optimisation of the shared latent followed by one captured forward
// pass per branch. Only the first `loss_branches` branches (variant i at index i)
// enter the loss; the rest are just evaluated.
GuidedStep guided_step(const LatentState& z, std::span<const Conditioning> branches, std::size_t loss_branches,
                       const std::vector<ConceptGroup>& groups, DenoiserBackend& backend,
                       const GuidanceConfig& config, int total_steps);

// Forward pass of every branch at z with capture on.
std::vector<StepOutput> evaluate_branches(const LatentState& z, std::span<const Conditioning> branches,
                                          DenoiserBackend& backend);

}  // namespace clora
