// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/guidance.hpp"

#include "clora/attention.hpp"
#include "clora/errors.hpp"

namespace clora {

LatentState latent_update(const LatentState& z, const Matrix& grad, double alpha) {
    require(grad.rows() == z.data.rows() && grad.cols() == z.data.cols(), ErrorKind::ContractViolation,
            "gradient shape differs from latent");
    require(alpha >= 0.0, ErrorKind::ContractViolation, "step size must be >= 0");
    require(all_finite(grad), ErrorKind::NumericalFailure, "non-finite latent gradient");
    LatentState out = z;
    out.data = z.data - alpha * grad;
    return out;
}

double alpha_schedule(int step_index, int total_steps, double alpha0) {
    require(total_steps > 0 && step_index >= 0 && step_index < total_steps, ErrorKind::ContractViolation,
            "step " + std::to_string(step_index) + " outside a run of " + std::to_string(total_steps));
    return alpha0 * (1.0 - static_cast<double>(step_index) / static_cast<double>(total_steps));
}

int inner_iterations_at(const GuidanceConfig& config, int step_index) {
    if (!config.enabled || step_index >= config.cutoff_step) {
        return 0;
    }
    return config.refinement_steps.contains(step_index) ? config.inner_iterations : 1;
}

std::vector<StepOutput> evaluate_branches(const LatentState& z, std::span<const Conditioning> branches,
                                          DenoiserBackend& backend) {
    std::vector<StepOutput> outputs;
    outputs.reserve(branches.size());
    for (const auto& b : branches) {
        outputs.push_back(backend.denoise_step(z, *b.embedding, *b.loras, true));
    }
    return outputs;
}

GuidedStep guided_step(const LatentState& z, std::span<const Conditioning> branches, std::size_t loss_branches,
                       const std::vector<ConceptGroup>& groups, DenoiserBackend& backend,
                       const GuidanceConfig& config, int total_steps) {
    require(loss_branches <= branches.size(), ErrorKind::ContractViolation, "more loss branches than branches");
    GuidedStep result;
    result.latent = z;
    result.trace.step_index = z.step_index;
    result.trace.timestep = z.timestep;

    const int iterations = inner_iterations_at(config, z.step_index);
    if (iterations == 0) {
        result.outputs = evaluate_branches(z, branches, backend);
        return result;
    }

    const auto loss_span = branches.first(loss_branches);
    const AttentionObjective objective = make_contrastive_objective(groups, config.temperature);
    result.trace.alpha = alpha_schedule(z.step_index, total_steps, config.step_scale);
    for (int it = 0; it < iterations; ++it) {
        const LatentGradient g = backend.grad_wrt_latent(result.latent, loss_span, objective);
        result.trace.losses.push_back(g.loss);
        result.trace.grad_norms.push_back(g.grad.norm());
        result.latent = latent_update(result.latent, g.grad, result.trace.alpha);
    }

    result.outputs = evaluate_branches(result.latent, branches, backend);
    std::vector<std::vector<AttentionRecord>> records;
    for (std::size_t b = 0; b < loss_branches; ++b) {
        records.push_back(result.outputs[b].records);
    }
    std::vector<std::vector<Matrix>> unused;
    result.trace.loss_after = objective(records, unused);
    return result;
}

}  // namespace clora
