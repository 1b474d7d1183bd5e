// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/settings.hpp"

#include <cmath>
#include <string>

#include "clora/errors.hpp"

namespace clora {

void GuidanceConfig::validate(int total_steps) const {
    require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::InvalidSpec,
            "guidance temperature must be positive");
    require(std::isfinite(step_scale) && step_scale >= 0.0, ErrorKind::InvalidSpec,
            "guidance step scale must be non-negative");
    require(inner_iterations >= 1, ErrorKind::InvalidSpec, "inner_iterations must be >= 1");
    require(cutoff_step >= 0 && cutoff_step <= total_steps, ErrorKind::InvalidSpec,
            "cutoff_step " + std::to_string(cutoff_step) + " outside [0, " +
                std::to_string(total_steps) + "]");
    for (int step : refinement_steps) {
        require(step >= 0 && step < cutoff_step, ErrorKind::InvalidSpec,
                "refinement step " + std::to_string(step) + " not in [0, cutoff_step)");
    }
}

void MaskConfig::validate() const {
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::InvalidSpec,
            "mask threshold must lie in (0, 1)");
}

}  // namespace clora
