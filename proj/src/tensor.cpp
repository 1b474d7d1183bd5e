// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/tensor.hpp"

#include <cmath>
#include <numbers>

namespace clora {

bool all_finite(const Matrix& m) {
    return m.allFinite();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double GaussianSource::uniform_open() {
    // 53 random bits mapped into (0, 1).
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double GaussianSource::next() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Matrix GaussianSource::matrix(Eigen::Index rows, Eigen::Index cols, double scale) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = scale * next();
        }
    }
    return m;
}

LatentState random_latent(std::uint64_t seed, int channels, int height, int width) {
    GaussianSource source(mix_seed(seed, 0x1A7E));
    LatentState z;
    z.data = source.matrix(channels, static_cast<Eigen::Index>(height) * width);
    z.height = height;
    z.width = width;
    z.step_index = 0;
    return z;
}

}  // namespace clora
