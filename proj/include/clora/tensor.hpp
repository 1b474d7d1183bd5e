// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace clora {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Spatial latent laid out as channels x (height * width); pixel p = y * width + x.
struct LatentState {
    Matrix data;
    int height = 0;
    int width = 0;
    // Index into the sampler schedule; 0 is the noisiest step.
    int step_index = 0;
    // Diffusion timestep the denoiser is conditioned on.
    int timestep = 0;

    int channels() const { return static_cast<int>(data.rows()); }
    int pixels() const { return height * width; }
};

bool all_finite(const Matrix& m);

// splitmix64 finalizer; used to derive independent streams from (seed, tag).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

// Standard normal draws from mt19937_64 via Box-Muller, so streams are identical
// across standard library implementations.
class GaussianSource {
public:
    explicit GaussianSource(std::uint64_t seed) : engine_(seed) {}

    double next();
    Matrix matrix(Eigen::Index rows, Eigen::Index cols, double scale = 1.0);

private:
    double uniform_open();

    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Gaussian latent of the given shape drawn from `seed`.
LatentState random_latent(std::uint64_t seed, int channels, int height, int width);

}  // namespace clora
