// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <vector>

#include "clora/backend.hpp"
#include "clora/composition.hpp"
#include "clora/tensor.hpp"

namespace clora {

constexpr int kCaptureSize = 16;

// Per-token spatial maps of one variant: row k is token k's map flattened
// row-major over (height, width).
struct TokenMaps {
    Matrix maps;
    int height = kCaptureSize;
    int width = kCaptureSize;

    int token_count() const { return static_cast<int>(maps.rows()); }
    Vector token(int index) const { return maps.row(index).transpose(); }
    // Token map reshaped to height x width.
    Matrix spatial(int index) const;
};

// Captured maps per variant id.
using AttentionMapSet = std::map<int, TokenMaps>;

// Mean over layers and heads of the records captured at height x width;
// records at other resolutions are ignored. Throws ResolutionUnavailable when
// none match.
TokenMaps reduce_maps(std::span<const AttentionRecord> records, int height = kCaptureSize,
                      int width = kCaptureSize);

// Gradient of a loss w.r.t. the reduced maps, pulled back onto each record.
std::vector<Matrix> reduce_maps_backward(std::span<const AttentionRecord> records, const Matrix& d_maps,
                                         int height = kCaptureSize, int width = kCaptureSize);

// u.v / (|u| |v|); throws ZeroVector for a zero-norm input.
double cosine_sim(const Vector& u, const Vector& v);

// Per concept group, one flattened map per member.
using GroupTensors = std::vector<std::vector<Vector>>;

// Grouped InfoNCE: mean over ordered positive pairs (anchor j, positive j+) within
// a group of -log(exp(s(j,j+)/t) / (exp(s(j,j+)/t) + sum_n exp(s(j,n)/t))), with
// negatives n drawn from every other group. No positive pairs gives 0.
double infonce_loss(const GroupTensors& groups, double temperature);

// Same value; when `grads` is non-null it receives dL/d(member map), shaped like `groups`.
double infonce_loss_with_grad(const GroupTensors& groups, double temperature, GroupTensors* grads);

// IoU of the two maps after thresholding each at threshold * max.
double group_overlap_iou(const Matrix& a, const Matrix& b, double threshold);

// Gathers group member maps from per-variant token maps.
GroupTensors gather_groups(const std::vector<ConceptGroup>& groups, const AttentionMapSet& maps);

// Contrastive objective over branches ordered by variant id (branch i is variant i).
AttentionObjective make_contrastive_objective(std::vector<ConceptGroup> groups, double temperature);

// Mean pairwise IoU between the mean maps of different groups.
double inter_group_iou(const std::vector<ConceptGroup>& groups, const AttentionMapSet& maps, double threshold);

}  // namespace clora
