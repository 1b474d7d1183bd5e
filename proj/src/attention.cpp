// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/attention.hpp"

#include <cmath>
#include <limits>

#include "clora/errors.hpp"
#include "clora/mask_fusion.hpp"

namespace clora {

Matrix TokenMaps::spatial(int index) const {
    require(index >= 0 && index < token_count(), ErrorKind::ContractViolation,
            "token index " + std::to_string(index) + " out of range");
    Matrix out(height, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out(y, x) = maps(index, y * width + x);
        }
    }
    return out;
}

namespace {

bool matches(const AttentionRecord& r, int height, int width) { return r.height == height && r.width == width; }

double total_heads(std::span<const AttentionRecord> records, int height, int width) {
    double heads = 0.0;
    for (const auto& r : records) {
        if (matches(r, height, width)) {
            heads += r.head_count;
        }
    }
    return heads;
}

}  // namespace

TokenMaps reduce_maps(std::span<const AttentionRecord> records, int height, int width) {
    const double heads = total_heads(records, height, width);
    require(heads > 0.0, ErrorKind::ResolutionUnavailable,
            "no attention captured at " + std::to_string(height) + "x" + std::to_string(width));
    TokenMaps out;
    out.height = height;
    out.width = width;
    bool first = true;
    for (const auto& r : records) {
        if (!matches(r, height, width)) {
            continue;
        }
        require(r.map.rows() == static_cast<Eigen::Index>(height) * width, ErrorKind::ContractViolation,
                r.layer_id + ": map rows do not match its resolution");
        const double w = r.head_count / heads;
        if (first) {
            out.maps = w * r.map.transpose();
            first = false;
        } else {
            require(r.map.cols() == out.maps.rows(), ErrorKind::ContractViolation,
                    r.layer_id + ": token count differs between layers");
            out.maps += w * r.map.transpose();
        }
    }
    return out;
}

std::vector<Matrix> reduce_maps_backward(std::span<const AttentionRecord> records, const Matrix& d_maps, int height,
                                         int width) {
    const double heads = total_heads(records, height, width);
    std::vector<Matrix> grads;
    grads.reserve(records.size());
    for (const auto& r : records) {
        if (!matches(r, height, width) || heads <= 0.0) {
            grads.push_back(Matrix::Zero(r.map.rows(), r.map.cols()));
            continue;
        }
        grads.push_back((r.head_count / heads) * d_maps.transpose());
    }
    return grads;
}

double cosine_sim(const Vector& u, const Vector& v) {
    require(u.size() == v.size(), ErrorKind::ContractViolation, "cosine of vectors with different sizes");
    const double nu = u.norm();
    const double nv = v.norm();
    require(nu > 0.0 && nv > 0.0, ErrorKind::ZeroVector, "cosine similarity of a zero-norm map");
    return u.dot(v) / (nu * nv);
}

double infonce_loss(const GroupTensors& groups, double temperature) {
    return infonce_loss_with_grad(groups, temperature, nullptr);
}

double infonce_loss_with_grad(const GroupTensors& groups, double temperature, GroupTensors* grads) {
    require(temperature > 0.0, ErrorKind::ContractViolation, "temperature must be > 0");
    for (const auto& g : groups) {
        require(!g.empty(), ErrorKind::EmptyGroup, "concept group has no members");
    }

    std::vector<const Vector*> members;
    std::vector<std::size_t> label;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        for (const auto& m : groups[gi]) {
            members.push_back(&m);
            label.push_back(gi);
        }
    }
    const auto n = members.size();
    if (grads != nullptr) {
        grads->clear();
        for (const auto& g : groups) {
            std::vector<Vector> zeros;
            for (const auto& m : g) {
                zeros.push_back(Vector::Zero(m.size()));
            }
            grads->push_back(std::move(zeros));
        }
    }

    Matrix sim(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            sim(i, j) = sim(j, i) = cosine_sim(*members[i], *members[j]);
        }
    }

    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            pairs += (i != j && label[i] == label[j]) ? 1 : 0;
        }
    }
    if (pairs == 0) {
        return 0.0;
    }

    // dL/ds accumulated over all terms.
    Matrix d_sim = Matrix::Zero(n, n);
    double loss = 0.0;
    std::vector<double> logits;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j || label[i] != label[j]) {
                continue;
            }
            logits.clear();
            idx.clear();
            logits.push_back(sim(i, j) / temperature);
            idx.push_back(j);
            for (std::size_t k = 0; k < n; ++k) {
                if (label[k] != label[i]) {
                    logits.push_back(sim(i, k) / temperature);
                    idx.push_back(k);
                }
            }
            double peak = -std::numeric_limits<double>::infinity();
            for (double l : logits) {
                peak = std::max(peak, l);
            }
            double z = 0.0;
            for (double l : logits) {
                z += std::exp(l - peak);
            }
            const double log_z = peak + std::log(z);
            loss += log_z - logits[0];
            if (grads != nullptr) {
                for (std::size_t t = 0; t < logits.size(); ++t) {
                    const double p = std::exp(logits[t] - log_z);
                    d_sim(i, idx[t]) += (p - (t == 0 ? 1.0 : 0.0)) / temperature;
                }
            }
        }
    }
    const double scale = 1.0 / static_cast<double>(pairs);
    loss *= scale;

    if (grads != nullptr) {
        std::vector<Vector> flat;
        flat.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            flat.push_back(Vector::Zero(members[i]->size()));
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double g = d_sim(i, j) * scale;
                if (g == 0.0) {
                    continue;
                }
                const Vector& u = *members[i];
                const Vector& v = *members[j];
                const double nu = u.norm();
                const double nv = v.norm();
                const double s = sim(i, j);
                flat[i] += g * (v / (nu * nv) - s * u / (nu * nu));
                flat[j] += g * (u / (nu * nv) - s * v / (nv * nv));
            }
        }
        std::size_t at = 0;
        for (auto& g : *grads) {
            for (auto& m : g) {
                m = std::move(flat[at++]);
            }
        }
    }
    return loss;
}

double group_overlap_iou(const Matrix& a, const Matrix& b, double threshold) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::ContractViolation,
            "IoU of maps with different shapes");
    const Mask ma = binary_mask(a, threshold);
    const Mask mb = binary_mask(b, threshold);
    const auto inter = (ma.min(mb)).cast<int>().sum();
    const auto uni = (ma.max(mb)).cast<int>().sum();
    if (uni == 0) {
        return 1.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

GroupTensors gather_groups(const std::vector<ConceptGroup>& groups, const AttentionMapSet& maps) {
    GroupTensors out;
    out.reserve(groups.size());
    for (const auto& g : groups) {
        require(!g.members.empty(), ErrorKind::EmptyGroup, "group '" + g.concept_text + "' has no members");
        std::vector<Vector> tensors;
        for (const auto& ref : g.members) {
            auto it = maps.find(ref.variant_id);
            require(it != maps.end(), ErrorKind::ContractViolation,
                    "no maps captured for variant " + std::to_string(ref.variant_id));
            require(ref.token_index >= 0 && ref.token_index < it->second.token_count(), ErrorKind::ContractViolation,
                    "token " + std::to_string(ref.token_index) + " outside variant " +
                        std::to_string(ref.variant_id));
            tensors.push_back(it->second.token(ref.token_index));
        }
        out.push_back(std::move(tensors));
    }
    return out;
}

AttentionObjective make_contrastive_objective(std::vector<ConceptGroup> groups, double temperature) {
    return [groups = std::move(groups), temperature](const std::vector<std::vector<AttentionRecord>>& records,
                                                     std::vector<std::vector<Matrix>>& grads) {
        AttentionMapSet maps;
        for (std::size_t b = 0; b < records.size(); ++b) {
            maps.emplace(static_cast<int>(b), reduce_maps(records[b]));
        }
        const GroupTensors tensors = gather_groups(groups, maps);
        GroupTensors d_tensors;
        const double loss = infonce_loss_with_grad(tensors, temperature, &d_tensors);

        std::vector<Matrix> d_maps;
        for (const auto& [id, m] : maps) {
            d_maps.push_back(Matrix::Zero(m.maps.rows(), m.maps.cols()));
        }
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            for (std::size_t mi = 0; mi < groups[gi].members.size(); ++mi) {
                const TokenRef& ref = groups[gi].members[mi];
                d_maps[static_cast<std::size_t>(ref.variant_id)].row(ref.token_index) +=
                    d_tensors[gi][mi].transpose();
            }
        }
        grads.clear();
        for (std::size_t b = 0; b < records.size(); ++b) {
            grads.push_back(reduce_maps_backward(records[b], d_maps[b]));
        }
        return loss;
    };
}

double inter_group_iou(const std::vector<ConceptGroup>& groups, const AttentionMapSet& maps, double threshold) {
    const GroupTensors tensors = gather_groups(groups, maps);
    if (tensors.size() < 2) {
        return 0.0;
    }
    const auto& any = maps.begin()->second;
    std::vector<Matrix> means;
    for (const auto& g : tensors) {
        Vector mean = Vector::Zero(g.front().size());
        for (const auto& m : g) {
            mean += m;
        }
        mean /= static_cast<double>(g.size());
        Matrix spatial(any.height, any.width);
        for (int y = 0; y < any.height; ++y) {
            for (int x = 0; x < any.width; ++x) {
                spatial(y, x) = mean(y * any.width + x);
            }
        }
        means.push_back(std::move(spatial));
    }
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < means.size(); ++i) {
        for (std::size_t j = i + 1; j < means.size(); ++j) {
            total += group_overlap_iou(means[i], means[j], threshold);
            ++count;
        }
    }
    return total / count;
}

}  // namespace clora
