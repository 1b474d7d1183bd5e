// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/evaluation.hpp"

#include <algorithm>

#include "clora/attention.hpp"
#include "clora/errors.hpp"

namespace clora {

Vector ToyExtractor::features(const Image& image) {
    require(image.width > 0 && image.height > 0, ErrorKind::ContractViolation, "empty image");
    Vector sum = Vector::Zero(static_cast<Eigen::Index>(grid_) * grid_);
    Vector count = Vector::Zero(sum.size());
    for (int y = 0; y < image.height; ++y) {
        const int gy = y * grid_ / image.height;
        for (int x = 0; x < image.width; ++x) {
            const int gx = x * grid_ / image.width;
            double v = 0.0;
            for (int c = 0; c < image.channels; ++c) {
                v += image.at(x, y, c);
            }
            sum(gy * grid_ + gx) += v / image.channels;
            count(gy * grid_ + gx) += 1.0;
        }
    }
    Vector f = sum.cwiseQuotient(count.cwiseMax(1.0));
    f.array() -= f.mean();
    const double n = f.norm();
    if (n > 0.0) {
        f /= n;
    }
    return f;
}

DinoExtractor::DinoExtractor() {
    throw Error(ErrorKind::ExtractorUnavailable,
                "DINO features need a ViT runtime; use the Python module or --extractor toy");
}

Vector DinoExtractor::features(const Image&) {
    throw Error(ErrorKind::ExtractorUnavailable, "DINO extractor is not available");
}

EvalReport make_report(std::vector<LoraSimilarity> per_lora) {
    EvalReport r;
    r.per_lora = std::move(per_lora);
    if (r.per_lora.empty()) {
        return r;
    }
    r.min_sim = r.per_lora.front().similarity;
    r.max_sim = r.min_sim;
    double total = 0.0;
    for (const auto& s : r.per_lora) {
        r.min_sim = std::min(r.min_sim, s.similarity);
        r.max_sim = std::max(r.max_sim, s.similarity);
        total += s.similarity;
    }
    // Clamp guards the ordering against rounding in the mean.
    r.avg_sim = std::clamp(total / static_cast<double>(r.per_lora.size()), r.min_sim, r.max_sim);
    return r;
}

EvalReport evaluate(const Image& composed, const std::vector<ReferenceSet>& references, FeatureExtractor& extractor) {
    const Vector f = extractor.features(composed);
    std::vector<LoraSimilarity> sims;
    for (const auto& ref : references) {
        require(!ref.images.empty(), ErrorKind::ContractViolation, "no reference images for '" + ref.lora_id + "'");
        double total = 0.0;
        for (const auto& img : ref.images) {
            total += cosine_sim(f, extractor.features(img));
        }
        sims.push_back({ref.lora_id, total / static_cast<double>(ref.images.size())});
    }
    return make_report(std::move(sims));
}

}  // namespace clora
