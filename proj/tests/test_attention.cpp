// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>

#include "clora/attention.hpp"
#include "clora/errors.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace clora;
using test_util::error_kind;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

AttentionRecord record(const Matrix& map, int heads = 1, int size = 16) {
    return {"layer", heads, size, size, map};
}

GroupTensors random_groups(std::mt19937_64& rng, int groups, int members, int length) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    GroupTensors out(static_cast<std::size_t>(groups));
    for (auto& g : out) {
        for (int m = 0; m < members; ++m) {
            Vector v(length);
            for (int i = 0; i < length; ++i) v(i) = u(rng);
            g.push_back(v);
        }
    }
    return out;
}

oracle::Groups to_oracle(const GroupTensors& groups) {
    oracle::Groups out;
    for (const auto& g : groups) {
        out.emplace_back();
        for (const auto& v : g) out.back().emplace_back(v.data(), v.data() + v.size());
    }
    return out;
}

}  // namespace

TEST_CASE("reduce_maps of a single record is its transpose") {
    GaussianSource g(1);
    const Matrix m = g.matrix(256, 5).cwiseAbs();
    const AttentionRecord r = record(m);
    const TokenMaps t = reduce_maps(std::span(&r, 1));
    CHECK(t.maps == m.transpose());
    CHECK(t.token_count() == 5);
    CHECK(t.spatial(2)(1, 3) == m(16 + 3, 2));
}

TEST_CASE("reduce_maps averages over layers and heads") {
    GaussianSource g(2);
    const Matrix a = g.matrix(256, 3).cwiseAbs();
    const Matrix b = g.matrix(256, 3).cwiseAbs();
    std::vector<AttentionRecord> same{record(a), record(a)};
    CHECK((reduce_maps(same).maps - a.transpose()).cwiseAbs().maxCoeff() < 1e-15);

    // Head-weighted: one layer with 1 head, one with 3 heads.
    std::vector<AttentionRecord> recs{record(a, 1), record(b, 3)};
    const Matrix expect = (0.25 * a + 0.75 * b).transpose();
    CHECK((reduce_maps(recs).maps - expect).cwiseAbs().maxCoeff() < 1e-15);

    // Records at another resolution are ignored.
    recs.push_back(record(Matrix::Ones(64, 3), 1, 8));
    CHECK((reduce_maps(recs).maps - expect).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("reduce_maps without a matching resolution") {
    const AttentionRecord r = record(Matrix::Ones(64, 2), 1, 8);
    CHECK(error_kind([&] { reduce_maps(std::span(&r, 1)); }) == ErrorKind::ResolutionUnavailable);
    CHECK(error_kind([&] { reduce_maps(std::span<const AttentionRecord>()); }) == ErrorKind::ResolutionUnavailable);
}

TEST_CASE("reduce_maps_backward pulls back the weighted mean") {
    GaussianSource g(3);
    std::vector<AttentionRecord> recs{record(Matrix::Zero(256, 2), 1), record(Matrix::Zero(256, 2), 3),
                                      record(Matrix::Zero(64, 2), 1, 8)};
    const Matrix d = g.matrix(2, 256);
    const auto back = reduce_maps_backward(recs, d);
    REQUIRE(back.size() == 3);
    CHECK((back[0] - 0.25 * d.transpose()).norm() < 1e-15);
    CHECK((back[1] - 0.75 * d.transpose()).norm() < 1e-15);
    CHECK(back[2].isZero(0.0));
}

TEST_CASE("cosine similarity") {
    CHECK(cosine_sim(vec({1, 2, 2}), vec({2, 1, 2})) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
    CHECK(cosine_sim(vec({1, 0}), vec({0, 1})) == 0.0);
    CHECK(cosine_sim(vec({3, 4}), vec({3, 4})) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(error_kind([] { cosine_sim(vec({0, 0}), vec({1, 0})); }) == ErrorKind::ZeroVector);
}

TEST_CASE("InfoNCE closed form") {
    const Vector a = vec({1, 0, 0, 0});
    const Vector n = vec({0, 1, 0, 0});
    const GroupTensors groups{{a, a}, {n}};
    const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
    CHECK(infonce_loss(groups, 0.5) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.126928).epsilon(1e-6));
}

TEST_CASE("InfoNCE matches the brute-force definition") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int groups = 1 + trial % 4;
        const int members = 1 + (trial / 4) % 4;
        const auto g = random_groups(rng, groups, members, 8 + trial % 57);
        CHECK(infonce_loss(g, 0.5) == doctest::Approx(oracle::infonce(to_oracle(g), 0.5)).epsilon(1e-12));
    }
    // Unequal group sizes.
    auto g = random_groups(rng, 3, 2, 8);
    g[1].pop_back();
    g[2].push_back(g[0][0] * 0.3 + g[2][0]);
    CHECK(infonce_loss(g, 0.5) == doctest::Approx(oracle::infonce(to_oracle(g), 0.5)).epsilon(1e-12));
}

TEST_CASE("InfoNCE degenerate inputs") {
    const GroupTensors singletons{{vec({1, 0})}, {vec({0, 1})}};
    CHECK(infonce_loss(singletons, 0.5) == 0.0);
    const GroupTensors one_group{{vec({1, 0}), vec({1, 1})}};
    CHECK(infonce_loss(one_group, 0.5) == doctest::Approx(0.0));
    const GroupTensors empty{{vec({1, 0})}, {}};
    CHECK(error_kind([&] { infonce_loss(empty, 0.5); }) == ErrorKind::EmptyGroup);
    CHECK(error_kind([&] { infonce_loss(singletons, 0.0); }) == ErrorKind::ContractViolation);
}

TEST_CASE("InfoNCE invariances") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto g = random_groups(rng, 3, 3, 16);
        const double base = infonce_loss(g, 0.5);
        CHECK(base >= 0.0);

        auto permuted = g;
        std::shuffle(permuted.begin(), permuted.end(), rng);
        for (auto& group : permuted) std::shuffle(group.begin(), group.end(), rng);
        CHECK(infonce_loss(permuted, 0.5) == doctest::Approx(base).epsilon(1e-12));

        auto scaled = g;
        for (auto& group : scaled)
            for (auto& v : group) v *= 7.25;
        CHECK(infonce_loss(scaled, 0.5) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("InfoNCE decreases as a positive pair aligns") {
    std::mt19937_64 rng(9);
    const auto g = random_groups(rng, 2, 2, 8);
    double previous = infonce_loss(g, 0.5);
    for (int k = 1; k <= 10; ++k) {
        auto moved = g;
        const double t = 0.1 * k;
        moved[0][1] = (1.0 - t) * g[0][1] + t * g[0][0];
        const double loss = infonce_loss(moved, 0.5);
        CHECK(loss < previous);
        previous = loss;
    }
}

TEST_CASE("InfoNCE analytic gradient matches finite differences") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto g = random_groups(rng, 3, 1 + trial % 3 + 1, 12);
        GroupTensors grads;
        const double loss = infonce_loss_with_grad(g, 0.5, &grads);
        CHECK(loss == doctest::Approx(infonce_loss(g, 0.5)).epsilon(1e-14));
        for (std::size_t gi = 0; gi < g.size(); ++gi) {
            for (std::size_t m = 0; m < g[gi].size(); ++m) {
                for (int i = 0; i < 12; i += 5) {
                    auto plus = g, minus = g;
                    plus[gi][m](i) += 1e-6;
                    minus[gi][m](i) -= 1e-6;
                    const double fd = (infonce_loss(plus, 0.5) - infonce_loss(minus, 0.5)) / 2e-6;
                    CHECK(grads[gi][m](i) == doctest::Approx(fd).epsilon(1e-5).scale(1e-7));
                }
            }
        }
    }
}

TEST_CASE("group overlap IoU") {
    Matrix a(2, 2), b(2, 2);
    a << 1, 1, 0, 0;
    b << 0, 1, 0, 1;
    CHECK(group_overlap_iou(a, b, 0.5) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(group_overlap_iou(a, a, 0.5) == 1.0);
    Matrix c(2, 2);
    c << 0, 0, 1, 1;
    CHECK(group_overlap_iou(a, c, 0.5) == 0.0);
}

TEST_CASE("contrastive objective agrees with the direct loss") {
    // Two variants, tokens 0..3; group A = {(0,1),(1,1)}, group B = {(0,2),(1,3)}.
    GaussianSource g(4);
    std::vector<std::vector<AttentionRecord>> records(2);
    for (auto& branch : records) {
        branch.push_back(record(g.matrix(256, 4).cwiseAbs(), 2));
        branch.push_back(record(g.matrix(256, 4).cwiseAbs(), 2));
    }
    const std::vector<ConceptGroup> groups{{"a", "A", {{0, 1}, {1, 1}}}, {"b", "B", {{0, 2}, {1, 3}}}};
    AttentionMapSet maps;
    maps[0] = reduce_maps(records[0]);
    maps[1] = reduce_maps(records[1]);
    const double direct = infonce_loss(gather_groups(groups, maps), 0.5);

    const auto objective = make_contrastive_objective(groups, 0.5);
    std::vector<std::vector<Matrix>> grads;
    const double loss = objective(records, grads);
    CHECK(loss == doctest::Approx(direct).epsilon(1e-14));
    REQUIRE(grads.size() == 2);
    CHECK(grads[0].size() == 2);

    // Directional derivative through one record entry.
    auto bumped = records;
    bumped[1][0].map(40, 3) += 1e-6;
    std::vector<std::vector<Matrix>> unused;
    const double fd = (objective(bumped, unused) - loss) / 1e-6;
    CHECK(grads[1][0](40, 3) == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
    // Tokens outside every group get no gradient.
    CHECK(grads[0][0].col(0).isZero(0.0));
}

TEST_CASE("inter-group IoU") {
    Matrix left = Matrix::Zero(1, 256), right = Matrix::Zero(1, 256);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 8; ++x) left(0, y * 16 + x) = 1.0;
        for (int x = 8; x < 16; ++x) right(0, y * 16 + x) = 1.0;
    }
    AttentionMapSet maps;
    maps[0].maps = Matrix(3, 256);
    maps[0].maps << Matrix::Ones(1, 256) / 256.0, left, right;
    const std::vector<ConceptGroup> disjoint{{"a", "A", {{0, 1}}}, {"b", "B", {{0, 2}}}};
    CHECK(inter_group_iou(disjoint, maps, 0.5) == 0.0);
    const std::vector<ConceptGroup> same{{"a", "A", {{0, 1}}}, {"b", "B", {{0, 1}}}};
    CHECK(inter_group_iou(same, maps, 0.5) == 1.0);
    const std::vector<ConceptGroup> single{{"a", "A", {{0, 1}}}};
    CHECK(inter_group_iou(single, maps, 0.5) == 0.0);
}
