// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <string>

#include "clora/errors.hpp"
#include "clora/log.hpp"
#include "clora/lora.hpp"
#include "clora/safetensors.hpp"
#include "clora/toy_backend.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace clora;
using test_util::WarningCapture;

namespace {

const std::filesystem::path kData = CLORA_TEST_DATA;

LoRALayerDelta rank1(const std::string& key, Matrix up, Matrix down, double alpha = 1.0) {
    LoRALayerDelta d;
    d.layer_key = key;
    d.up = std::move(up);
    d.down = std::move(down);
    d.alpha = alpha;
    return d;
}

Matrix m2(double a, double b, double c, double d) {
    Matrix m(2, 2);
    m << a, b, c, d;
    return m;
}

Matrix col(std::initializer_list<double> v) {
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

Matrix row(std::initializer_list<double> v) { return col(v).transpose(); }

AdapterPtr make_adapter(const std::string& id, LoRALayerDelta d) {
    LoRAAdapter a;
    a.lora_id = id;
    a.trigger = id;
    a.deltas.emplace(d.layer_key, std::move(d));
    return std::make_shared<const LoRAAdapter>(std::move(a));
}

// Applies every delta of an adapter with its weight folded in.
Matrix patched(const Matrix& base, const LoRAAdapter& a, const std::string& key, double scale = 1.0) {
    auto it = a.deltas.find(key);
    return it == a.deltas.end() ? base : apply_delta(base, it->second, scale);
}


}  // namespace

TEST_CASE("apply_delta hand example") {
    const auto d = rank1("w", col({1, 0}), row({0, 1}));
    CHECK(apply_delta(Matrix::Identity(2, 2), d, 1.0) == m2(1, 1, 0, 1));
}

TEST_CASE("apply_delta zero cases are exact") {
    GaussianSource g(7);
    const Matrix base = g.matrix(3, 4);
    CHECK(apply_delta(base, rank1("w", Matrix::Zero(3, 2), g.matrix(2, 4)), 1.0) == base);
    CHECK(apply_delta(base, rank1("w", g.matrix(3, 2), Matrix::Zero(2, 4)), 1.0) == base);
    CHECK(apply_delta(base, rank1("w", g.matrix(3, 2), g.matrix(2, 4)), 0.0) == base);
}

TEST_CASE("apply_delta uses alpha over rank and is affine in scale") {
    GaussianSource g(11);
    const Matrix base = g.matrix(3, 3);
    const auto d = rank1("w", g.matrix(3, 2), g.matrix(2, 3), 3.0);
    // alpha / rank = 1.5
    CHECK((apply_delta(base, d, 1.0) - (base + 1.5 * d.up * d.down)).norm() < 1e-12);
    CHECK((apply_delta(base, d, 2.0) - (base + 3.0 * d.up * d.down)).norm() < 1e-12);
    const Matrix lhs = apply_delta(base, d, 0.3) + apply_delta(base, d, 0.9) - base;
    CHECK((lhs - apply_delta(base, d, 1.2)).norm() < 1e-12);
    // Patching with s then -s restores the base.
    CHECK((apply_delta(apply_delta(base, d, 0.7), d, -0.7) - base).norm() < 1e-12);
}

TEST_CASE("apply_delta rank bound") {
    GaussianSource g(3);
    const auto d = rank1("w", g.matrix(6, 2), g.matrix(2, 5));
    const Matrix delta = apply_delta(Matrix::Zero(6, 5), d, 1.0);
    Eigen::JacobiSVD<Matrix> svd(delta);
    const auto s = svd.singularValues();
    CHECK(s(2) < 1e-10 * s(0));
}

TEST_CASE("apply_delta shape mismatch") {
    const auto d = rank1("w", col({1, 0, 0}), row({0, 1}));
    try {
        apply_delta(Matrix::Identity(2, 2), d, 1.0);
        FAIL("expected AdapterMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::AdapterMismatch);
    }
}

TEST_CASE("weighted merge: single adapter and (1, 0) weights are exact") {
    GaussianSource g(5);
    const Matrix base = g.matrix(3, 3);
    const auto a = make_adapter("a", rank1("w", g.matrix(3, 2), g.matrix(2, 3), 4.0));
    const auto b = make_adapter("b", rank1("w", g.matrix(3, 1), g.matrix(1, 3), 1.0));
    const Matrix expect = patched(base, *a, "w");

    const auto single = weighted_merge(LoRASet::single(a));
    CHECK(patched(base, single, "w") == expect);

    LoRASet set;
    set.entries = {{a, 1.0}, {b, 0.0}};
    const auto merged = weighted_merge(set);
    CHECK(patched(base, merged, "w") == expect);
    CHECK(merged.lora_id == "merge(a,b)");
}

TEST_CASE("weighted merge: half and half by hand") {
    const auto a = make_adapter("a", rank1("w", col({1, 0}), row({0, 1})));
    const auto b = make_adapter("b", rank1("w", col({0, 1}), row({1, 0})));
    LoRASet set;
    set.entries = {{a, 0.5}, {b, 0.5}};
    const auto merged = weighted_merge(set);
    CHECK((patched(Matrix::Identity(2, 2), merged, "w") - m2(1, 0.5, 0.5, 1)).norm() < 1e-15);
}

TEST_CASE("weighted merge: zero weights act as the base model") {
    const auto a = make_adapter("a", rank1("w", col({1, 0}), row({0, 1})));
    LoRASet set;
    set.entries = {{a, 0.0}};
    CHECK(weighted_merge(set).empty());
}

TEST_CASE("weighted merge: missing layers are zero deltas") {
    const auto a = make_adapter("a", rank1("w", col({1, 0}), row({0, 1})));
    const auto b = make_adapter("b", rank1("v", col({0, 1}), row({1, 0})));
    LoRASet set;
    set.entries = {{a, 1.0}, {b, 2.0}};
    const auto merged = weighted_merge(set);
    CHECK(merged.deltas.size() == 2);
    CHECK((patched(Matrix::Identity(2, 2), merged, "v") - m2(1, 0, 2, 1)).norm() < 1e-15);
}

TEST_CASE("weighted merge: incompatible shapes") {
    const auto a = make_adapter("a", rank1("w", col({1, 0}), row({0, 1})));
    const auto b = make_adapter("b", rank1("w", col({1, 0, 0}), row({0, 1})));
    LoRASet set;
    set.entries = {{a, 1.0}, {b, 1.0}};
    CHECK_THROWS_AS(weighted_merge(set), Error);
}

TEST_CASE("half and bfloat16 decoding") {
    CHECK(safetensors::half_to_double(0x3C00) == 1.0);
    CHECK(safetensors::half_to_double(0xC000) == -2.0);
    CHECK(safetensors::half_to_double(0x3800) == 0.5);
    CHECK(safetensors::half_to_double(0x0001) == std::ldexp(1.0, -24));
    CHECK(std::isinf(safetensors::half_to_double(0x7C00)));
    CHECK(safetensors::bfloat16_to_double(0x3F80) == 1.0);
    CHECK(safetensors::bfloat16_to_double(0xC040) == -3.0);
}

TEST_CASE("load kohya fp16 file written by the reference library") {
    WarningCapture warnings;
    const auto a = load_adapter(kData / "kohya_f16.safetensors");
    CHECK(a.lora_id == "fixture");
    CHECK(a.trigger == "sks");
    REQUIRE(a.deltas.count("block0_to_k") == 1);
    const auto& d = a.deltas.at("block0_to_k");
    CHECK(d.alpha == 2.0);
    CHECK(d.rank() == 2);
    CHECK(d.down(0, 2) == -2.0);
    CHECK(d.down(1, 0) == 0.25);
    CHECK(d.up(1, 1) == -0.5);
    REQUIRE(a.text_encoder_deltas.count("proj") == 1);
    CHECK(a.text_encoder_deltas.at("proj").up(1, 0) == 4.0);
}

TEST_CASE("load PEFT file: key mapping, squeezed kernels, default alpha") {
    WarningCapture warnings;
    const auto a = load_adapter(kData / "peft.safetensors");
    CHECK(a.lora_id == "peft");
    REQUIRE(a.deltas.count("block0_to_v") == 1);
    const auto& d = a.deltas.at("block0_to_v");
    CHECK(d.up.rows() == 2);
    CHECK(d.up.cols() == 1);
    CHECK(d.up(1, 0) == 1.5);
    CHECK(d.alpha == 1.0);
    REQUIRE(warnings.seen.size() == 1);
    CHECK(warnings.seen[0].find("alpha") != std::string::npos);
}

TEST_CASE("unknown key scheme") {
    try {
        load_adapter(kData / "unknown_keys.safetensors");
        FAIL("expected UnsupportedFormat");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnsupportedFormat);
    }
}

TEST_CASE("save and load round trip") {
    GaussianSource g(99);
    LoRAAdapter a;
    a.lora_id = "round";
    a.trigger = "zwx";
    a.deltas.emplace("block1_to_k", rank1("block1_to_k", g.matrix(5, 3), g.matrix(3, 4), 2.5));
    a.text_encoder_deltas.emplace("proj", rank1("proj", g.matrix(4, 1), g.matrix(1, 4), 1.0));
    const auto path = std::filesystem::temp_directory_path() / "clora_round_trip.safetensors";
    save_adapter(a, path);
    const auto b = load_adapter(path);
    std::filesystem::remove(path);
    CHECK(b.lora_id == a.lora_id);
    CHECK(b.trigger == a.trigger);
    CHECK(b.deltas.at("block1_to_k").up == a.deltas.at("block1_to_k").up);
    CHECK(b.deltas.at("block1_to_k").down == a.deltas.at("block1_to_k").down);
    CHECK(b.deltas.at("block1_to_k").alpha == 2.5);
    CHECK(b.text_encoder_deltas.at("proj").down == a.text_encoder_deltas.at("proj").down);
}

TEST_CASE("safetensors header is parsed from raw bytes") {
    const std::string header = R"({"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
    std::vector<std::uint8_t> bytes(8);
    const std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(n >> (8 * i));
    bytes.insert(bytes.end(), header.begin(), header.end());
    const float vals[2] = {1.5f, -0.25f};
    const auto* raw = reinterpret_cast<const std::uint8_t*>(vals);
    bytes.insert(bytes.end(), raw, raw + 8);
    const auto f = safetensors::parse(bytes);
    CHECK(f.tensors.at("x").values == std::vector<double>{1.5, -0.25});

    bytes.resize(bytes.size() - 1);
    CHECK_THROWS_AS(safetensors::parse(bytes), Error);
}

TEST_CASE("toy adapters are deterministic and steer attention to their quadrant") {
    ToyBackend backend;
    const ToyAdapterSpec nw{"L1", "L1", Quadrant::NW};
    const auto a = synth_toy_adapter(backend, 1, nw);
    const auto b = synth_toy_adapter(backend, 1, nw);
    REQUIRE(a.deltas.size() == b.deltas.size());
    for (const auto& [key, d] : a.deltas) {
        CHECK(d.up == b.deltas.at(key).up);
        CHECK(d.down == b.deltas.at(key).down);
    }

    const Quadrant quads[] = {Quadrant::NW, Quadrant::NE, Quadrant::SW, Quadrant::SE};
    for (int q = 0; q < 4; ++q) {
        const ToyAdapterSpec spec{"T", "T", quads[q]};
        const auto adapter = synth_toy_adapter(backend, 40 + static_cast<std::uint64_t>(q), spec);
        const auto mass = probe_quadrant_mass(backend, adapter, "a T dog on grass", 17);
        CAPTURE(q);
        for (int k = 0; k < 4; ++k) {
            if (k != q) {
                CHECK(mass[static_cast<std::size_t>(q)] > mass[static_cast<std::size_t>(k)]);
            }
        }
    }
}
