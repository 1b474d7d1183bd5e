// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clora/config.hpp"
#include "clora/evaluation.hpp"
#include "clora/pipeline.hpp"

namespace clora {

// One prompt of the benchmark, e.g. "A cat and a dog in the mountain (blackcat, browndog)"
// becomes {prompt, concepts {cat, dog}, loras {blackcat, browndog}, scene mountain}.
struct ManifestEntry {
    std::string prompt;
    std::vector<std::string> concepts;
    std::vector<std::string> loras;
    std::string scene;
    std::vector<std::string> styles;
    std::vector<std::uint64_t> seeds;
};

struct Manifest {
    std::vector<Method> methods{Method::CLoRA};
    std::filesystem::path output_dir = "bench_out";
    int steps = 50;
    std::optional<double> cfg_scale;
    std::map<std::string, AdapterSource> adapters;
    GuidanceConfig guidance;
    MaskConfig mask;
    std::vector<ManifestEntry> entries;
};

Manifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);

// Compose config of one manifest entry at one seed.
ComposeConfig entry_config(const Manifest& manifest, const ManifestEntry& entry, std::uint64_t seed);

// Directory name of an entry: readable slug plus a hash of its content.
std::string entry_slug(const ManifestEntry& entry);

struct CellResult {
    std::string entry;
    Method method = Method::CLoRA;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
    double mean_iou = 0.0;
};

struct BenchmarkReport {
    std::vector<CellResult> cells;
    // Rows min / avg / max / iou, one column per method.
    std::string table;
};

// Runs every (entry, seed, method) cell, writing <output_dir>/<slug>/seed_<s>/<method>.{png,json},
// reference images under refs/, cells.csv and table.csv. Failed cells are
// recorded and skipped.
BenchmarkReport run_benchmark(const Manifest& manifest, DenoiserBackend& backend, FeatureExtractor& extractor);

}  // namespace clora
