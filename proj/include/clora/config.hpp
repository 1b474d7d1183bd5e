// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "clora/backend.hpp"
#include "clora/composition.hpp"
#include "clora/lora.hpp"
#include "clora/toy_backend.hpp"

namespace clora {

// Where an adapter comes from: a safetensors file or a synthetic toy adapter.
struct AdapterSource {
    std::optional<std::filesystem::path> path;
    std::optional<ToyAdapterSpec> toy;
    std::uint64_t toy_seed = 0;
};

struct ComposeConfig {
    CompositionSpec spec;
    std::map<std::string, AdapterSource> adapters;
};

// Parses a compose document. Relative adapter paths resolve against base_dir.
// Unknown keys and malformed values throw InvalidSpec.
ComposeConfig parse_compose_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
ComposeConfig load_compose_config(const std::filesystem::path& path);

// Canonical JSON text of the config (sorted keys, adapters included).
std::string dump_compose_config(const ComposeConfig& config);

// Gives every binding without an explicit source a toy adapter: content
// quadrants cycle NW, SE, NE, SW in binding order, style adapters are global.
void fill_toy_adapters(ComposeConfig& config);

using AdapterMap = std::map<std::string, AdapterPtr>;

// Loads or synthesises every adapter named by the spec. Toy sources need a
// ToyBackend (BackendUnavailable otherwise); missing sources throw AdapterMismatch.
AdapterMap resolve_adapters(const ComposeConfig& config, DenoiserBackend& backend);

GuidanceConfig parse_guidance(std::string_view json_text, GuidanceConfig base = {});
MaskConfig parse_mask(std::string_view json_text, MaskConfig base = {});
std::string dump_guidance(const GuidanceConfig& g);
std::string dump_mask(const MaskConfig& m);

OverlapRule parse_overlap_rule(std::string_view name);
std::string_view to_string(OverlapRule rule);

}  // namespace clora
