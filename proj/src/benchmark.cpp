// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/benchmark.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "clora/errors.hpp"
#include "clora/log.hpp"
#include "json.hpp"

namespace clora {

using nlohmann::json;

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::IoError, "cannot write " + path.string());
    out << text;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidSpec, where + "." + key + ": " + e.what());
    }
}

}  // namespace

Manifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::InvalidSpec, std::string("manifest: ") + e.what());
    }
    require(j.is_object(), ErrorKind::InvalidSpec, "manifest must be an object");
    static const std::set<std::string> known{"method", "methods", "output_dir", "steps", "cfg_scale",
                                             "adapters", "guidance", "mask", "entries"};
    for (const auto& [key, _] : j.items()) {
        require(known.contains(key), ErrorKind::InvalidSpec, "unknown key '" + key + "' in manifest");
    }

    Manifest m;
    if (j.contains("methods")) {
        m.methods.clear();
        for (const auto& name : field<std::vector<std::string>>(j, "methods", "manifest")) {
            m.methods.push_back(parse_method(name));
        }
    } else if (j.contains("method")) {
        m.methods = {parse_method(field<std::string>(j, "method", "manifest"))};
    }
    require(!m.methods.empty(), ErrorKind::InvalidSpec, "manifest lists no methods");
    if (j.contains("output_dir")) {
        std::filesystem::path out = field<std::string>(j, "output_dir", "manifest");
        m.output_dir = out.is_relative() && !base_dir.empty() ? base_dir / out : out;
    }
    if (j.contains("steps")) {
        m.steps = field<int>(j, "steps", "manifest");
    }
    if (j.contains("cfg_scale")) {
        m.cfg_scale = field<double>(j, "cfg_scale", "manifest");
    }
    if (j.contains("guidance")) {
        m.guidance = parse_guidance(j.at("guidance").dump());
    }
    if (j.contains("mask")) {
        m.mask = parse_mask(j.at("mask").dump());
    }
    if (j.contains("adapters")) {
        // Reuse the compose parser for adapter sources.
        const json probe{{"prompt", ""}, {"concepts", json::array()}, {"adapters", j.at("adapters")}};
        m.adapters = parse_compose_config(probe.dump(), base_dir).adapters;
    }
    if (j.contains("entries")) {
        require(j.at("entries").is_array(), ErrorKind::InvalidSpec, "manifest.entries must be an array");
        for (const auto& e : j.at("entries")) {
            require(e.is_object(), ErrorKind::InvalidSpec, "manifest entry must be an object");
            for (const auto& [key, _] : e.items()) {
                require(key == "prompt" || key == "concepts" || key == "loras" || key == "scene" ||
                            key == "styles" || key == "seeds",
                        ErrorKind::InvalidSpec, "unknown key '" + key + "' in manifest entry");
            }
            ManifestEntry entry;
            entry.prompt = field<std::string>(e, "prompt", "entry");
            entry.concepts = field<std::vector<std::string>>(e, "concepts", "entry");
            entry.loras = field<std::vector<std::string>>(e, "loras", "entry");
            if (e.contains("scene")) {
                entry.scene = field<std::string>(e, "scene", "entry");
            }
            if (e.contains("styles")) {
                entry.styles = field<std::vector<std::string>>(e, "styles", "entry");
            }
            entry.seeds = e.contains("seeds") ? field<std::vector<std::uint64_t>>(e, "seeds", "entry")
                                              : std::vector<std::uint64_t>{0};
            require(entry.concepts.size() == entry.loras.size(), ErrorKind::InvalidSpec,
                    "entry '" + entry.prompt + "': concepts and loras differ in length");
            require(!entry.seeds.empty(), ErrorKind::InvalidSpec, "entry '" + entry.prompt + "' has no seeds");
            require(std::set<std::uint64_t>(entry.seeds.begin(), entry.seeds.end()).size() == entry.seeds.size(),
                    ErrorKind::InvalidSpec, "entry '" + entry.prompt + "' repeats a seed");
            m.entries.push_back(std::move(entry));
        }
    }
    return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str(), path.parent_path());
}

ComposeConfig entry_config(const Manifest& manifest, const ManifestEntry& entry, std::uint64_t seed) {
    ComposeConfig cfg;
    cfg.spec.base_prompt = entry.prompt;
    cfg.spec.seed = seed;
    cfg.spec.guidance = manifest.guidance;
    cfg.spec.mask = manifest.mask;
    for (std::size_t i = 0; i < entry.concepts.size(); ++i) {
        cfg.spec.bindings.push_back({entry.concepts[i], entry.loras[i], BindingKind::Content, ""});
    }
    for (const auto& s : entry.styles) {
        cfg.spec.bindings.push_back({"", s, BindingKind::Style, ""});
    }
    for (const auto& b : cfg.spec.bindings) {
        if (auto it = manifest.adapters.find(b.lora_id); it != manifest.adapters.end()) {
            cfg.adapters.emplace(b.lora_id, it->second);
        }
    }
    fill_toy_adapters(cfg);
    return cfg;
}

std::string entry_slug(const ManifestEntry& entry) {
    std::string slug;
    for (char c : entry.prompt) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            slug += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!slug.empty() && slug.back() != '-') {
            slug += '-';
        }
        if (slug.size() >= 40) {
            break;
        }
    }
    while (!slug.empty() && slug.back() == '-') {
        slug.pop_back();
    }
    const json key{{"prompt", entry.prompt},
                   {"concepts", entry.concepts},
                   {"loras", entry.loras},
                   {"scene", entry.scene},
                   {"styles", entry.styles}};
    char hash[20];
    std::snprintf(hash, sizeof hash, "%08llx",
                  static_cast<unsigned long long>(fnv1a64(key.dump()) & 0xFFFFFFFFULL));
    return (slug.empty() ? "entry" : slug) + "-" + hash;
}

BenchmarkReport run_benchmark(const Manifest& manifest, DenoiserBackend& backend, FeatureExtractor& extractor) {
    BenchmarkReport report;
    std::filesystem::create_directories(manifest.output_dir);

    for (const auto& entry : manifest.entries) {
        const std::string slug = entry_slug(entry);
        for (std::uint64_t seed : entry.seeds) {
            const std::filesystem::path cell_dir = manifest.output_dir / slug / ("seed_" + std::to_string(seed));
            std::vector<ReferenceSet> refs;
            AdapterMap adapters;
            ComposeConfig cfg;
            std::string setup_error;
            try {
                cfg = entry_config(manifest, entry, seed);
                adapters = resolve_adapters(cfg, backend);
                refs = make_references(cfg, adapters, backend, manifest.steps, manifest.cfg_scale);
                std::filesystem::create_directories(cell_dir / "refs");
                for (const auto& r : refs) {
                    write_png(r.images.front(), cell_dir / "refs" / (r.lora_id + ".png"));
                }
            } catch (const std::exception& e) {
                setup_error = e.what();
            }
            for (Method method : manifest.methods) {
                CellResult cell;
                cell.entry = slug;
                cell.method = method;
                cell.seed = seed;
                try {
                    require(setup_error.empty(), ErrorKind::ContractViolation, setup_error);
                    RunOptions options;
                    options.method = method;
                    options.steps = manifest.steps;
                    options.cfg_scale = manifest.cfg_scale;
                    const RunResult run = generate(cfg, adapters, backend, options);
                    const std::string name(to_string(method));
                    write_png(run.image, cell_dir / (name + ".png"));
                    write_text(cell_dir / (name + ".json"), run.metadata);
                    cell.mean_iou = run.mean_iou();
                    try {
                        cell.report = evaluate(run.image, refs, extractor);
                    } catch (const Error& e) {
                        if (e.kind() != ErrorKind::ExtractorUnavailable) {
                            throw;
                        }
                        warn(std::string("evaluation skipped: ") + e.what());
                    }
                    cell.ok = true;
                } catch (const std::exception& e) {
                    cell.error = e.what();
                    warn("cell " + slug + "/seed_" + std::to_string(seed) + "/" + std::string(to_string(method)) +
                         " failed: " + cell.error);
                }
                report.cells.push_back(std::move(cell));
            }
        }
    }

    std::string cells = "entry,seed,method,ok,min_sim,avg_sim,max_sim,iou,error\n";
    for (const auto& c : report.cells) {
        std::string error = c.error;
        for (char& ch : error) {
            if (ch == ',' || ch == '\n') {
                ch = ';';
            }
        }
        cells += c.entry + "," + std::to_string(c.seed) + "," + std::string(to_string(c.method)) + "," +
                 (c.ok ? "1" : "0") + "," + fmt(c.report.min_sim) + "," + fmt(c.report.avg_sim) + "," +
                 fmt(c.report.max_sim) + "," + fmt(c.mean_iou) + "," + error + "\n";
    }

    std::string table = "metric";
    for (Method m : manifest.methods) {
        table += "," + std::string(to_string(m));
    }
    table += "\n";
    const char* rows[] = {"min", "avg", "max", "iou"};
    for (int r = 0; r < 4; ++r) {
        table += rows[r];
        for (Method m : manifest.methods) {
            double total = 0.0;
            int n = 0;
            for (const auto& c : report.cells) {
                if (c.method != m || !c.ok) {
                    continue;
                }
                const double v[] = {c.report.min_sim, c.report.avg_sim, c.report.max_sim, c.mean_iou};
                total += v[r];
                ++n;
            }
            table += "," + (n > 0 ? fmt(total / n) : std::string());
        }
        table += "\n";
    }
    report.table = table;
    write_text(manifest.output_dir / "cells.csv", cells);
    write_text(manifest.output_dir / "table.csv", table);
    return report;
}

}  // namespace clora
