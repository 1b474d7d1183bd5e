// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "clora/errors.hpp"
#include "json.hpp"

namespace clora {

using nlohmann::json;

namespace {

void only_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    require(j.is_object(), ErrorKind::InvalidSpec, where + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items()) {
        require(ok.contains(key), ErrorKind::InvalidSpec, "unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidSpec, where + "." + key + ": " + e.what());
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
    if (j.contains(key)) {
        out = get_as<T>(j, key, where);
    }
}

json parse_json(std::string_view text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::InvalidSpec, what + ": " + e.what());
    }
}

GuidanceConfig guidance_from(const json& j, GuidanceConfig g) {
    only_keys(j, {"temperature", "alpha0", "refine_steps", "inner_iters", "cutoff", "enabled"}, "guidance");
    read_opt(j, "temperature", g.temperature, "guidance");
    read_opt(j, "alpha0", g.step_scale, "guidance");
    read_opt(j, "inner_iters", g.inner_iterations, "guidance");
    read_opt(j, "cutoff", g.cutoff_step, "guidance");
    read_opt(j, "enabled", g.enabled, "guidance");
    if (j.contains("refine_steps")) {
        const auto steps = get_as<std::vector<int>>(j, "refine_steps", "guidance");
        g.refinement_steps = std::set<int>(steps.begin(), steps.end());
    }
    return g;
}

json guidance_to(const GuidanceConfig& g) {
    return json{{"temperature", g.temperature},
                {"alpha0", g.step_scale},
                {"refine_steps", std::vector<int>(g.refinement_steps.begin(), g.refinement_steps.end())},
                {"inner_iters", g.inner_iterations},
                {"cutoff", g.cutoff_step},
                {"enabled", g.enabled}};
}

MaskConfig mask_from(const json& j, MaskConfig m) {
    only_keys(j, {"tau", "overlap", "enabled", "upsample"}, "mask");
    read_opt(j, "tau", m.threshold, "mask");
    read_opt(j, "enabled", m.enabled, "mask");
    if (j.contains("overlap")) {
        m.overlap_rule = parse_overlap_rule(get_as<std::string>(j, "overlap", "mask"));
    }
    if (j.contains("upsample")) {
        require(get_as<std::string>(j, "upsample", "mask") == "nearest", ErrorKind::InvalidSpec,
                "mask.upsample supports only 'nearest'");
    }
    return m;
}

json mask_to(const MaskConfig& m) {
    return json{{"tau", m.threshold},
                {"overlap", std::string(to_string(m.overlap_rule))},
                {"enabled", m.enabled},
                {"upsample", "nearest"}};
}

AdapterSource adapter_from(const json& j, const std::string& id, const std::filesystem::path& base_dir) {
    const std::string where = "adapters." + id;
    only_keys(j, {"path", "toy"}, where);
    require(j.contains("path") != j.contains("toy"), ErrorKind::InvalidSpec,
            where + " needs exactly one of 'path' or 'toy'");
    AdapterSource src;
    if (j.contains("path")) {
        std::filesystem::path p = get_as<std::string>(j, "path", where);
        if (p.is_relative() && !base_dir.empty()) {
            p = base_dir / p;
        }
        src.path = p.lexically_normal();
        return src;
    }
    const json& t = j.at("toy");
    only_keys(t, {"quadrant", "seed", "strength", "appearance", "trigger", "text_encoder"}, where + ".toy");
    ToyAdapterSpec spec;
    spec.lora_id = id;
    if (t.contains("quadrant")) {
        spec.quadrant = parse_quadrant(get_as<std::string>(t, "quadrant", where));
    }
    read_opt(t, "strength", spec.strength, where);
    read_opt(t, "appearance", spec.appearance, where);
    read_opt(t, "trigger", spec.trigger, where);
    read_opt(t, "text_encoder", spec.text_encoder, where);
    src.toy_seed = fnv1a64(id);
    read_opt(t, "seed", src.toy_seed, where);
    src.toy = spec;
    return src;
}

json adapter_to(const AdapterSource& src) {
    if (src.path) {
        return json{{"path", src.path->generic_string()}};
    }
    const ToyAdapterSpec& t = *src.toy;
    return json{{"toy",
                 {{"quadrant", std::string(to_string(t.quadrant))},
                  {"seed", src.toy_seed},
                  {"strength", t.strength},
                  {"appearance", t.appearance},
                  {"trigger", t.trigger},
                  {"text_encoder", t.text_encoder}}}};
}

}  // namespace

OverlapRule parse_overlap_rule(std::string_view name) {
    if (name == "average") {
        return OverlapRule::Average;
    }
    if (name == "priority") {
        return OverlapRule::Priority;
    }
    throw Error(ErrorKind::InvalidSpec, "unknown overlap rule '" + std::string(name) + "'");
}

std::string_view to_string(OverlapRule rule) { return rule == OverlapRule::Average ? "average" : "priority"; }

GuidanceConfig parse_guidance(std::string_view json_text, GuidanceConfig base) {
    return guidance_from(parse_json(json_text, "guidance"), base);
}

MaskConfig parse_mask(std::string_view json_text, MaskConfig base) {
    return mask_from(parse_json(json_text, "mask"), base);
}

std::string dump_guidance(const GuidanceConfig& g) { return guidance_to(g).dump(); }
std::string dump_mask(const MaskConfig& m) { return mask_to(m).dump(); }

ComposeConfig parse_compose_config(std::string_view json_text, const std::filesystem::path& base_dir) {
    const json j = parse_json(json_text, "compose config");
    only_keys(j, {"prompt", "concepts", "seed", "guidance", "mask", "adapters"}, "config");
    ComposeConfig cfg;
    cfg.spec.base_prompt = get_as<std::string>(j, "prompt", "config");
    read_opt(j, "seed", cfg.spec.seed, "config");
    require(j.contains("concepts") && j.at("concepts").is_array(), ErrorKind::InvalidSpec,
            "config.concepts must be an array");
    for (const auto& c : j.at("concepts")) {
        only_keys(c, {"text", "lora", "kind", "trigger"}, "concept");
        ConceptBinding b;
        b.lora_id = get_as<std::string>(c, "lora", "concept");
        read_opt(c, "text", b.concept_text, "concept");
        read_opt(c, "trigger", b.trigger, "concept");
        if (c.contains("kind")) {
            const auto kind = get_as<std::string>(c, "kind", "concept");
            require(kind == "content" || kind == "style", ErrorKind::InvalidSpec,
                    "concept.kind must be 'content' or 'style'");
            b.kind = kind == "style" ? BindingKind::Style : BindingKind::Content;
        }
        cfg.spec.bindings.push_back(std::move(b));
    }
    if (j.contains("guidance")) {
        cfg.spec.guidance = guidance_from(j.at("guidance"), cfg.spec.guidance);
    }
    if (j.contains("mask")) {
        cfg.spec.mask = mask_from(j.at("mask"), cfg.spec.mask);
    }
    cfg.spec.mask.validate();
    if (j.contains("adapters")) {
        require(j.at("adapters").is_object(), ErrorKind::InvalidSpec, "config.adapters must be an object");
        for (const auto& [id, a] : j.at("adapters").items()) {
            cfg.adapters.emplace(id, adapter_from(a, id, base_dir));
        }
    }
    return cfg;
}

ComposeConfig load_compose_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_compose_config(buf.str(), path.parent_path());
}

std::string dump_compose_config(const ComposeConfig& config) {
    json concepts = json::array();
    for (const auto& b : config.spec.bindings) {
        json c{{"text", b.concept_text},
               {"lora", b.lora_id},
               {"kind", b.kind == BindingKind::Style ? "style" : "content"}};
        if (!b.trigger.empty()) {
            c["trigger"] = b.trigger;
        }
        concepts.push_back(std::move(c));
    }
    json adapters = json::object();
    for (const auto& [id, src] : config.adapters) {
        adapters[id] = adapter_to(src);
    }
    const json j{{"prompt", config.spec.base_prompt},
                 {"seed", config.spec.seed},
                 {"concepts", concepts},
                 {"guidance", guidance_to(config.spec.guidance)},
                 {"mask", mask_to(config.spec.mask)},
                 {"adapters", adapters}};
    return j.dump(2);
}

void fill_toy_adapters(ComposeConfig& config) {
    static const Quadrant cycle[] = {Quadrant::NW, Quadrant::SE, Quadrant::NE, Quadrant::SW};
    std::size_t content_index = 0;
    for (const auto& b : config.spec.bindings) {
        const bool style = b.kind == BindingKind::Style;
        const Quadrant q = style ? Quadrant::Global : cycle[content_index % 4];
        if (!style) {
            ++content_index;
        }
        if (config.adapters.contains(b.lora_id)) {
            continue;
        }
        AdapterSource src;
        ToyAdapterSpec spec;
        spec.lora_id = b.lora_id;
        spec.trigger = b.trigger_text();
        spec.quadrant = q;
        src.toy = spec;
        src.toy_seed = fnv1a64(b.lora_id);
        config.adapters.emplace(b.lora_id, std::move(src));
    }
}

AdapterMap resolve_adapters(const ComposeConfig& config, DenoiserBackend& backend) {
    AdapterMap out;
    for (const auto& b : config.spec.bindings) {
        auto it = config.adapters.find(b.lora_id);
        require(it != config.adapters.end(), ErrorKind::AdapterMismatch, "no adapter source for '" + b.lora_id + "'");
        const AdapterSource& src = it->second;
        LoRAAdapter adapter;
        if (src.path) {
            adapter = load_adapter(*src.path);
        } else {
            auto* toy = dynamic_cast<ToyBackend*>(&backend);
            require(toy != nullptr, ErrorKind::BackendUnavailable,
                    "toy adapter '" + b.lora_id + "' needs the toy backend");
            ToyAdapterSpec spec = *src.toy;
            spec.lora_id = b.lora_id;
            if (spec.trigger.empty()) {
                spec.trigger = b.trigger_text();
            }
            adapter = synth_toy_adapter(*toy, src.toy_seed, spec);
        }
        adapter.lora_id = b.lora_id;
        if (adapter.trigger.empty()) {
            adapter.trigger = b.trigger_text();
        }
        out.emplace(b.lora_id, std::make_shared<const LoRAAdapter>(std::move(adapter)));
    }
    return out;
}

}  // namespace clora
