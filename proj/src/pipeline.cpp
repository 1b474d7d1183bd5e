// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "clora/attention.hpp"
#include "clora/errors.hpp"
#include "clora/mask_fusion.hpp"
#include "json.hpp"

namespace clora {

using nlohmann::json;

Method parse_method(std::string_view name) {
    if (name == "clora") {
        return Method::CLoRA;
    }
    if (name == "merge") {
        return Method::Merge;
    }
    if (name == "composite") {
        return Method::Composite;
    }
    if (name == "switch") {
        return Method::Switch;
    }
    throw Error(ErrorKind::InvalidSpec, "unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method method) {
    switch (method) {
        case Method::CLoRA: return "clora";
        case Method::Merge: return "merge";
        case Method::Composite: return "composite";
        case Method::Switch: return "switch";
    }
    return "?";
}

double RunResult::mean_iou() const {
    if (iou_per_step.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (double v : iou_per_step) {
        total += v;
    }
    return total / static_cast<double>(iou_per_step.size());
}

namespace {

// One prompt branch: embeddings stay owned here so Conditioning pointers are stable.
struct Branch {
    std::string lora_id;
    LoRASet loras;
    PromptEmbedding cond;
    std::optional<PromptEmbedding> uncond;
};

Branch make_branch(DenoiserBackend& backend, const PromptVariant* variant, std::string_view text, LoRASet loras,
                   std::string lora_id, double cfg) {
    Branch b;
    b.lora_id = std::move(lora_id);
    b.loras = std::move(loras);
    b.cond = variant != nullptr ? backend.encode_prompt(*variant, b.loras) : backend.encode_text(text, b.loras);
    if (cfg != 1.0) {
        b.uncond = backend.encode_text("", b.loras);
    }
    return b;
}

// Classifier-free guidance on top of an already computed conditional prediction.
Matrix guided_noise(DenoiserBackend& backend, const LatentState& z, const Branch& b, const Matrix& cond, double cfg) {
    if (!b.uncond) {
        return cond;
    }
    const Matrix u = backend.denoise_step(z, *b.uncond, b.loras, false).noise_prediction;
    return u + cfg * (cond - u);
}

Matrix mean_noise(const std::vector<Matrix>& preds) {
    require(!preds.empty(), ErrorKind::ContractViolation, "no noise predictions to average");
    Matrix sum = preds.front();
    for (std::size_t i = 1; i < preds.size(); ++i) {
        sum += preds[i];
    }
    return sum / static_cast<double>(preds.size());
}

LatentState initial_latent(DenoiserBackend& backend, std::uint64_t seed, const DdimSchedule& schedule) {
    const BackendInfo& info = backend.info();
    LatentState z = random_latent(seed, info.latent_channels, info.latent_height, info.latent_width);
    z.step_index = 0;
    z.timestep = schedule.timesteps.front();
    return z;
}

AdapterPtr adapter_for(const AdapterMap& adapters, const std::string& id) {
    auto it = adapters.find(id);
    require(it != adapters.end(), ErrorKind::AdapterMismatch, "adapter '" + id + "' was not resolved");
    return it->second;
}

json variant_json(const PromptVariant& v) {
    static const char* kinds[] = {"original", "content", "style"};
    json spans = json::object();
    for (const auto& [concept_text, idx] : v.token_spans) {
        spans[concept_text] = idx;
    }
    json j{{"id", v.variant_id},
           {"kind", kinds[static_cast<int>(v.kind)]},
           {"text", v.text},
           {"lora", v.active_lora ? json(*v.active_lora) : json(nullptr)},
           {"token_count", v.token_count},
           {"spans", spans}};
    if (v.trigger_span) {
        j["trigger_span"] = *v.trigger_span;
    }
    return j;
}

json trace_json(const GuidanceStepTrace& t) {
    return json{{"step", t.step_index},
                {"timestep", t.timestep},
                {"alpha", t.alpha},
                {"iterations", t.iterations()},
                {"losses", t.losses},
                {"grad_norms", t.grad_norms},
                {"loss_after", t.loss_after ? json(*t.loss_after) : json(nullptr)}};
}

class AttentionDump {
public:
    explicit AttentionDump(const std::optional<std::filesystem::path>& path) {
        if (path) {
            if (path->has_parent_path()) {
                std::filesystem::create_directories(path->parent_path());
            }
            out_.open(*path, std::ios::binary | std::ios::trunc);
            require(out_.good(), ErrorKind::IoError, "cannot write " + path->string());
        }
    }
    bool active() const { return out_.is_open(); }

    void write(int step, const PromptVariant& v, const TokenMaps& maps, const Tokenizer& tokenizer) {
        const Tokenization tok = tokenizer.tokenize(v.text);
        for (int k = 0; k < maps.token_count(); ++k) {
            std::vector<double> values(maps.maps.cols());
            for (Eigen::Index p = 0; p < maps.maps.cols(); ++p) {
                values[static_cast<std::size_t>(p)] = maps.maps(k, p);
            }
            const std::string text = static_cast<std::size_t>(k) < tok.size() ? tok.tokens[k].text : "";
            out_ << json{{"step", step},
                         {"variant", v.variant_id},
                         {"token", k},
                         {"text", text},
                         {"height", maps.height},
                         {"width", maps.width},
                         {"map", values}}
                        .dump()
                 << '\n';
        }
    }

    void write_iou(int step, double iou) { out_ << json{{"step", step}, {"iou", iou}}.dump() << '\n'; }

private:
    std::ofstream out_;
};

void dump_mask(const std::filesystem::path& dir, int step, const std::string& lora_id, const Mask& mask) {
    std::filesystem::create_directories(dir);
    Image img;
    img.width = static_cast<int>(mask.cols());
    img.height = static_cast<int>(mask.rows());
    img.channels = 1;
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            img.pixels[static_cast<std::size_t>(y * img.width + x)] = mask(y, x) ? 255 : 0;
        }
    }
    char name[32];
    std::snprintf(name, sizeof name, "step_%03d_", step);
    write_png(img, dir / (std::string(name) + lora_id + ".png"));
}

// Inter-group IoU and optional map dump from the captures of variants 0..K.
double observe_attention(int step, const std::vector<PromptVariant>& variants, std::size_t loss_variants,
                         const std::vector<StepOutput>& outputs, const std::vector<ConceptGroup>& groups,
                         double threshold, AttentionDump& dump, const Tokenizer& tokenizer) {
    AttentionMapSet maps;
    for (std::size_t v = 0; v < loss_variants; ++v) {
        maps.emplace(static_cast<int>(v), reduce_maps(outputs[v].records));
        if (dump.active()) {
            dump.write(step, variants[v], maps.at(static_cast<int>(v)), tokenizer);
        }
    }
    const double iou = inter_group_iou(groups, maps, threshold);
    if (dump.active()) {
        dump.write_iou(step, iou);
    }
    return iou;
}

struct Prepared {
    std::vector<PromptVariant> variants;
    std::size_t content_count = 0;  // original + content variants
    std::vector<ConceptGroup> groups;
    double cfg = 1.0;
    DdimSchedule schedule;
};

Prepared prepare(const ComposeConfig& config, DenoiserBackend& backend, const RunOptions& options) {
    require(options.steps >= 1, ErrorKind::InvalidSpec, "steps must be >= 1");
    const CompositionSpec& spec = config.spec;
    spec.mask.validate();
    if (options.method == Method::CLoRA && options.guidance_module) {
        spec.guidance.validate(options.steps);
    }
    Prepared p;
    p.variants = build_variants(spec, backend.tokenizer());
    p.content_count = p.variants.size();
    for (auto& v : build_style_variants(spec, backend.tokenizer())) {
        p.variants.push_back(std::move(v));
    }
    p.groups = build_groups(std::vector<PromptVariant>(p.variants.begin(), p.variants.begin() +
                                                       static_cast<std::ptrdiff_t>(p.content_count)),
                            spec);
    p.cfg = options.cfg_scale.value_or(backend.info().default_cfg_scale);
    p.schedule = backend.make_schedule(options.steps);
    require(p.schedule.size() == options.steps, ErrorKind::ContractViolation, "backend schedule length mismatch");
    return p;
}

// Variant branches 0..K (original without LoRA, content with their own LoRA),
// then style variants with their LoRA.
std::vector<Branch> variant_branches(const Prepared& p, const AdapterMap& adapters, DenoiserBackend& backend) {
    std::vector<Branch> branches;
    for (const auto& v : p.variants) {
        LoRASet set;
        std::string id;
        if (v.active_lora) {
            id = *v.active_lora;
            set = LoRASet::single(adapter_for(adapters, id));
        }
        branches.push_back(make_branch(backend, &v, v.text, std::move(set), id, p.cfg));
    }
    return branches;
}

std::vector<Conditioning> conditionings(const std::vector<Branch>& branches, std::size_t count) {
    std::vector<Conditioning> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back({&branches[i].cond, &branches[i].loras});
    }
    return out;
}

LatentState run_clora(const ComposeConfig& config, const Prepared& p, const AdapterMap& adapters,
                      DenoiserBackend& backend, const RunOptions& options, RunResult& result, AttentionDump& dump) {
    const CompositionSpec& spec = config.spec;
    const std::vector<Branch> branches = variant_branches(p, adapters, backend);
    const std::vector<Conditioning> conds = conditionings(branches, branches.size());
    const auto mask_sources = mask_token_sources(spec, p.variants);
    const BackendInfo& info = backend.info();

    LatentState z = initial_latent(backend, spec.seed, p.schedule);
    for (int i = 0; i < options.steps; ++i) {
        std::vector<StepOutput> outputs;
        if (options.guidance_module) {
            GuidedStep g = guided_step(z, conds, p.content_count, p.groups, backend, spec.guidance, options.steps);
            z = std::move(g.latent);
            outputs = std::move(g.outputs);
            result.trace.steps.push_back(std::move(g.trace));
        } else {
            outputs = evaluate_branches(z, conds, backend);
        }
        if (options.measure_iou || dump.active()) {
            result.iou_per_step.push_back(observe_attention(i, p.variants, p.content_count, outputs, p.groups,
                                                            spec.mask.threshold, dump, backend.tokenizer()));
        }

        std::vector<Matrix> eps;
        for (std::size_t b = 0; b < branches.size(); ++b) {
            if (b == 0 && !spec.mask.enabled) {
                eps.emplace_back();  // base branch only feeds the masked background
                continue;
            }
            eps.push_back(guided_noise(backend, z, branches[b], outputs[b].noise_prediction, p.cfg));
        }

        if (!spec.mask.enabled) {
            z = sampler_step(z, mean_noise(std::vector<Matrix>(eps.begin() + 1, eps.end())), p.schedule);
            continue;
        }

        std::vector<std::pair<std::string, Mask>> masks;
        std::vector<NamedLatent> content;
        for (std::size_t v = 1; v < p.content_count; ++v) {
            const std::string& id = *p.variants[v].active_lora;
            const TokenMaps maps = reduce_maps(outputs[v].records, info.capture_height, info.capture_width);
            std::vector<Matrix> sources;
            for (const auto& ref : mask_sources.at(id)) {
                sources.push_back(maps.spatial(ref.token_index));
            }
            Mask m = upsample_mask(lora_mask(sources, spec.mask.threshold), z.height, z.width);
            if (options.debug_masks) {
                dump_mask(*options.debug_masks, i, id, m);
            }
            masks.emplace_back(id, std::move(m));
            content.push_back({id, sampler_step(z, eps[v], p.schedule)});
        }
        LatentState background;
        if (p.variants.size() > p.content_count) {
            std::vector<NamedLatent> styles;
            for (std::size_t v = p.content_count; v < p.variants.size(); ++v) {
                styles.push_back({branches[v].lora_id, sampler_step(z, eps[v], p.schedule)});
            }
            background = mean_latents(styles);
        } else {
            background = sampler_step(z, eps[0], p.schedule);
        }
        z = fuse_latents(background, content, MaskSet::from_masks(std::move(masks)), spec.mask.overlap_rule);
    }
    return z;
}

// Shared loop of the baselines: `pick` yields the noise prediction at step i.
template <typename Pick>
LatentState run_baseline(const ComposeConfig& config, const Prepared& p, const AdapterMap& adapters,
                         DenoiserBackend& backend, const RunOptions& options, RunResult& result, AttentionDump& dump,
                         Pick pick) {
    std::vector<Branch> probes;
    std::vector<Conditioning> probe_conds;
    const bool observe = options.measure_iou || dump.active();
    if (observe) {
        probes = variant_branches(p, adapters, backend);
        probe_conds = conditionings(probes, p.content_count);
    }
    LatentState z = initial_latent(backend, config.spec.seed, p.schedule);
    for (int i = 0; i < options.steps; ++i) {
        if (observe) {
            const auto outputs = evaluate_branches(z, probe_conds, backend);
            result.iou_per_step.push_back(observe_attention(i, p.variants, p.content_count, outputs, p.groups,
                                                            config.spec.mask.threshold, dump, backend.tokenizer()));
        }
        z = sampler_step(z, pick(z, i), p.schedule);
    }
    return z;
}

}  // namespace

std::string reference_prompt(const ConceptBinding& binding) {
    if (binding.kind == BindingKind::Style || binding.concept_text.empty()) {
        return binding.trigger_text();
    }
    return binding.trigger_text() + " " + binding.concept_text;
}

std::string merged_prompt(const CompositionSpec& spec, const Tokenizer& tokenizer) {
    const Tokenization base = tokenizer.tokenize(spec.base_prompt);
    std::vector<std::pair<std::size_t, std::string>> inserts;
    for (const auto* b : spec.content_bindings()) {
        const auto span = find_token_span(base.tokens, tokenizer.split(b->concept_text));
        require(span.has_value(), ErrorKind::SpanNotFound, "concept '" + b->concept_text + "' not in prompt");
        inserts.emplace_back(base.tokens[static_cast<std::size_t>(span->front())].begin, b->trigger_text());
    }
    std::sort(inserts.begin(), inserts.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::string text = spec.base_prompt;
    for (const auto& [at, trigger] : inserts) {
        text.insert(at, trigger + " ");
    }
    for (const auto* b : spec.style_bindings()) {
        text += " " + b->trigger_text();
    }
    return text;
}

LatentState sample_plain(std::string_view prompt, const LoRASet& loras, std::uint64_t seed, DenoiserBackend& backend,
                         int steps, std::optional<double> cfg_scale) {
    require(steps >= 1, ErrorKind::InvalidSpec, "steps must be >= 1");
    const double cfg = cfg_scale.value_or(backend.info().default_cfg_scale);
    const DdimSchedule schedule = backend.make_schedule(steps);
    const Branch b = make_branch(backend, nullptr, prompt, loras, "", cfg);
    LatentState z = initial_latent(backend, seed, schedule);
    for (int i = 0; i < steps; ++i) {
        const Matrix cond = backend.denoise_step(z, b.cond, b.loras, false).noise_prediction;
        z = sampler_step(z, mean_noise({guided_noise(backend, z, b, cond, cfg)}), schedule);
    }
    return z;
}

std::vector<ReferenceSet> make_references(const ComposeConfig& config, const AdapterMap& adapters,
                                          DenoiserBackend& backend, int steps, std::optional<double> cfg_scale) {
    std::vector<ReferenceSet> refs;
    for (const auto& b : config.spec.bindings) {
        const LoRASet set = LoRASet::single(adapter_for(adapters, b.lora_id));
        const LatentState z = sample_plain(reference_prompt(b), set, config.spec.seed, backend, steps, cfg_scale);
        refs.push_back({b.lora_id, {backend.decode(z)}});
    }
    return refs;
}

RunResult generate(const ComposeConfig& config, const AdapterMap& adapters, DenoiserBackend& backend,
                   const RunOptions& options) {
    const Prepared p = prepare(config, backend, options);
    RunResult result;
    result.variants = p.variants;
    result.groups = p.groups;
    AttentionDump dump(options.debug_attn);
    const CompositionSpec& spec = config.spec;

    std::vector<double> weights = options.merge_weights;
    if (weights.empty()) {
        weights.assign(spec.bindings.size(), 1.0);
    }

    switch (options.method) {
        case Method::CLoRA:
            result.final_latent = run_clora(config, p, adapters, backend, options, result, dump);
            break;
        case Method::Composite: {
            const std::vector<Branch> all = variant_branches(p, adapters, backend);
            result.final_latent =
                run_baseline(config, p, adapters, backend, options, result, dump, [&](const LatentState& z, int) {
                    std::vector<Matrix> eps;
                    for (std::size_t b = 1; b < all.size(); ++b) {
                        const Matrix cond = backend.denoise_step(z, all[b].cond, all[b].loras, false).noise_prediction;
                        eps.push_back(guided_noise(backend, z, all[b], cond, p.cfg));
                    }
                    return mean_noise(eps);
                });
            break;
        }
        case Method::Merge: {
            require(weights.size() == spec.bindings.size(), ErrorKind::InvalidSpec,
                    "merge weights must match the number of bindings");
            LoRASet set;
            for (std::size_t i = 0; i < spec.bindings.size(); ++i) {
                set.entries.push_back({adapter_for(adapters, spec.bindings[i].lora_id), weights[i]});
            }
            const LoRASet merged = LoRASet::single(std::make_shared<const LoRAAdapter>(weighted_merge(set)));
            const Branch b = make_branch(backend, nullptr, merged_prompt(spec, backend.tokenizer()), merged, "merge",
                                         p.cfg);
            result.final_latent =
                run_baseline(config, p, adapters, backend, options, result, dump, [&](const LatentState& z, int) {
                    const Matrix cond = backend.denoise_step(z, b.cond, b.loras, false).noise_prediction;
                    return mean_noise({guided_noise(backend, z, b, cond, p.cfg)});
                });
            break;
        }
        case Method::Switch: {
            // Binding order: each binding's own variant and adapter.
            std::vector<Branch> order;
            for (const auto& binding : spec.bindings) {
                const auto it = std::find_if(p.variants.begin(), p.variants.end(), [&](const PromptVariant& v) {
                    return v.active_lora && *v.active_lora == binding.lora_id;
                });
                order.push_back(make_branch(backend, &*it, it->text,
                                            LoRASet::single(adapter_for(adapters, binding.lora_id)),
                                            binding.lora_id, p.cfg));
            }
            result.final_latent =
                run_baseline(config, p, adapters, backend, options, result, dump, [&](const LatentState& z, int i) {
                    const Branch& b = order[static_cast<std::size_t>(i) % order.size()];
                    const Matrix cond = backend.denoise_step(z, b.cond, b.loras, false).noise_prediction;
                    return mean_noise({guided_noise(backend, z, b, cond, p.cfg)});
                });
            break;
        }
    }
    result.image = backend.decode(result.final_latent);

    json variants = json::array();
    for (const auto& v : result.variants) {
        variants.push_back(variant_json(v));
    }
    json groups = json::array();
    for (const auto& g : result.groups) {
        json members = json::array();
        for (const auto& m : g.members) {
            members.push_back({m.variant_id, m.token_index});
        }
        groups.push_back({{"concept", g.concept_text}, {"lora", g.lora_id}, {"members", members}});
    }
    json trace = json::array();
    for (const auto& t : result.trace.steps) {
        trace.push_back(trace_json(t));
    }
    const json meta{{"version", kVersion},
                    {"backend", backend.info().name},
                    {"method", std::string(to_string(options.method))},
                    {"steps", options.steps},
                    {"cfg_scale", p.cfg},
                    {"merge_weights", weights},
                    {"guidance_module", options.guidance_module},
                    {"config", json::parse(dump_compose_config(config))},
                    {"timesteps", p.schedule.timesteps},
                    {"variants", variants},
                    {"groups", groups},
                    {"trace", trace},
                    {"attention_iou", {{"per_step", result.iou_per_step}, {"mean", result.mean_iou()}}}};
    result.metadata = meta.dump(2);
    return result;
}

RunResult replay(std::string_view metadata, DenoiserBackend& backend) {
    json meta;
    try {
        meta = json::parse(metadata);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::InvalidSpec, std::string("metadata: ") + e.what());
    }
    require(meta.contains("config") && meta.contains("method") && meta.contains("steps"), ErrorKind::InvalidSpec,
            "metadata lacks config, method or steps");
    const std::string name = meta.value("backend", "");
    require(name == backend.info().name, ErrorKind::BackendUnavailable,
            "metadata was produced by backend '" + name + "', not '" + backend.info().name + "'");
    const ComposeConfig config = parse_compose_config(meta.at("config").dump());
    RunOptions options;
    options.method = parse_method(meta.at("method").get<std::string>());
    options.steps = meta.at("steps").get<int>();
    options.cfg_scale = meta.value("cfg_scale", backend.info().default_cfg_scale);
    options.merge_weights = meta.value("merge_weights", std::vector<double>{});
    options.guidance_module = meta.value("guidance_module", true);
    const AdapterMap adapters = resolve_adapters(config, backend);
    return generate(config, adapters, backend, options);
}

}  // namespace clora
