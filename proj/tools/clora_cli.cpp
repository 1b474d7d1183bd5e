// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "clora/benchmark.hpp"
#include "clora/config.hpp"
#include "clora/errors.hpp"
#include "clora/evaluation.hpp"
#include "clora/image.hpp"
#include "clora/pipeline.hpp"
#include "clora/toy_backend.hpp"

namespace {

using namespace clora;

std::unique_ptr<DenoiserBackend> make_backend(const std::string& name) {
    if (name == "toy") {
        return std::make_unique<ToyBackend>();
    }
    throw Error(ErrorKind::BackendUnavailable,
                "backend '" + name + "' is not available in this build; it needs Stable Diffusion weights and a "
                "tensor runtime");
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name) {
    if (name == "toy") {
        return std::make_unique<ToyExtractor>();
    }
    return std::make_unique<DinoExtractor>();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::IoError, "cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::IoError, "cannot write " + path.string());
    out << text;
}

// Overrides shared by compose and bench.
struct Tuning {
    std::optional<double> tau;
    std::optional<double> mask_tau;
    std::optional<double> alpha0;
    std::optional<int> inner_iters;
    std::optional<int> cutoff;
    std::optional<std::vector<int>> refine_steps;
    std::optional<std::string> overlap;
    bool no_guidance = false;
    bool no_masking = false;

    void add_to(CLI::App* app) {
        app->add_option("--tau", tau, "contrastive temperature (default 0.5)");
        app->add_option("--mask-tau", mask_tau, "mask threshold in (0,1) (default 0.5)");
        app->add_option("--alpha0", alpha0, "base latent step size (default 20)");
        app->add_option("--inner-iters", inner_iters, "updates at refinement steps (default 5)");
        app->add_option("--cutoff", cutoff, "no latent updates from this step on (default 25)");
        app->add_option("--refine-steps", refine_steps, "refinement steps (default 0,10,20)")->delimiter(',');
        app->add_option("--overlap", overlap, "mask overlap rule: average or priority");
        app->add_flag("--no-guidance", no_guidance, "disable the latent update");
        app->add_flag("--no-masking", no_masking, "disable latent masking");
    }

    void apply(GuidanceConfig& g, MaskConfig& m) const {
        if (tau) g.temperature = *tau;
        if (alpha0) g.step_scale = *alpha0;
        if (inner_iters) g.inner_iterations = *inner_iters;
        if (cutoff) g.cutoff_step = *cutoff;
        if (refine_steps) g.refinement_steps = std::set<int>(refine_steps->begin(), refine_steps->end());
        if (no_guidance) g.enabled = false;
        if (mask_tau) m.threshold = *mask_tau;
        if (overlap) m.overlap_rule = parse_overlap_rule(*overlap);
        if (no_masking) m.enabled = false;
    }
};

int run_compose(const std::string& backend_name, const std::string& config_path, const std::string& prompt,
                const std::vector<std::string>& concepts, const std::vector<std::string>& styles,
                std::optional<std::uint64_t> seed, const Tuning& tuning, RunOptions options,
                const std::string& out_path, std::string meta_path, const std::string& replay_path) {
    auto backend = make_backend(backend_name);
    if (meta_path.empty()) {
        meta_path = std::filesystem::path(out_path).replace_extension(".json").string();
    }

    RunResult result;
    if (!replay_path.empty()) {
        result = replay(read_file(replay_path), *backend);
    } else {
        ComposeConfig cfg;
        if (!config_path.empty()) {
            cfg = load_compose_config(config_path);
        } else {
            require(!prompt.empty() && !concepts.empty(), ErrorKind::InvalidSpec,
                    "compose needs --config or --prompt with at least one --concept");
            cfg.spec.base_prompt = prompt;
            for (const auto& c : concepts) {
                const auto eq = c.find('=');
                require(eq != std::string::npos, ErrorKind::InvalidSpec, "--concept expects text=lora, got '" + c + "'");
                cfg.spec.bindings.push_back({c.substr(0, eq), c.substr(eq + 1), BindingKind::Content, ""});
            }
            for (const auto& s : styles) {
                cfg.spec.bindings.push_back({"", s, BindingKind::Style, ""});
            }
        }
        if (seed) {
            cfg.spec.seed = *seed;
        }
        tuning.apply(cfg.spec.guidance, cfg.spec.mask);
        fill_toy_adapters(cfg);
        const AdapterMap adapters = resolve_adapters(cfg, *backend);
        result = generate(cfg, adapters, *backend, options);
    }
    const std::filesystem::path out(out_path);
    if (out.has_parent_path()) {
        std::filesystem::create_directories(out.parent_path());
    }
    write_png(result.image, out);
    write_file(meta_path, result.metadata);
    std::printf("wrote %s and %s (mean attention IoU %.6f)\n", out_path.c_str(), meta_path.c_str(),
                result.mean_iou());
    return 0;
}

int run_bench(const std::string& backend_name, const std::string& manifest_path, const std::string& out_dir,
              const std::string& extractor_name, const Tuning& tuning, std::optional<int> steps) {
    auto backend = make_backend(backend_name);
    Manifest manifest = load_manifest(manifest_path);
    if (!out_dir.empty()) {
        manifest.output_dir = out_dir;
    }
    if (steps) {
        manifest.steps = *steps;
    }
    tuning.apply(manifest.guidance, manifest.mask);
    std::unique_ptr<FeatureExtractor> extractor;
    try {
        extractor = make_extractor(extractor_name);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::ExtractorUnavailable) {
            throw;
        }
        std::fprintf(stderr, "warning: %s; similarities are reported as 0\n", e.what());
        struct Unavailable final : FeatureExtractor {
            std::string name() const override { return "none"; }
            Vector features(const Image&) override {
                throw Error(ErrorKind::ExtractorUnavailable, "no feature extractor");
            }
        };
        extractor = std::make_unique<Unavailable>();
    }
    const BenchmarkReport report = run_benchmark(manifest, *backend, *extractor);
    std::fputs(report.table.c_str(), stdout);
    int failed = 0;
    for (const auto& c : report.cells) {
        failed += c.ok ? 0 : 1;
    }
    if (failed > 0) {
        std::fprintf(stderr, "%d of %zu cells failed (see cells.csv)\n", failed, report.cells.size());
    }
    return 0;
}

int run_eval(const std::string& image_path, const std::vector<std::string>& refs, const std::string& extractor_name) {
    std::unique_ptr<FeatureExtractor> extractor;
    try {
        extractor = make_extractor(extractor_name);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::ExtractorUnavailable) {
            throw;
        }
        std::printf("evaluation skipped: %s\n", e.what());
        return 0;
    }
    std::vector<ReferenceSet> sets;
    for (const auto& r : refs) {
        const auto eq = r.find('=');
        require(eq != std::string::npos, ErrorKind::InvalidSpec, "--ref expects lora=image.png, got '" + r + "'");
        const std::string id = r.substr(0, eq);
        auto it = std::find_if(sets.begin(), sets.end(), [&](const ReferenceSet& s) { return s.lora_id == id; });
        if (it == sets.end()) {
            sets.push_back({id, {}});
            it = sets.end() - 1;
        }
        it->images.push_back(read_png(r.substr(eq + 1)));
    }
    const EvalReport report = evaluate(read_png(image_path), sets, *extractor);
    for (const auto& s : report.per_lora) {
        std::printf("%s,%.6f\n", s.lora_id.c_str(), s.similarity);
    }
    std::printf("min,%.6f\navg,%.6f\nmax,%.6f\n", report.min_sim, report.avg_sim, report.max_sim);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrastive multi-LoRA composition"};
    app.require_subcommand(1);
    std::string backend = "toy";
    app.add_option("--backend", backend, "denoiser backend")->check(CLI::IsMember({"toy", "sd15"}));

    // compose
    auto* compose = app.add_subcommand("compose", "generate one composition");
    std::string config_path, prompt, out_path = "out.png", meta_path, replay_path, method = "clora";
    std::vector<std::string> concepts, styles;
    std::optional<std::uint64_t> seed;
    std::optional<double> cfg_scale;
    std::vector<double> merge_weights;
    std::string debug_attn, debug_masks;
    int steps = 50;
    Tuning compose_tuning;
    compose->add_option("--config", config_path, "compose config (JSON)");
    compose->add_option("--prompt", prompt, "base prompt");
    compose->add_option("--concept", concepts, "content binding text=lora (repeatable)");
    compose->add_option("--style", styles, "style adapter id (repeatable)");
    compose->add_option("--method", method)->check(CLI::IsMember({"clora", "merge", "composite", "switch"}));
    compose->add_option("--seed", seed);
    compose->add_option("--steps", steps, "sampler steps")->check(CLI::PositiveNumber);
    compose->add_option("--cfg", cfg_scale, "classifier-free guidance scale");
    compose->add_option("--merge-weights", merge_weights, "per-binding weights for --method merge")->delimiter(',');
    compose->add_option("-o,--out", out_path, "output PNG");
    compose->add_option("--meta", meta_path, "metadata JSON (default: <out>.json)");
    compose->add_option("--replay", replay_path, "re-run from a metadata file");
    compose->add_option("--debug-attn", debug_attn, "write captured token maps as JSON Lines");
    compose->add_option("--debug-masks", debug_masks, "directory for per-step mask PNGs");
    compose_tuning.add_to(compose);

    // bench
    auto* bench = app.add_subcommand("bench", "run a benchmark manifest");
    std::string manifest_path, bench_out, bench_extractor = "toy";
    std::optional<int> bench_steps;
    Tuning bench_tuning;
    bench->add_option("manifest", manifest_path, "manifest (JSON)")->required();
    bench->add_option("--out-dir", bench_out, "override the manifest output directory");
    bench->add_option("--steps", bench_steps, "override the manifest step count")->check(CLI::PositiveNumber);
    bench->add_option("--extractor", bench_extractor)->check(CLI::IsMember({"toy", "dino"}));
    bench_tuning.add_to(bench);

    // eval
    auto* eval = app.add_subcommand("eval", "score an image against single-LoRA references");
    std::string eval_image, eval_extractor = "toy";
    std::vector<std::string> eval_refs;
    eval->add_option("image", eval_image, "composed image (PNG)")->required();
    eval->add_option("--ref", eval_refs, "lora=reference.png (repeatable)")->required();
    eval->add_option("--extractor", eval_extractor)->check(CLI::IsMember({"toy", "dino"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (compose->parsed()) {
            RunOptions options;
            options.method = parse_method(method);
            options.steps = steps;
            options.cfg_scale = cfg_scale;
            options.merge_weights = merge_weights;
            if (!debug_attn.empty()) options.debug_attn = debug_attn;
            if (!debug_masks.empty()) options.debug_masks = debug_masks;
            return run_compose(backend, config_path, prompt, concepts, styles, seed, compose_tuning, options, out_path,
                               meta_path, replay_path);
        }
        if (bench->parsed()) {
            return run_bench(backend, manifest_path, bench_out, bench_extractor, bench_tuning, bench_steps);
        }
        return run_eval(eval_image, eval_refs, eval_extractor);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
