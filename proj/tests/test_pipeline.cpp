// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "clora/attention.hpp"
#include "clora/benchmark.hpp"
#include "clora/config.hpp"
#include "clora/errors.hpp"
#include "clora/evaluation.hpp"
#include "clora/pipeline.hpp"
#include "clora/toy_backend.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace clora;
using test_util::error_kind;
using nlohmann::json;

namespace {

constexpr int kSteps = 12;

ComposeConfig two_concepts(std::uint64_t seed = 0) {
    ComposeConfig cfg = parse_compose_config(R"({
        "prompt": "a cat and a dog",
        "concepts": [{"text": "cat", "lora": "L1"}, {"text": "dog", "lora": "L2"}],
        "guidance": {"cutoff": 6, "refine_steps": [0, 3], "inner_iters": 2}
    })");
    cfg.spec.seed = seed;
    fill_toy_adapters(cfg);
    return cfg;
}

RunOptions options(Method m) {
    RunOptions o;
    o.method = m;
    o.steps = kSteps;
    return o;
}

std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("clora_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

Image gray(int w, int h, std::uint8_t v) {
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.assign(static_cast<std::size_t>(w * h), v);
    return img;
}

// Features keyed on the first pixel, so similarities can be set by hand.
class TableExtractor final : public FeatureExtractor {
public:
    std::map<std::uint8_t, Vector> table;
    std::string name() const override { return "table"; }
    Vector features(const Image& image) override { return table.at(image.pixels.front()); }
};

Vector unit_at_angle(double cosine) {
    Vector v(2);
    v << cosine, std::sqrt(1.0 - cosine * cosine);
    return v;
}

}  // namespace

TEST_CASE("compose config parsing") {
    const ComposeConfig cfg = two_concepts(5);
    CHECK(cfg.spec.bindings.size() == 2);
    CHECK(cfg.spec.guidance.cutoff_step == 6);
    CHECK(cfg.adapters.at("L1").toy->quadrant == Quadrant::NW);
    CHECK(cfg.adapters.at("L2").toy->quadrant == Quadrant::SE);

    const ComposeConfig again = parse_compose_config(dump_compose_config(cfg));
    CHECK(dump_compose_config(again) == dump_compose_config(cfg));

    CHECK(error_kind([] { parse_compose_config(R"({"prompt": "a cat", "concepts": [], "colour": 1})"); }) ==
          ErrorKind::InvalidSpec);
    CHECK(error_kind([] {
              parse_compose_config(R"({"prompt": "a cat", "concepts": [{"text": "cat", "lora": "A", "x": 1}]})");
          }) == ErrorKind::InvalidSpec);
    CHECK(error_kind([] { parse_compose_config(R"({"prompt": "a cat", "concepts": [], "mask": {"tau": 2}})"); }) ==
          ErrorKind::InvalidSpec);
    CHECK(error_kind([] { parse_compose_config("{not json"); }) == ErrorKind::InvalidSpec);
}

TEST_CASE("toy adapters need the toy backend") {
    struct Other final : DenoiserBackend {
        ToyBackend inner;
        const BackendInfo& info() const override { return inner.info(); }
        const Tokenizer& tokenizer() const override { return inner.tokenizer(); }
        PromptEmbedding encode_text(std::string_view t, const LoRASet& l) override { return inner.encode_text(t, l); }
        StepOutput denoise_step(const LatentState& z, const PromptEmbedding& e, const LoRASet& l, bool c) override {
            return inner.denoise_step(z, e, l, c);
        }
        LatentGradient grad_wrt_latent(const LatentState& z, std::span<const Conditioning> b,
                                       const AttentionObjective& o) override {
            return inner.grad_wrt_latent(z, b, o);
        }
        Image decode(const LatentState& z) override { return inner.decode(z); }
    } other;
    CHECK(error_kind([&] { resolve_adapters(two_concepts(), other); }) == ErrorKind::BackendUnavailable);
}

TEST_CASE("run metadata lists variants, groups and trace") {
    ToyBackend backend;
    const ComposeConfig cfg = two_concepts(1);
    const RunResult r = generate(cfg, resolve_adapters(cfg, backend), backend, options(Method::CLoRA));
    const json meta = json::parse(r.metadata);
    CHECK(meta.at("version") == kVersion);
    CHECK(meta.at("method") == "clora");
    CHECK(meta.at("variants").size() == 3);
    CHECK(meta.at("groups").size() == 2);
    CHECK(meta.at("trace").size() == kSteps);
    CHECK(meta.at("timesteps").size() == kSteps);
    CHECK(meta.at("attention_iou").at("per_step").size() == kSteps);
    CHECK(meta.at("trace")[0].at("losses").size() == 2);
    CHECK(meta.at("trace")[1].at("losses").size() == 1);
    CHECK(meta.at("trace")[6].at("losses").size() == 0);
    CHECK(r.image.width == 16);
}

TEST_CASE("single-LoRA baselines equal plain sampling") {
    ToyBackend backend;
    ComposeConfig cfg = parse_compose_config(R"({"prompt": "a cat", "concepts": [{"text": "cat", "lora": "L1"}],
        "seed": 4})");
    fill_toy_adapters(cfg);
    const AdapterMap adapters = resolve_adapters(cfg, backend);
    const LatentState plain =
        sample_plain("a L1 cat", LoRASet::single(adapters.at("L1")), 4, backend, kSteps);
    for (Method m : {Method::Composite, Method::Switch}) {
        const RunResult r = generate(cfg, adapters, backend, options(m));
        CHECK(r.final_latent.data == plain.data);
    }
}

TEST_CASE("merge with weights (1, 0) equals the first adapter alone") {
    ToyBackend backend;
    const ComposeConfig cfg = two_concepts(2);
    const AdapterMap adapters = resolve_adapters(cfg, backend);
    RunOptions o = options(Method::Merge);
    o.merge_weights = {1.0, 0.0};
    const RunResult r = generate(cfg, adapters, backend, o);
    CHECK(merged_prompt(cfg.spec, backend.tokenizer()) == "a L1 cat and a L2 dog");
    const LatentState plain =
        sample_plain("a L1 cat and a L2 dog", LoRASet::single(adapters.at("L1")), 2, backend, kSteps);
    CHECK(r.final_latent.data == plain.data);

    o.merge_weights = {1.0};
    CHECK(error_kind([&] { generate(cfg, adapters, backend, o); }) == ErrorKind::InvalidSpec);
}

TEST_CASE("runs are deterministic and replayable") {
    ToyBackend backend;
    const ComposeConfig cfg = two_concepts(3);
    const AdapterMap adapters = resolve_adapters(cfg, backend);
    for (Method m : {Method::CLoRA, Method::Merge, Method::Composite, Method::Switch}) {
        const RunResult a = generate(cfg, adapters, backend, options(m));
        const RunResult b = generate(cfg, adapters, backend, options(m));
        CHECK(a.image == b.image);
        CHECK(a.metadata == b.metadata);
        const RunResult c = replay(a.metadata, backend);
        CHECK(c.image == a.image);
        CHECK(c.metadata == a.metadata);
    }
    CHECK(error_kind([&] { replay("{}", backend); }) == ErrorKind::InvalidSpec);
}

TEST_CASE("ablations") {
    ToyBackend backend;
    ComposeConfig cfg = two_concepts(6);
    cfg.spec.guidance.enabled = false;
    const AdapterMap adapters = resolve_adapters(cfg, backend);
    RunOptions removed = options(Method::CLoRA);
    removed.guidance_module = false;
    CHECK(generate(cfg, adapters, backend, options(Method::CLoRA)).image ==
          generate(cfg, adapters, backend, removed).image);

    cfg.spec.mask.enabled = false;
    CHECK(generate(cfg, adapters, backend, options(Method::CLoRA)).image ==
          generate(cfg, adapters, backend, options(Method::Composite)).image);
}

TEST_CASE("debug dumps") {
    ToyBackend backend;
    const ComposeConfig cfg = two_concepts(1);
    const auto dir = scratch_dir("debug");
    RunOptions o = options(Method::CLoRA);
    o.steps = 3;
    ComposeConfig short_cfg = cfg;
    short_cfg.spec.guidance.cutoff_step = 2;
    short_cfg.spec.guidance.refinement_steps = {0};
    o.debug_attn = dir / "attn.jsonl";
    o.debug_masks = dir / "masks";
    generate(short_cfg, resolve_adapters(short_cfg, backend), backend, o);
    std::istringstream lines(slurp(dir / "attn.jsonl"));
    std::string line;
    int records = 0;
    while (std::getline(lines, line)) {
        CHECK(json::accept(line));
        ++records;
    }
    CHECK(records > 3);
    CHECK(std::filesystem::exists(dir / "masks" / "step_000_L1.png"));
    CHECK(std::filesystem::exists(dir / "masks" / "step_002_L2.png"));
}

TEST_CASE("reference and merged prompts") {
    CHECK(reference_prompt({"cat", "L1", BindingKind::Content, ""}) == "L1 cat");
    CHECK(reference_prompt({"cat", "L1", BindingKind::Content, "sks"}) == "sks cat");
    CHECK(reference_prompt({"", "ink", BindingKind::Style, ""}) == "ink");
    CompositionSpec spec;
    spec.base_prompt = "a cat";
    spec.bindings = {{"cat", "L1", BindingKind::Content, ""}, {"", "ink", BindingKind::Style, ""}};
    WordTokenizer tok;
    CHECK(merged_prompt(spec, tok) == "a L1 cat ink");
}

TEST_CASE("evaluation arithmetic") {
    const EvalReport r = make_report({{"A", 0.2}, {"B", 0.8}});
    CHECK(r.min_sim == 0.2);
    CHECK(r.avg_sim == 0.5);
    CHECK(r.max_sim == 0.8);
    const EvalReport empty = make_report({});
    CHECK(empty.min_sim == 0.0);
    CHECK(empty.avg_sim == 0.0);

    TableExtractor ex;
    ex.table[0] = unit_at_angle(1.0);
    ex.table[1] = unit_at_angle(0.2);
    ex.table[2] = unit_at_angle(0.8);
    ex.table[3] = unit_at_angle(0.0);
    const EvalReport e = evaluate(gray(2, 2, 0), {{"A", {gray(2, 2, 1)}}, {"B", {gray(2, 2, 2)}}}, ex);
    CHECK(e.min_sim == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(e.avg_sim == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(e.max_sim == doctest::Approx(0.8).epsilon(1e-15));
    // Multiple references average.
    const EvalReport m = evaluate(gray(2, 2, 0), {{"A", {gray(2, 2, 1), gray(2, 2, 2)}}}, ex);
    CHECK(m.per_lora[0].similarity == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(evaluate(gray(2, 2, 0), {{"A", {gray(2, 2, 3)}}}, ex).max_sim == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("toy extractor") {
    ToyExtractor ex;
    Image a = gray(16, 16, 0);
    for (int i = 0; i < 128; ++i) a.pixels[static_cast<std::size_t>(i)] = 200;
    CHECK(cosine_sim(ex.features(a), ex.features(a)) == doctest::Approx(1.0));
    Image flipped = a;
    std::reverse(flipped.pixels.begin(), flipped.pixels.end());
    CHECK(cosine_sim(ex.features(a), ex.features(flipped)) == doctest::Approx(-1.0));
    CHECK(ex.features(a).norm() == doctest::Approx(1.0));
    CHECK(error_kind([] { DinoExtractor d; }) == ErrorKind::ExtractorUnavailable);
}

TEST_CASE("random reports are ordered") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<LoraSimilarity> sims;
        for (int k = 0; k < 1 + trial % 5; ++k) sims.push_back({"L" + std::to_string(k), u(rng)});
        const EvalReport r = make_report(sims);
        CHECK(r.min_sim <= r.avg_sim);
        CHECK(r.avg_sim <= r.max_sim);
    }
}

TEST_CASE("manifest parsing") {
    const Manifest m = parse_manifest(R"({"methods": ["clora", "merge"], "steps": 8,
        "entries": [{"prompt": "a cat and a dog", "concepts": ["cat", "dog"], "loras": ["A", "B"],
                     "seeds": [1, 2]}]})");
    CHECK(m.methods.size() == 2);
    CHECK(m.entries[0].seeds == std::vector<std::uint64_t>{1, 2});
    CHECK(parse_manifest(R"({"entries": []})").entries.empty());
    CHECK(error_kind([] { parse_manifest(R"({"entries": [], "extra": 1})"); }) == ErrorKind::InvalidSpec);
    CHECK(error_kind([] {
              parse_manifest(R"({"entries": [{"prompt": "a cat", "concepts": ["cat"], "loras": ["A"],
                                              "seeds": [1, 1]}]})");
          }) == ErrorKind::InvalidSpec);
    const std::string slug = entry_slug(m.entries[0]);
    CHECK(slug.rfind("a-cat-and-a-dog-", 0) == 0);
    CHECK(slug.size() == std::string("a-cat-and-a-dog-").size() + 8);
}

TEST_CASE("benchmark runner") {
    ToyBackend backend;
    ToyExtractor ex;
    const auto dir = scratch_dir("bench");

    Manifest empty;
    empty.output_dir = dir / "empty";
    const BenchmarkReport none = run_benchmark(empty, backend, ex);
    CHECK(none.cells.empty());

    const std::string text = R"({"methods": ["clora", "composite"], "steps": 8,
        "guidance": {"cutoff": 4, "refine_steps": [0], "inner_iters": 2},
        "entries": [{"prompt": "a cat and a dog", "concepts": ["cat", "dog"], "loras": ["A", "B"], "seeds": [1, 2]},
                    {"prompt": "a bird on a tree", "concepts": ["bird"], "loras": ["C"], "seeds": [3]}]})";
    Manifest m = parse_manifest(text);
    m.output_dir = dir / "a";
    const BenchmarkReport a = run_benchmark(m, backend, ex);
    CHECK(a.cells.size() == 6);
    for (const auto& c : a.cells) CHECK(c.ok);
    const auto cell = dir / "a" / entry_slug(m.entries[0]) / "seed_2";
    CHECK(std::filesystem::exists(cell / "clora.png"));
    CHECK(std::filesystem::exists(cell / "composite.json"));
    CHECK(std::filesystem::exists(cell / "refs" / "A.png"));
    CHECK(slurp(dir / "a" / "table.csv") == a.table);

    // Same table from a repeat run and from shuffled entries.
    m.output_dir = dir / "b";
    CHECK(run_benchmark(m, backend, ex).table == a.table);
    std::reverse(m.entries.begin(), m.entries.end());
    m.output_dir = dir / "c";
    CHECK(run_benchmark(m, backend, ex).table == a.table);
    CHECK(slurp(dir / "b" / entry_slug(m.entries[1]) / "seed_1" / "clora.png") ==
          slurp(dir / "c" / entry_slug(m.entries[1]) / "seed_1" / "clora.png"));
}

TEST_CASE("failed cells are recorded and skipped") {
    ToyBackend backend;
    ToyExtractor ex;
    test_util::WarningCapture warnings;
    Manifest m = parse_manifest(R"({"steps": 4, "guidance": {"cutoff": 2, "refine_steps": [0]},
        "entries": [{"prompt": "a cat", "concepts": ["dog"], "loras": ["A"]},
                    {"prompt": "a cat", "concepts": ["cat"], "loras": ["A"]}]})");
    m.output_dir = scratch_dir("bench_fail");
    const BenchmarkReport r = run_benchmark(m, backend, ex);
    REQUIRE(r.cells.size() == 2);
    CHECK_FALSE(r.cells[0].ok);
    CHECK(r.cells[0].error.find("SpanNotFound") != std::string::npos);
    CHECK(r.cells[1].ok);
    CHECK_FALSE(warnings.seen.empty());
}
