// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "clora/attention.hpp"
#include "clora/benchmark.hpp"
#include "clora/composition.hpp"
#include "clora/config.hpp"
#include "clora/errors.hpp"
#include "clora/evaluation.hpp"
#include "clora/guidance.hpp"
#include "clora/image.hpp"
#include "clora/lora.hpp"
#include "clora/mask_fusion.hpp"
#include "clora/pipeline.hpp"
#include "clora/scheduler.hpp"
#include "clora/toy_backend.hpp"

namespace py = pybind11;
using namespace clora;

namespace {

// Python subclasses of FeatureExtractor, e.g. a ViT wrapper.
class PyFeatureExtractor : public FeatureExtractor {
public:
    using FeatureExtractor::FeatureExtractor;
    std::string name() const override { PYBIND11_OVERRIDE_PURE(std::string, FeatureExtractor, name); }
    Vector features(const Image& image) override { PYBIND11_OVERRIDE_PURE(Vector, FeatureExtractor, features, image); }
};

py::array_t<std::uint8_t> image_to_array(const Image& img) {
    std::vector<py::ssize_t> shape{img.height, img.width};
    if (img.channels != 1) {
        shape.push_back(img.channels);
    }
    py::array_t<std::uint8_t> out(shape);
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

Image array_to_image(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    require(a.ndim() == 2 || a.ndim() == 3, ErrorKind::ContractViolation, "image array must be (h, w) or (h, w, c)");
    Image img;
    img.height = static_cast<int>(a.shape(0));
    img.width = static_cast<int>(a.shape(1));
    img.channels = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    require(img.channels == 1 || img.channels == 3, ErrorKind::ContractViolation, "image must have 1 or 3 channels");
    img.pixels.assign(a.data(), a.data() + a.size());
    return img;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Contrastive multi-LoRA composition";
    m.attr("__version__") = kVersion;

    py::enum_<ErrorKind>(m, "ErrorKind")
        .value("SpanNotFound", ErrorKind::SpanNotFound)
        .value("PromptTooLong", ErrorKind::PromptTooLong)
        .value("InvalidSpec", ErrorKind::InvalidSpec)
        .value("AdapterMismatch", ErrorKind::AdapterMismatch)
        .value("UnsupportedFormat", ErrorKind::UnsupportedFormat)
        .value("NumericalFailure", ErrorKind::NumericalFailure)
        .value("ContractViolation", ErrorKind::ContractViolation)
        .value("ScheduleExhausted", ErrorKind::ScheduleExhausted)
        .value("ResolutionUnavailable", ErrorKind::ResolutionUnavailable)
        .value("ZeroVector", ErrorKind::ZeroVector)
        .value("EmptyGroup", ErrorKind::EmptyGroup)
        .value("DegenerateMap", ErrorKind::DegenerateMap)
        .value("ExtractorUnavailable", ErrorKind::ExtractorUnavailable)
        .value("BackendUnavailable", ErrorKind::BackendUnavailable)
        .value("IoError", ErrorKind::IoError);

    // Owned by the module attribute; kept as a bare handle for the translator.
    static py::handle error_type = py::exception<Error>(m, "CloraError").release();
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = error_type(e.what());
            exc.attr("kind") = py::cast(e.kind());
            PyErr_SetObject(error_type.ptr(), exc.ptr());
        }
    });

    // composition
    py::enum_<BindingKind>(m, "BindingKind").value("Content", BindingKind::Content).value("Style", BindingKind::Style);
    py::class_<ConceptBinding>(m, "ConceptBinding")
        .def(py::init([](std::string text, std::string lora, BindingKind kind, std::string trigger) {
                 return ConceptBinding{std::move(text), std::move(lora), kind, std::move(trigger)};
             }),
             py::arg("concept_text"), py::arg("lora_id"), py::arg("kind") = BindingKind::Content,
             py::arg("trigger") = "")
        .def_readwrite("concept_text", &ConceptBinding::concept_text)
        .def_readwrite("lora_id", &ConceptBinding::lora_id)
        .def_readwrite("kind", &ConceptBinding::kind)
        .def_readwrite("trigger", &ConceptBinding::trigger);
    py::class_<CompositionSpec>(m, "CompositionSpec")
        .def(py::init<>())
        .def_readwrite("base_prompt", &CompositionSpec::base_prompt)
        .def_readwrite("bindings", &CompositionSpec::bindings)
        .def_readwrite("seed", &CompositionSpec::seed)
        .def_readwrite("guidance", &CompositionSpec::guidance)
        .def_readwrite("mask", &CompositionSpec::mask);
    py::class_<PromptVariant>(m, "PromptVariant")
        .def_readonly("variant_id", &PromptVariant::variant_id)
        .def_readonly("text", &PromptVariant::text)
        .def_readonly("active_lora", &PromptVariant::active_lora)
        .def_readonly("token_spans", &PromptVariant::token_spans)
        .def_readonly("trigger_span", &PromptVariant::trigger_span)
        .def_readonly("token_count", &PromptVariant::token_count)
        .def("__repr__", [](const PromptVariant& v) { return "<PromptVariant " + std::to_string(v.variant_id) + " '" + v.text + "'>"; });
    py::class_<TokenRef>(m, "TokenRef")
        .def_readonly("variant_id", &TokenRef::variant_id)
        .def_readonly("token_index", &TokenRef::token_index)
        .def("__iter__", [](const TokenRef& r) { return py::iter(py::make_tuple(r.variant_id, r.token_index)); })
        .def("__eq__", [](const TokenRef& a, const TokenRef& b) { return a == b; });
    py::class_<ConceptGroup>(m, "ConceptGroup")
        .def_readonly("concept_text", &ConceptGroup::concept_text)
        .def_readonly("lora_id", &ConceptGroup::lora_id)
        .def_readonly("members", &ConceptGroup::members);
    py::class_<Tokenizer>(m, "Tokenizer");
    py::class_<WordTokenizer, Tokenizer>(m, "WordTokenizer")
        .def(py::init<std::size_t>(), py::arg("max_length") = 77)
        .def("tokenize", [](const WordTokenizer& t, std::string_view text) {
            std::vector<std::string> out;
            for (const auto& tok : t.tokenize(text).tokens) out.push_back(tok.text);
            return out;
        });
    m.def("build_variants", &build_variants, py::arg("spec"), py::arg("tokenizer"));
    m.def("build_style_variants", &build_style_variants, py::arg("spec"), py::arg("tokenizer"));
    m.def("build_groups", &build_groups, py::arg("variants"), py::arg("spec"));
    m.def("mask_token_sources", &mask_token_sources, py::arg("spec"), py::arg("variants"));

    // lora
    py::class_<LoRALayerDelta>(m, "LoRALayerDelta")
        .def(py::init([](std::string key, Matrix up, Matrix down, double alpha) {
                 return LoRALayerDelta{std::move(key), std::move(down), std::move(up), alpha};
             }),
             py::arg("layer_key"), py::arg("up"), py::arg("down"), py::arg("alpha") = 1.0)
        .def_readwrite("layer_key", &LoRALayerDelta::layer_key)
        .def_readwrite("up", &LoRALayerDelta::up)
        .def_readwrite("down", &LoRALayerDelta::down)
        .def_readwrite("alpha", &LoRALayerDelta::alpha)
        .def_property_readonly("rank", &LoRALayerDelta::rank);
    py::class_<LoRAAdapter, std::shared_ptr<LoRAAdapter>>(m, "LoRAAdapter")
        .def(py::init<>())
        .def_readwrite("lora_id", &LoRAAdapter::lora_id)
        .def_readwrite("trigger", &LoRAAdapter::trigger)
        .def_readwrite("deltas", &LoRAAdapter::deltas)
        .def_readwrite("text_encoder_deltas", &LoRAAdapter::text_encoder_deltas);
    m.def("apply_delta", &apply_delta, py::arg("base"), py::arg("delta"), py::arg("scale") = 1.0);
    m.def("load_adapter", &load_adapter, py::arg("path"));
    m.def("save_adapter", &save_adapter, py::arg("adapter"), py::arg("path"));
    m.def(
        "weighted_merge",
        [](const std::vector<std::pair<std::shared_ptr<LoRAAdapter>, double>>& entries) {
            LoRASet set;
            for (const auto& [a, w] : entries) set.entries.push_back({a, w});
            return weighted_merge(set);
        },
        py::arg("entries"), "Merge [(adapter, weight), ...] into one adapter.");

    // attention
    m.def("cosine_sim", &cosine_sim, py::arg("u"), py::arg("v"));
    m.def(
        "infonce_loss", [](const std::vector<std::vector<Vector>>& g, double t) { return infonce_loss(g, t); },
        py::arg("groups"), py::arg("temperature") = 0.5);
    m.def(
        "infonce_loss_with_grad",
        [](const std::vector<std::vector<Vector>>& g, double t) {
            GroupTensors grads;
            const double loss = infonce_loss_with_grad(g, t, &grads);
            return py::make_tuple(loss, grads);
        },
        py::arg("groups"), py::arg("temperature") = 0.5);
    m.def("group_overlap_iou", &group_overlap_iou, py::arg("a"), py::arg("b"), py::arg("threshold") = 0.5);

    // masks
    py::enum_<OverlapRule>(m, "OverlapRule").value("Average", OverlapRule::Average).value("Priority", OverlapRule::Priority);
    py::class_<MaskConfig>(m, "MaskConfig")
        .def(py::init<>())
        .def_readwrite("threshold", &MaskConfig::threshold)
        .def_readwrite("overlap_rule", &MaskConfig::overlap_rule)
        .def_readwrite("enabled", &MaskConfig::enabled)
        .def("validate", &MaskConfig::validate);
    m.def("binary_mask", &binary_mask, py::arg("attention"), py::arg("threshold") = 0.5);
    m.def(
        "lora_mask", [](const std::vector<Matrix>& s, double t) { return lora_mask(s, t); }, py::arg("sources"),
        py::arg("threshold") = 0.5);
    m.def("upsample_mask", &upsample_mask, py::arg("mask"), py::arg("height"), py::arg("width"));

    // guidance
    py::class_<GuidanceConfig>(m, "GuidanceConfig")
        .def(py::init<>())
        .def_readwrite("temperature", &GuidanceConfig::temperature)
        .def_readwrite("step_scale", &GuidanceConfig::step_scale)
        .def_readwrite("refinement_steps", &GuidanceConfig::refinement_steps)
        .def_readwrite("inner_iterations", &GuidanceConfig::inner_iterations)
        .def_readwrite("cutoff_step", &GuidanceConfig::cutoff_step)
        .def_readwrite("enabled", &GuidanceConfig::enabled)
        .def("validate", &GuidanceConfig::validate, py::arg("total_steps"));
    m.def(
        "latent_update",
        [](const Matrix& z, const Matrix& grad, double alpha) {
            LatentState s;
            s.data = z;
            return latent_update(s, grad, alpha).data;
        },
        py::arg("z"), py::arg("grad"), py::arg("alpha"));
    m.def("alpha_schedule", &alpha_schedule, py::arg("step_index"), py::arg("total_steps"), py::arg("alpha0") = 20.0);
    m.def("inner_iterations_at", &inner_iterations_at, py::arg("config"), py::arg("step_index"));

    // backend
    py::class_<DenoiserBackend>(m, "DenoiserBackend")
        .def_property_readonly("name", [](const DenoiserBackend& b) { return b.info().name; });
    py::enum_<Precision>(m, "Precision").value("Float32", Precision::Float32).value("Float64", Precision::Float64);
    py::enum_<Quadrant>(m, "Quadrant")
        .value("NW", Quadrant::NW)
        .value("NE", Quadrant::NE)
        .value("SW", Quadrant::SW)
        .value("SE", Quadrant::SE)
        .value("Global", Quadrant::Global);
    py::class_<ToyBackend, DenoiserBackend>(m, "ToyBackend")
        .def(py::init([](Precision p) {
                 ToyConfig c;
                 c.precision = p;
                 return std::make_unique<ToyBackend>(c);
             }),
             py::arg("precision") = Precision::Float32)
        .def(
            "toy_adapter",
            [](ToyBackend& b, const std::string& id, Quadrant q, std::uint64_t seed, const std::string& trigger) {
                return std::make_shared<LoRAAdapter>(
                    synth_toy_adapter(b, seed, {id, trigger.empty() ? id : trigger, q}));
            },
            py::arg("lora_id"), py::arg("quadrant"), py::arg("seed") = 0, py::arg("trigger") = "")
        .def(
            "quadrant_mass",
            [](ToyBackend& b, const LoRAAdapter& a, std::string_view prompt, std::uint64_t seed) {
                return probe_quadrant_mass(b, a, prompt, seed);
            },
            py::arg("adapter"), py::arg("prompt"), py::arg("probe_seed") = 0);
    py::class_<DdimSchedule>(m, "DdimSchedule")
        .def_static("stable_diffusion", &DdimSchedule::stable_diffusion, py::arg("steps"))
        .def_readonly("timesteps", &DdimSchedule::timesteps)
        .def_readonly("alpha_bar", &DdimSchedule::alpha_bar);

    // evaluation
    py::class_<FeatureExtractor, PyFeatureExtractor>(m, "FeatureExtractor")
        .def(py::init<>())
        .def("name", &FeatureExtractor::name)
        .def("features", &FeatureExtractor::features);
    py::class_<ToyExtractor, FeatureExtractor>(m, "ToyExtractor").def(py::init<int>(), py::arg("grid") = 8);
    py::class_<Image>(m, "Image")
        .def(py::init(&array_to_image), py::arg("pixels"))
        .def_readonly("width", &Image::width)
        .def_readonly("height", &Image::height)
        .def_readonly("channels", &Image::channels)
        .def("to_array", &image_to_array)
        .def("save", [](const Image& i, const std::filesystem::path& p) { write_png(i, p); })
        .def_static("load", &read_png, py::arg("path"))
        .def("__eq__", [](const Image& a, const Image& b) { return a == b; });
    py::class_<LoraSimilarity>(m, "LoraSimilarity")
        .def_readonly("lora_id", &LoraSimilarity::lora_id)
        .def_readonly("similarity", &LoraSimilarity::similarity);
    py::class_<EvalReport>(m, "EvalReport")
        .def_readonly("per_lora", &EvalReport::per_lora)
        .def_readonly("min_sim", &EvalReport::min_sim)
        .def_readonly("avg_sim", &EvalReport::avg_sim)
        .def_readonly("max_sim", &EvalReport::max_sim);
    m.def(
        "make_report",
        [](const std::map<std::string, double>& sims) {
            std::vector<LoraSimilarity> v;
            for (const auto& [id, s] : sims) v.push_back({id, s});
            return make_report(v);
        },
        py::arg("similarities"));
    m.def(
        "evaluate",
        [](const Image& composed, const std::map<std::string, std::vector<Image>>& refs, FeatureExtractor& ex) {
            std::vector<ReferenceSet> sets;
            for (const auto& [id, imgs] : refs) sets.push_back({id, imgs});
            return evaluate(composed, sets, ex);
        },
        py::arg("composed"), py::arg("references"), py::arg("extractor"));

    // pipeline
    py::enum_<Method>(m, "Method")
        .value("CLoRA", Method::CLoRA)
        .value("Merge", Method::Merge)
        .value("Composite", Method::Composite)
        .value("Switch", Method::Switch);
    py::class_<ComposeConfig>(m, "ComposeConfig")
        .def_readwrite("spec", &ComposeConfig::spec)
        .def("to_json", &dump_compose_config)
        .def_static(
            "from_json",
            [](std::string_view text) {
                ComposeConfig c = parse_compose_config(text);
                fill_toy_adapters(c);
                return c;
            },
            py::arg("text"));
    py::class_<RunResult>(m, "RunResult")
        .def_readonly("image", &RunResult::image)
        .def_property_readonly("final_latent", [](const RunResult& r) { return r.final_latent.data; })
        .def_readonly("variants", &RunResult::variants)
        .def_readonly("groups", &RunResult::groups)
        .def_readonly("iou_per_step", &RunResult::iou_per_step)
        .def_readonly("metadata", &RunResult::metadata)
        .def_property_readonly("mean_iou", &RunResult::mean_iou)
        .def_property_readonly("losses", [](const RunResult& r) {
            std::vector<std::vector<double>> out;
            for (const auto& s : r.trace.steps) out.push_back(s.losses);
            return out;
        });
    m.def(
        "generate",
        [](const ComposeConfig& config, DenoiserBackend& backend, Method method, int steps, bool guidance_module,
           std::vector<double> merge_weights) {
            RunOptions o;
            o.method = method;
            o.steps = steps;
            o.guidance_module = guidance_module;
            o.merge_weights = std::move(merge_weights);
            ComposeConfig c = config;
            fill_toy_adapters(c);
            return generate(c, resolve_adapters(c, backend), backend, o);
        },
        py::arg("config"), py::arg("backend"), py::arg("method") = Method::CLoRA, py::arg("steps") = 50,
        py::arg("guidance_module") = true, py::arg("merge_weights") = std::vector<double>{});
    m.def("replay", &replay, py::arg("metadata"), py::arg("backend"));
    m.def(
        "run_benchmark",
        [](const std::string& manifest_json, const std::filesystem::path& out_dir, DenoiserBackend& backend,
           FeatureExtractor& extractor) {
            Manifest manifest = parse_manifest(manifest_json);
            manifest.output_dir = out_dir;
            return run_benchmark(manifest, backend, extractor).table;
        },
        py::arg("manifest_json"), py::arg("output_dir"), py::arg("backend"), py::arg("extractor"),
        "Runs a manifest and returns the aggregate table (CSV).");
}
