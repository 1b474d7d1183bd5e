// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/lora.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <regex>
#include <set>

#include "clora/errors.hpp"
#include "clora/log.hpp"
#include "clora/safetensors.hpp"

namespace clora {

void LoRALayerDelta::validate() const {
    require(down.rows() >= 1, ErrorKind::AdapterMismatch, layer_key + ": rank must be >= 1");
    require(up.cols() == down.rows(), ErrorKind::AdapterMismatch,
            layer_key + ": up has " + std::to_string(up.cols()) + " columns, down has " +
                std::to_string(down.rows()) + " rows");
    require(std::isfinite(alpha) && alpha > 0.0, ErrorKind::AdapterMismatch, layer_key + ": alpha must be > 0");
}

LoRASet LoRASet::single(AdapterPtr adapter, double weight) {
    LoRASet set;
    set.entries.push_back({std::move(adapter), weight});
    return set;
}

Matrix apply_delta(const Matrix& base, const LoRALayerDelta& delta, double scale) {
    delta.validate();
    require(delta.up.rows() == base.rows() && delta.down.cols() == base.cols(), ErrorKind::AdapterMismatch,
            delta.layer_key + ": delta is " + std::to_string(delta.up.rows()) + "x" +
                std::to_string(delta.down.cols()) + ", base weight is " + std::to_string(base.rows()) + "x" +
                std::to_string(base.cols()));
    const double coef = scale * (delta.alpha / static_cast<double>(delta.rank()));
    const Matrix scaled_up = coef * delta.up;
    return base + scaled_up * delta.down;
}

namespace {

void merge_layers(const std::vector<std::pair<const std::map<std::string, LoRALayerDelta>*, double>>& sources,
                  std::map<std::string, LoRALayerDelta>& out) {
    std::set<std::string> keys;
    for (const auto& [layers, w] : sources) {
        for (const auto& [key, _] : *layers) {
            keys.insert(key);
        }
    }
    for (const auto& key : keys) {
        std::vector<Matrix> ups;
        std::vector<Matrix> downs;
        Eigen::Index total_rank = 0;
        Eigen::Index d_out = -1;
        Eigen::Index d_in = -1;
        for (const auto& [layers, w] : sources) {
            auto it = layers->find(key);
            if (it == layers->end()) {
                continue;
            }
            const LoRALayerDelta& d = it->second;
            d.validate();
            if (d_out < 0) {
                d_out = d.up.rows();
                d_in = d.down.cols();
            }
            require(d.up.rows() == d_out && d.down.cols() == d_in, ErrorKind::AdapterMismatch,
                    key + ": adapters disagree on layer shape");
            const double coef = w * (d.alpha / static_cast<double>(d.rank()));
            ups.push_back(coef * d.up);
            downs.push_back(d.down);
            total_rank += d.rank();
        }
        if (ups.empty()) {
            continue;
        }
        LoRALayerDelta merged;
        merged.layer_key = key;
        merged.up.resize(d_out, total_rank);
        merged.down.resize(total_rank, d_in);
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < ups.size(); ++i) {
            const Eigen::Index r = ups[i].cols();
            merged.up.middleCols(at, r) = ups[i];
            merged.down.middleRows(at, r) = downs[i];
            at += r;
        }
        merged.alpha = static_cast<double>(total_rank);
        out.emplace(key, std::move(merged));
    }
}

}  // namespace

LoRAAdapter weighted_merge(const LoRASet& set) {
    LoRAAdapter merged;
    merged.lora_id = "merge(";
    std::vector<std::pair<const std::map<std::string, LoRALayerDelta>*, double>> unet;
    std::vector<std::pair<const std::map<std::string, LoRALayerDelta>*, double>> text;
    bool first = true;
    for (const auto& entry : set.entries) {
        require(entry.adapter != nullptr, ErrorKind::ContractViolation, "null adapter in LoRA set");
        require(std::isfinite(entry.weight), ErrorKind::ContractViolation, "non-finite LoRA weight");
        merged.lora_id += (first ? "" : ",") + entry.adapter->lora_id;
        if (!entry.adapter->trigger.empty()) {
            merged.trigger += (merged.trigger.empty() ? "" : " ") + entry.adapter->trigger;
        }
        first = false;
        if (entry.weight == 0.0) {
            continue;
        }
        unet.emplace_back(&entry.adapter->deltas, entry.weight);
        text.emplace_back(&entry.adapter->text_encoder_deltas, entry.weight);
    }
    merged.lora_id += ")";
    merge_layers(unet, merged.deltas);
    merge_layers(text, merged.text_encoder_deltas);
    return merged;
}

namespace {

constexpr const char* kUnetPrefix = "lora_unet_";
constexpr const char* kTextPrefix = "lora_te_";

Matrix to_matrix(const safetensors::TensorData& t, const std::string& name) {
    std::vector<std::int64_t> shape = t.shape;
    // 1x1 convolution kernels carry trailing unit dimensions.
    while (shape.size() > 2 && shape.back() == 1) {
        shape.pop_back();
    }
    require(shape.size() == 2, ErrorKind::UnsupportedFormat, name + ": expected a 2-D tensor");
    Matrix m(shape[0], shape[1]);
    for (std::int64_t r = 0; r < shape[0]; ++r) {
        for (std::int64_t c = 0; c < shape[1]; ++c) {
            m(r, c) = t.values[static_cast<std::size_t>(r * shape[1] + c)];
        }
    }
    return m;
}

safetensors::TensorData from_matrix(const Matrix& m) {
    safetensors::TensorData t;
    t.dtype = safetensors::DType::F64;
    t.shape = {m.rows(), m.cols()};
    t.values.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            t.values[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        }
    }
    return t;
}

struct PendingLayer {
    std::optional<Matrix> down;
    std::optional<Matrix> up;
    std::optional<double> alpha;
};

std::string flatten_key(std::string key) {
    std::replace(key.begin(), key.end(), '.', '_');
    return key;
}

}  // namespace

LoRAAdapter load_adapter(const std::filesystem::path& path) {
    const safetensors::File file = safetensors::read(path);

    static const std::regex kohya(R"(^lora_(unet|te\d*)_(.+)\.(lora_down\.weight|lora_up\.weight|alpha)$)");
    static const std::regex peft(R"(^(unet|text_encoder)\.(.+)\.(lora_A\.weight|lora_B\.weight)$)");

    std::map<std::string, PendingLayer> unet;
    std::map<std::string, PendingLayer> text;
    for (const auto& [name, tensor] : file.tensors) {
        std::smatch m;
        bool is_text = false;
        std::string layer;
        std::string part;
        if (std::regex_match(name, m, kohya)) {
            is_text = m[1].str() != "unet";
            layer = m[2].str();
            part = m[3].str();
        } else if (std::regex_match(name, m, peft)) {
            is_text = m[1].str() == "text_encoder";
            layer = flatten_key(m[2].str());
            part = m[3].str() == "lora_A.weight" ? "lora_down.weight" : "lora_up.weight";
        } else {
            throw Error(ErrorKind::UnsupportedFormat, "unrecognised tensor key '" + name + "'");
        }
        PendingLayer& pending = (is_text ? text : unet)[layer];
        if (part == "alpha") {
            require(tensor.values.size() == 1, ErrorKind::UnsupportedFormat, name + ": alpha must be a scalar");
            pending.alpha = tensor.values[0];
        } else if (part == "lora_down.weight") {
            pending.down = to_matrix(tensor, name);
        } else {
            pending.up = to_matrix(tensor, name);
        }
    }

    auto finish = [&](std::map<std::string, PendingLayer>& pending_layers,
                      std::map<std::string, LoRALayerDelta>& out) {
        for (auto& [layer, pending] : pending_layers) {
            require(pending.down.has_value() && pending.up.has_value(), ErrorKind::UnsupportedFormat,
                    layer + ": missing down or up projection");
            LoRALayerDelta delta;
            delta.layer_key = layer;
            delta.down = std::move(*pending.down);
            delta.up = std::move(*pending.up);
            if (pending.alpha) {
                delta.alpha = *pending.alpha;
            } else {
                delta.alpha = static_cast<double>(delta.rank());
                warn(path.filename().string() + ": no alpha for " + layer + ", using alpha = rank");
            }
            delta.validate();
            out.emplace(layer, std::move(delta));
        }
    };

    LoRAAdapter adapter;
    finish(unet, adapter.deltas);
    finish(text, adapter.text_encoder_deltas);
    if (auto it = file.metadata.find("lora_id"); it != file.metadata.end()) {
        adapter.lora_id = it->second;
    } else {
        adapter.lora_id = path.stem().string();
    }
    if (auto it = file.metadata.find("trigger"); it != file.metadata.end()) {
        adapter.trigger = it->second;
    }
    return adapter;
}

void save_adapter(const LoRAAdapter& adapter, const std::filesystem::path& path) {
    safetensors::File file;
    file.metadata["lora_id"] = adapter.lora_id;
    file.metadata["trigger"] = adapter.trigger;
    auto emit = [&](const std::map<std::string, LoRALayerDelta>& layers, const char* prefix) {
        for (const auto& [key, delta] : layers) {
            delta.validate();
            require(key.find('.') == std::string::npos, ErrorKind::UnsupportedFormat,
                    "layer key '" + key + "' must not contain '.'");
            const std::string base = prefix + key;
            file.tensors[base + ".lora_down.weight"] = from_matrix(delta.down);
            file.tensors[base + ".lora_up.weight"] = from_matrix(delta.up);
            safetensors::TensorData alpha;
            alpha.dtype = safetensors::DType::F64;
            alpha.values = {delta.alpha};
            file.tensors[base + ".alpha"] = std::move(alpha);
        }
    };
    emit(adapter.deltas, kUnetPrefix);
    emit(adapter.text_encoder_deltas, kTextPrefix);
    safetensors::write(file, path);
}

}  // namespace clora
