// Copyright (C) 2026 The clora-compose Authors
// SPDX-License-Identifier: Apache-2.0

#include "clora/toy_backend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "clora/errors.hpp"

namespace clora {

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

std::string block_key(int block, const char* name) {
    return "block" + std::to_string(block) + "_" + name;
}

// Weights of one forward pass, after LoRA patching, in the compute precision.
template <typename S>
struct Weights {
    struct Block {
        Mat<S> to_q, to_k, to_v, to_out, mlp_in, mlp_out;
        Row<S> mlp_bias;
    };
    Mat<S> in_proj;
    Row<S> in_shift;  // input bias + time embedding
    Mat<S> positional;
    std::vector<Block> blocks;
    Mat<S> out_proj;
    Row<S> out_bias;
    int heads = 1;
    S eps_scale = 0;
};

template <typename S>
struct BlockCache {
    Mat<S> input;
    Mat<S> queries;
    Mat<S> keys;
    Mat<S> values;
    std::vector<Mat<S>> attention;  // per head, pixels x tokens
    Mat<S> hidden;                  // after attention residual
    Mat<S> activation;              // tanh(mlp_in)
};

template <typename S>
struct ForwardPass {
    Mat<S> input;  // pixels x channels
    std::vector<BlockCache<S>> blocks;
    Mat<S> eps;  // pixels x channels
};

template <typename S>
void softmax_rows(Mat<S>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const S peak = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - peak).exp();
        m.row(r) /= m.row(r).sum();
    }
}

template <typename S>
ForwardPass<S> run_forward(const Weights<S>& w, const Mat<S>& x, const Mat<S>& text) {
    ForwardPass<S> fwd;
    fwd.input = x;
    Mat<S> h = x * w.in_proj.transpose() + w.positional;
    h.rowwise() += w.in_shift;

    const Eigen::Index dim = w.in_proj.rows();
    const Eigen::Index head_dim = dim / w.heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));

    for (const auto& b : w.blocks) {
        BlockCache<S> cache;
        cache.input = h;
        cache.queries = h * b.to_q.transpose();
        cache.keys = text * b.to_k.transpose();
        cache.values = text * b.to_v.transpose();
        Mat<S> mixed(h.rows(), dim);
        for (int head = 0; head < w.heads; ++head) {
            const Eigen::Index c0 = head * head_dim;
            Mat<S> scores = (cache.queries.middleCols(c0, head_dim) *
                             cache.keys.middleCols(c0, head_dim).transpose()) * inv_sqrt;
            softmax_rows(scores);
            mixed.middleCols(c0, head_dim) = scores * cache.values.middleCols(c0, head_dim);
            cache.attention.push_back(std::move(scores));
        }
        cache.hidden = h + mixed * b.to_out.transpose();
        Mat<S> pre = cache.hidden * b.mlp_in.transpose();
        pre.rowwise() += b.mlp_bias;
        cache.activation = pre.array().tanh().matrix();
        h = cache.hidden + cache.activation * b.mlp_out.transpose();
        fwd.blocks.push_back(std::move(cache));
    }

    Mat<S> net = h * w.out_proj.transpose();
    net.rowwise() += w.out_bias;
    fwd.eps = x + w.eps_scale * net;
    return fwd;
}

// Reverse pass for an objective that depends only on the head-averaged attention
// of each block: d_records[b] is dL/d(mean_h attention of block b).
template <typename S>
Mat<S> run_backward(const Weights<S>& w, const ForwardPass<S>& fwd, const std::vector<Mat<S>>& d_records) {
    const Eigen::Index dim = w.in_proj.rows();
    const Eigen::Index head_dim = dim / w.heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
    const S head_share = S(1) / static_cast<S>(w.heads);

    Mat<S> d_h = Mat<S>::Zero(fwd.input.rows(), dim);
    for (std::size_t bi = fwd.blocks.size(); bi-- > 0;) {
        const auto& b = w.blocks[bi];
        const auto& cache = fwd.blocks[bi];

        // h_out = hidden + tanh(hidden W1^T + b1) W2^T
        const Mat<S> d_act = d_h * b.mlp_out;
        const Mat<S> d_pre = (d_act.array() * (S(1) - cache.activation.array().square())).matrix();
        Mat<S> d_hidden = d_h + d_pre * b.mlp_in;

        // hidden = input + mixed Wo^T
        const Mat<S> d_mixed = d_hidden * b.to_out;
        Mat<S> d_input = d_hidden;
        Mat<S> d_queries(cache.queries.rows(), dim);
        for (int head = 0; head < w.heads; ++head) {
            const Eigen::Index c0 = head * head_dim;
            const Mat<S>& attn = cache.attention[static_cast<std::size_t>(head)];
            Mat<S> d_attn = d_mixed.middleCols(c0, head_dim) * cache.values.middleCols(c0, head_dim).transpose();
            d_attn += head_share * d_records[bi];
            const auto row_dot = (d_attn.array() * attn.array()).rowwise().sum();
            const Mat<S> d_scores = (attn.array() * (d_attn.array().colwise() - row_dot)).matrix();
            d_queries.middleCols(c0, head_dim) = d_scores * cache.keys.middleCols(c0, head_dim) * inv_sqrt;
        }
        d_input += d_queries * b.to_q;
        d_h = std::move(d_input);
    }
    return d_h * w.in_proj;
}

Row<double> timestep_features(int timestep, int count) {
    Row<double> f(count);
    const int half = count / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
        f(k) = std::sin(timestep * freq);
        f(half + k) = std::cos(timestep * freq);
    }
    return f;
}

template <typename S>
Mat<S> cast(const Matrix& m) {
    return m.template cast<S>();
}

template <typename S>
Weights<S> build_weights(const std::map<std::string, Matrix>& unet, const ToyConfig& cfg, const Vector& in_bias,
                         const Matrix& time_proj, const Matrix& positional, const std::vector<Vector>& mlp_bias,
                         const Vector& out_bias, int timestep) {
    Weights<S> w;
    w.heads = cfg.heads;
    w.eps_scale = static_cast<S>(cfg.eps_scale);
    w.in_proj = cast<S>(unet.at("in_proj"));
    const Row<double> shift = in_bias.transpose() + timestep_features(timestep, static_cast<int>(time_proj.cols())) *
                                                         time_proj.transpose();
    w.in_shift = shift.cast<S>();
    w.positional = cast<S>(positional);
    for (int b = 0; b < cfg.blocks; ++b) {
        typename Weights<S>::Block blk;
        blk.to_q = cast<S>(unet.at(block_key(b, "to_q")));
        blk.to_k = cast<S>(unet.at(block_key(b, "to_k")));
        blk.to_v = cast<S>(unet.at(block_key(b, "to_v")));
        blk.to_out = cast<S>(unet.at(block_key(b, "to_out")));
        blk.mlp_in = cast<S>(unet.at(block_key(b, "mlp_in")));
        blk.mlp_out = cast<S>(unet.at(block_key(b, "mlp_out")));
        blk.mlp_bias = mlp_bias[static_cast<std::size_t>(b)].transpose().cast<S>();
        w.blocks.push_back(std::move(blk));
    }
    w.out_proj = cast<S>(unet.at("out_proj"));
    w.out_bias = out_bias.transpose().cast<S>();
    return w;
}

template <typename S>
std::vector<AttentionRecord> records_from(const ForwardPass<S>& fwd, const ToyConfig& cfg) {
    std::vector<AttentionRecord> records;
    for (std::size_t b = 0; b < fwd.blocks.size(); ++b) {
        const auto& heads = fwd.blocks[b].attention;
        Mat<S> mean = heads.front();
        for (std::size_t h = 1; h < heads.size(); ++h) {
            mean += heads[h];
        }
        mean /= static_cast<S>(heads.size());
        AttentionRecord rec;
        rec.layer_id = block_key(static_cast<int>(b), "attn");
        rec.head_count = static_cast<int>(heads.size());
        rec.height = cfg.height;
        rec.width = cfg.width;
        rec.map = mean.template cast<double>();
        records.push_back(std::move(rec));
    }
    return records;
}

void check_finite(const Matrix& m, const char* what) {
    require(m.allFinite(), ErrorKind::NumericalFailure, std::string("non-finite values in ") + what);
}

Matrix gaussian(std::uint64_t seed, std::string_view key, Eigen::Index rows, Eigen::Index cols, double scale) {
    GaussianSource source(mix_seed(seed, fnv1a64(key)));
    return source.matrix(rows, cols, scale);
}

bool in_quadrant(Quadrant q, int x, int y, int width, int height) {
    const bool west = 2 * x < width;
    const bool north = 2 * y < height;
    switch (q) {
    case Quadrant::NW: return north && west;
    case Quadrant::NE: return north && !west;
    case Quadrant::SW: return !north && west;
    case Quadrant::SE: return !north && !west;
    case Quadrant::Global: return true;
    }
    return false;
}

}  // namespace

ToyBackend::ToyBackend(ToyConfig config) : config_(config), tokenizer_(config.max_tokens) {
    require(config_.model_dim % config_.heads == 0, ErrorKind::InvalidSpec, "model_dim must divide by heads");
    require(config_.blocks >= 1 && config_.channels >= 1 && config_.height >= 1 && config_.width >= 1,
            ErrorKind::InvalidSpec, "toy backend dimensions must be positive");
    info_.name = "toy";
    info_.latent_channels = config_.channels;
    info_.latent_height = config_.height;
    info_.latent_width = config_.width;
    info_.capture_height = 16;
    info_.capture_width = 16;
    info_.default_cfg_scale = 1.0;

    const auto d = static_cast<Eigen::Index>(config_.model_dim);
    const auto dt = static_cast<Eigen::Index>(config_.text_dim);
    const auto f = static_cast<Eigen::Index>(config_.mlp_dim);
    const auto c = static_cast<Eigen::Index>(config_.channels);
    const std::uint64_t seed = config_.seed;
    auto inv_sqrt = [](Eigen::Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    text_proj_ = gaussian(seed, "proj", dt, dt, inv_sqrt(dt));
    unet_["in_proj"] = gaussian(seed, "in_proj", d, c, inv_sqrt(c));
    in_bias_ = gaussian(seed, "in_bias", d, 1, 0.1);
    constexpr int kTimeFeatures = 16;
    time_proj_ = gaussian(seed, "time_proj", d, kTimeFeatures, 0.3 * inv_sqrt(kTimeFeatures));
    for (int b = 0; b < config_.blocks; ++b) {
        unet_[block_key(b, "to_q")] = gaussian(seed, block_key(b, "to_q"), d, d, 1.5 * inv_sqrt(d));
        unet_[block_key(b, "to_k")] = gaussian(seed, block_key(b, "to_k"), d, dt, 1.5 * inv_sqrt(dt));
        unet_[block_key(b, "to_v")] = gaussian(seed, block_key(b, "to_v"), d, dt, inv_sqrt(dt));
        unet_[block_key(b, "to_out")] = gaussian(seed, block_key(b, "to_out"), d, d, 0.5 * inv_sqrt(d));
        unet_[block_key(b, "mlp_in")] = gaussian(seed, block_key(b, "mlp_in"), f, d, inv_sqrt(d));
        unet_[block_key(b, "mlp_out")] = gaussian(seed, block_key(b, "mlp_out"), d, f, 0.5 * inv_sqrt(f));
        mlp_bias_.push_back(gaussian(seed, block_key(b, "mlp_bias"), f, 1, 0.1));
    }
    unet_["out_proj"] = gaussian(seed, "out_proj", c, d, inv_sqrt(d));
    out_bias_ = gaussian(seed, "out_bias", c, 1, 0.1);

    // Fixed 2-D positional features projected into the model width.
    constexpr int kPosFeatures = 15;
    const Matrix pos_proj = gaussian(seed, "pos_proj", d, kPosFeatures, 1.0);
    const int pixels = config_.height * config_.width;
    Matrix features(pixels, kPosFeatures);
    for (int y = 0; y < config_.height; ++y) {
        for (int x = 0; x < config_.width; ++x) {
            const double u = (x + 0.5) / config_.width - 0.5;
            const double v = (y + 0.5) / config_.height - 0.5;
            auto row = features.row(y * config_.width + x);
            row(0) = 2.0 * u;
            row(1) = 2.0 * v;
            row(2) = 4.0 * u * v;
            for (int k = 1; k <= 3; ++k) {
                const double w = std::numbers::pi * k;
                row(3 + 4 * (k - 1)) = std::sin(w * u);
                row(4 + 4 * (k - 1)) = std::cos(w * u);
                row(5 + 4 * (k - 1)) = std::sin(w * v);
                row(6 + 4 * (k - 1)) = std::cos(w * v);
            }
        }
    }
    positional_ = features * pos_proj.transpose() * inv_sqrt(kPosFeatures);
}

Vector ToyBackend::token_embedding(std::uint64_t id) const {
    GaussianSource source(mix_seed(config_.seed ^ 0x7E47EAB1ULL, id));
    return source.matrix(config_.text_dim, 1, 1.0).col(0);
}

Matrix ToyBackend::patched_text_proj(const LoRASet& loras) const {
    Matrix w = text_proj_;
    for (const auto& entry : loras.entries) {
        for (const auto& [key, delta] : entry.adapter->text_encoder_deltas) {
            require(key == "proj", ErrorKind::AdapterMismatch,
                    "adapter '" + entry.adapter->lora_id + "' targets unknown text-encoder layer '" + key + "'");
            w = apply_delta(w, delta, entry.weight);
        }
    }
    return w;
}

std::map<std::string, Matrix> ToyBackend::patched_unet(const LoRASet& loras) const {
    std::map<std::string, Matrix> weights = unet_;
    for (const auto& entry : loras.entries) {
        require(entry.adapter != nullptr, ErrorKind::ContractViolation, "null adapter in LoRA set");
        for (const auto& [key, delta] : entry.adapter->deltas) {
            auto it = weights.find(key);
            require(it != weights.end(), ErrorKind::AdapterMismatch,
                    "adapter '" + entry.adapter->lora_id + "' targets unknown layer '" + key + "'");
            it->second = apply_delta(it->second, delta, entry.weight);
        }
    }
    return weights;
}

void ToyBackend::check_latent(const LatentState& z) const {
    require(z.data.rows() == config_.channels && z.height == config_.height && z.width == config_.width &&
                z.data.cols() == static_cast<Eigen::Index>(config_.height) * config_.width,
            ErrorKind::ContractViolation, "latent shape does not match the toy backend");
}

PromptEmbedding ToyBackend::encode_text(std::string_view text, const LoRASet& loras) {
    const Tokenization tok = tokenizer_.tokenize(text);
    Matrix raw(static_cast<Eigen::Index>(tok.size()), config_.text_dim);
    for (std::size_t i = 0; i < tok.size(); ++i) {
        raw.row(static_cast<Eigen::Index>(i)) = token_embedding(tok.tokens[i].id).transpose();
    }
    PromptEmbedding e;
    bool patched = false;
    std::string patched_by;
    for (const auto& entry : loras.entries) {
        if (!entry.adapter->text_encoder_deltas.empty()) {
            patched_by += (patched ? "," : "") + entry.adapter->lora_id;
            patched = true;
        }
    }
    e.data = raw * patched_text_proj(loras).transpose();
    if (patched) {
        e.encoder_lora = patched_by;
    }
    return e;
}

namespace {

template <typename S>
StepOutput denoise_impl(const Weights<S>& w, const LatentState& z, const PromptEmbedding& e, const ToyConfig& cfg,
                        bool capture) {
    const Mat<S> x = z.data.transpose().cast<S>();
    const ForwardPass<S> fwd = run_forward<S>(w, x, e.data.cast<S>());
    StepOutput out;
    out.noise_prediction = fwd.eps.transpose().template cast<double>();
    check_finite(out.noise_prediction, "noise prediction");
    if (capture) {
        out.records = records_from(fwd, cfg);
        for (const auto& r : out.records) {
            check_finite(r.map, "attention");
        }
    }
    return out;
}

template <typename S>
LatentGradient grad_impl(const std::vector<Weights<S>>& weights, const LatentState& z,
                         std::span<const Conditioning> branches, const AttentionObjective& objective,
                         const ToyConfig& cfg) {
    const Mat<S> x = z.data.transpose().cast<S>();
    std::vector<ForwardPass<S>> passes;
    std::vector<std::vector<AttentionRecord>> records;
    LatentGradient result;
    for (std::size_t i = 0; i < branches.size(); ++i) {
        passes.push_back(run_forward<S>(weights[i], x, branches[i].embedding->data.cast<S>()));
        StepOutput out;
        out.noise_prediction = passes.back().eps.transpose().template cast<double>();
        check_finite(out.noise_prediction, "noise prediction");
        out.records = records_from(passes.back(), cfg);
        records.push_back(out.records);
        result.outputs.push_back(std::move(out));
    }

    std::vector<std::vector<Matrix>> grads(branches.size());
    result.loss = objective(records, grads);
    require(std::isfinite(result.loss), ErrorKind::NumericalFailure, "objective returned a non-finite value");
    require(grads.size() == branches.size(), ErrorKind::ContractViolation,
            "objective must return one gradient list per branch");

    Matrix total = Matrix::Zero(z.data.rows(), z.data.cols());
    for (std::size_t i = 0; i < branches.size(); ++i) {
        require(grads[i].size() == records[i].size(), ErrorKind::ContractViolation,
                "objective must return one gradient per attention record");
        std::vector<Mat<S>> d_records;
        for (std::size_t r = 0; r < records[i].size(); ++r) {
            require(grads[i][r].rows() == records[i][r].map.rows() && grads[i][r].cols() == records[i][r].map.cols(),
                    ErrorKind::ContractViolation, "attention gradient shape mismatch");
            d_records.push_back(grads[i][r].cast<S>());
        }
        const Mat<S> dx = run_backward(weights[i], passes[i], d_records);
        total += dx.transpose().template cast<double>();
    }
    check_finite(total, "latent gradient");
    result.grad = std::move(total);
    return result;
}

}  // namespace

StepOutput ToyBackend::denoise_step(const LatentState& z, const PromptEmbedding& embedding, const LoRASet& loras,
                                    bool capture) {
    check_latent(z);
    require(embedding.data.cols() == config_.text_dim, ErrorKind::ContractViolation, "embedding width mismatch");
    const auto unet = patched_unet(loras);
    if (config_.precision == Precision::Float64) {
        const auto w = build_weights<double>(unet, config_, in_bias_, time_proj_, positional_, mlp_bias_, out_bias_,
                                             z.timestep);
        return denoise_impl(w, z, embedding, config_, capture);
    }
    const auto w = build_weights<float>(unet, config_, in_bias_, time_proj_, positional_, mlp_bias_, out_bias_,
                                        z.timestep);
    return denoise_impl(w, z, embedding, config_, capture);
}

LatentGradient ToyBackend::grad_wrt_latent(const LatentState& z, std::span<const Conditioning> branches,
                                           const AttentionObjective& objective) {
    check_latent(z);
    require(!branches.empty(), ErrorKind::ContractViolation, "no branches to differentiate");
    for (const auto& b : branches) {
        require(b.embedding != nullptr && b.loras != nullptr, ErrorKind::ContractViolation, "incomplete branch");
        require(b.embedding->data.cols() == config_.text_dim, ErrorKind::ContractViolation,
                "embedding width mismatch");
    }
    auto run = [&]<typename S>() {
        std::vector<Weights<S>> weights;
        for (const auto& b : branches) {
            weights.push_back(build_weights<S>(patched_unet(*b.loras), config_, in_bias_, time_proj_, positional_,
                                               mlp_bias_, out_bias_, z.timestep));
        }
        return grad_impl<S>(weights, z, branches, objective, config_);
    };
    if (config_.precision == Precision::Float64) {
        return run.template operator()<double>();
    }
    return run.template operator()<float>();
}

std::vector<Matrix> ToyBackend::block_queries(const LatentState& z, const PromptEmbedding& embedding) {
    check_latent(z);
    const auto w = build_weights<double>(unet_, config_, in_bias_, time_proj_, positional_, mlp_bias_, out_bias_,
                                         z.timestep);
    const ForwardPass<double> fwd = run_forward(w, Mat<double>(z.data.transpose()), embedding.data);
    std::vector<Matrix> queries;
    for (const auto& b : fwd.blocks) {
        queries.push_back(b.queries);
    }
    return queries;
}

Image ToyBackend::decode(const LatentState& z) {
    check_latent(z);
    Image image;
    image.width = z.width;
    image.height = z.height;
    image.channels = 1;
    image.pixels.resize(static_cast<std::size_t>(z.pixels()));
    const Eigen::RowVectorXd gray = z.data.colwise().mean();
    for (int p = 0; p < z.pixels(); ++p) {
        const double level = 127.5 * (std::tanh(gray(p)) + 1.0);
        image.pixels[static_cast<std::size_t>(p)] =
            static_cast<std::uint8_t>(std::clamp<long>(std::lround(level), 0, 255));
    }
    return image;
}

Quadrant parse_quadrant(std::string_view name) {
    if (name == "NW" || name == "nw") return Quadrant::NW;
    if (name == "NE" || name == "ne") return Quadrant::NE;
    if (name == "SW" || name == "sw") return Quadrant::SW;
    if (name == "SE" || name == "se") return Quadrant::SE;
    if (name == "global" || name == "GLOBAL") return Quadrant::Global;
    throw Error(ErrorKind::InvalidSpec, "unknown quadrant '" + std::string(name) + "'");
}

std::string_view to_string(Quadrant q) {
    switch (q) {
    case Quadrant::NW: return "NW";
    case Quadrant::NE: return "NE";
    case Quadrant::SW: return "SW";
    case Quadrant::SE: return "SE";
    case Quadrant::Global: return "global";
    }
    return "?";
}

LoRAAdapter synth_toy_adapter(ToyBackend& backend, std::uint64_t seed, const ToyAdapterSpec& spec) {
    const ToyConfig& cfg = backend.config();
    const auto trigger_tokens = backend.tokenizer().split(spec.trigger);
    require(trigger_tokens.size() == 1, ErrorKind::InvalidSpec,
            "toy adapter trigger must be a single token: '" + spec.trigger + "'");

    LoRAAdapter adapter;
    adapter.lora_id = spec.lora_id;
    adapter.trigger = spec.trigger;

    const Vector raw = backend.token_embedding(trigger_tokens.front().id);
    const Vector encoded = backend.text_projection() * raw;
    const Matrix key_down = encoded.transpose() / encoded.squaredNorm();
    GaussianSource source(mix_seed(seed, fnv1a64(spec.lora_id)));

    if (spec.text_encoder) {
        LoRALayerDelta te;
        te.layer_key = "proj";
        te.down = raw.transpose() / raw.squaredNorm();
        te.up = source.matrix(cfg.text_dim, 1, 0.5 / std::sqrt(static_cast<double>(cfg.text_dim)));
        te.alpha = 1.0;
        adapter.text_encoder_deltas.emplace(te.layer_key, std::move(te));
    }

    // Query directions from a zero latent at a mid-schedule timestep.
    LatentState probe;
    probe.data = Matrix::Zero(cfg.channels, static_cast<Eigen::Index>(cfg.height) * cfg.width);
    probe.height = cfg.height;
    probe.width = cfg.width;
    probe.timestep = 500;
    const PromptEmbedding empty = backend.encode_text("", LoRASet{});
    const auto queries = backend.block_queries(probe, empty);
    const double head_scale = std::sqrt(static_cast<double>(cfg.model_dim / cfg.heads));

    for (int b = 0; b < cfg.blocks; ++b) {
        const Matrix& q = queries[static_cast<std::size_t>(b)];
        if (spec.quadrant != Quadrant::Global) {
            Vector inside = Vector::Zero(q.cols());
            int count = 0;
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    if (in_quadrant(spec.quadrant, x, y, cfg.width, cfg.height)) {
                        inside += q.row(y * cfg.width + x).transpose();
                        ++count;
                    }
                }
            }
            const Vector mean_all = q.colwise().mean().transpose();
            Vector direction = inside / count - mean_all;
            direction.normalize();
            const Vector proj = q * direction;
            const double spread = std::sqrt((proj.array() - proj.mean()).square().mean());
            LoRALayerDelta key;
            key.layer_key = "block" + std::to_string(b) + "_to_k";
            key.down = key_down;
            key.up = direction * (spec.strength * head_scale / spread);
            key.alpha = 1.0;
            adapter.deltas.emplace(key.layer_key, std::move(key));
        }

        LoRALayerDelta value;
        value.layer_key = "block" + std::to_string(b) + "_to_v";
        value.down = key_down;
        Vector look = source.matrix(cfg.model_dim, 1, 1.0).col(0);
        value.up = look.normalized() * spec.appearance * std::sqrt(static_cast<double>(cfg.model_dim));
        value.alpha = 1.0;
        adapter.deltas.emplace(value.layer_key, std::move(value));

        if (spec.quadrant == Quadrant::Global) {
            // Prompt-independent shift of every pixel: the toy notion of a style.
            LoRALayerDelta style;
            style.layer_key = "block" + std::to_string(b) + "_mlp_out";
            style.up = source.matrix(cfg.model_dim, 1, spec.appearance / std::sqrt(static_cast<double>(cfg.model_dim)));
            style.down = source.matrix(1, cfg.mlp_dim, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_dim)));
            style.alpha = 1.0;
            adapter.deltas.emplace(style.layer_key, std::move(style));
        }
    }
    return adapter;
}

std::array<double, 4> probe_quadrant_mass(ToyBackend& backend, const LoRAAdapter& adapter, std::string_view prompt,
                                          std::uint64_t probe_seed) {
    const ToyConfig& cfg = backend.config();
    const LoRASet set = LoRASet::single(std::make_shared<const LoRAAdapter>(adapter));
    const PromptEmbedding e = backend.encode_text(prompt, set);
    const Tokenization tok = backend.tokenizer().tokenize(prompt);
    int trigger_index = -1;
    for (std::size_t i = 0; i < tok.size(); ++i) {
        if (!tok.tokens[i].special && tok.tokens[i].text == adapter.trigger) {
            trigger_index = static_cast<int>(i);
            break;
        }
    }
    require(trigger_index >= 0, ErrorKind::SpanNotFound, "probe prompt lacks the adapter trigger");

    LatentState z = random_latent(probe_seed, cfg.channels, cfg.height, cfg.width);
    z.timestep = 500;
    const StepOutput out = backend.denoise_step(z, e, set, true);
    std::array<double, 4> mass{};
    const Quadrant order[4] = {Quadrant::NW, Quadrant::NE, Quadrant::SW, Quadrant::SE};
    for (const auto& rec : out.records) {
        for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
                for (int k = 0; k < 4; ++k) {
                    if (in_quadrant(order[k], x, y, cfg.width, cfg.height)) {
                        mass[static_cast<std::size_t>(k)] += rec.map(y * cfg.width + x, trigger_index);
                    }
                }
            }
        }
    }
    for (double& m : mass) {
        m /= static_cast<double>(out.records.size());
    }
    return mass;
}

}  // namespace clora
