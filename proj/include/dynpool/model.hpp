#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dynpool/blocks.hpp"
#include "dynpool/ctc.hpp"
#include "dynpool/dynamic_pooling.hpp"
#include "dynpool/rna.hpp"

// Declarative sequence-to-sequence models: an ordered list of layers (plain convolution, dynamic
// pooling, residual block) followed by a pointwise head feeding a CTC or aligner output layer.

namespace dynpool {

enum class Decoder { ctc, rna };

struct LayerConfig {
    std::string type;  // "conv", "dynpool" or "block"
    std::string name;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t kernel = 9;
    std::size_t stride = 1;
    // block
    std::size_t repeats = 1;
    Activation activation = Activation::swish;
    S2DStyle s2d = S2DStyle::none;
    bool cross_shift = false;
    bool skip = true;
    // dynpool
    DynPoolLayerSpec pool{};

    friend bool operator==(const LayerConfig& a, const LayerConfig& b) {
        return nlohmann::json(a) == nlohmann::json(b);
    }

    friend void to_json(nlohmann::json& j, const LayerConfig& l) {
        j = {{"type", l.type}, {"name", l.name}, {"c_in", l.c_in}, {"c_out", l.c_out}, {"kernel", l.kernel}};
        if (l.type == "conv") {
            j["stride"] = l.stride;
        } else if (l.type == "block") {
            j["repeats"] = l.repeats;
            j["activation"] = l.activation == Activation::glu ? "glu" : "swish";
            j["s2d"] = l.s2d == S2DStyle::heron ? "heron" : l.s2d == S2DStyle::osprey ? "osprey" : "none";
            j["cross_shift"] = l.cross_shift;
            j["skip"] = l.skip;
        } else if (l.type == "dynpool") {
            const auto& p = l.pool;
            j["move_net"] = p.move_net == MoveNet::conv3 ? "conv3" : "pointwise";
            j["move_hidden"] = p.move_hidden;
            j["move_kernel"] = p.move_kernel;
            j["feature_sigmoid"] = p.feature_sigmoid;
            j["target_factor"] = p.options.target_factor;
            j["ema_momentum"] = p.options.ema_momentum;
            j["trunc_window"] = p.options.trunc_window;
            j["detach_mean"] = p.options.detach_mean;
        }
    }

    friend void from_json(const nlohmann::json& j, LayerConfig& l) {
        l = LayerConfig{};
        l.type = j.at("type").get<std::string>();
        l.name = j.at("name").get<std::string>();
        l.c_in = j.at("c_in").get<std::size_t>();
        l.c_out = j.at("c_out").get<std::size_t>();
        l.kernel = j.value("kernel", l.kernel);
        if (l.type == "conv") {
            l.stride = j.value("stride", l.stride);
        } else if (l.type == "block") {
            l.repeats = j.value("repeats", l.repeats);
            const auto act = j.value("activation", std::string("swish"));
            if (act != "swish" && act != "glu") throw std::invalid_argument("layer " + l.name + ": unknown activation " + act);
            l.activation = act == "glu" ? Activation::glu : Activation::swish;
            const auto s2d = j.value("s2d", std::string("none"));
            if (s2d == "heron") l.s2d = S2DStyle::heron;
            else if (s2d == "osprey") l.s2d = S2DStyle::osprey;
            else if (s2d != "none") throw std::invalid_argument("layer " + l.name + ": unknown s2d style " + s2d);
            l.cross_shift = j.value("cross_shift", false);
            l.skip = j.value("skip", true);
        } else if (l.type == "dynpool") {
            auto& p = l.pool;
            const auto mn = j.value("move_net", std::string("pointwise"));
            if (mn != "pointwise" && mn != "conv3") throw std::invalid_argument("layer " + l.name + ": unknown move_net " + mn);
            p.move_net = mn == "conv3" ? MoveNet::conv3 : MoveNet::pointwise;
            p.move_hidden = j.value("move_hidden", p.move_hidden);
            p.move_kernel = j.value("move_kernel", p.move_kernel);
            p.feature_sigmoid = j.value("feature_sigmoid", p.feature_sigmoid);
            p.options.target_factor = j.value("target_factor", p.options.target_factor);
            p.options.ema_momentum = j.value("ema_momentum", p.options.ema_momentum);
            p.options.trunc_window = j.value("trunc_window", p.options.trunc_window);
            p.options.detach_mean = j.value("detach_mean", p.options.detach_mean);
        } else {
            throw std::invalid_argument("layer " + l.name + ": unknown type " + l.type);
        }
    }
};

struct ModelConfig {
    std::string name = "custom";
    Decoder decoder = Decoder::ctc;
    std::size_t head_features = 16;  // aligner feature width H
    std::uint32_t rna_order = 6;
    std::vector<LayerConfig> layers;

    friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
        return nlohmann::json(a) == nlohmann::json(b);
    }

    friend void to_json(nlohmann::json& j, const ModelConfig& c) {
        j = {{"name", c.name}, {"decoder", c.decoder == Decoder::rna ? "rna" : "ctc"}, {"layers", c.layers}};
        if (c.decoder == Decoder::rna) {
            j["head_features"] = c.head_features;
            j["rna_order"] = c.rna_order;
        }
    }

    friend void from_json(const nlohmann::json& j, ModelConfig& c) {
        c = ModelConfig{};
        c.name = j.value("name", c.name);
        const auto dec = j.value("decoder", std::string("ctc"));
        if (dec != "ctc" && dec != "rna") throw std::invalid_argument("unknown decoder " + dec);
        c.decoder = dec == "rna" ? Decoder::rna : Decoder::ctc;
        c.head_features = j.value("head_features", c.head_features);
        c.rna_order = j.value("rna_order", c.rna_order);
        c.layers = j.at("layers").get<std::vector<LayerConfig>>();
    }

    /// Product of the strides of plain convolutions; dynamic pooling counts as 1 / target factor.
    double total_downsampling() const {
        double d = 1;
        for (const auto& l : layers) {
            if (l.type == "conv") d *= double(l.stride);
            if (l.type == "dynpool") d /= l.pool.options.target_factor;
        }
        return d;
    }

    bool uses_dynpool() const {
        for (const auto& l : layers)
            if (l.type == "dynpool") return true;
        return false;
    }
};

// ---- presets ----

namespace presets {

inline LayerConfig conv(std::string name, std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride) {
    LayerConfig l;
    l.type = "conv";
    l.name = std::move(name);
    l.c_in = c_in;
    l.c_out = c_out;
    l.kernel = kernel;
    l.stride = stride;
    return l;
}

inline LayerConfig dynpool(std::string name, std::size_t c_in, std::size_t c_out, std::size_t kernel, double target,
                           MoveNet move_net) {
    LayerConfig l;
    l.type = "dynpool";
    l.name = std::move(name);
    l.c_in = c_in;
    l.c_out = c_out;
    l.kernel = kernel;
    l.pool.c_in = c_in;
    l.pool.c_out = c_out;
    l.pool.kernel = kernel;
    l.pool.move_net = move_net;
    l.pool.options.target_factor = target;
    return l;
}

inline LayerConfig block(std::string name, std::size_t c, std::size_t repeats, std::size_t kernel, Activation act,
                         S2DStyle s2d, bool cross_shift) {
    LayerConfig l;
    l.type = "block";
    l.name = std::move(name);
    l.c_in = c;
    l.c_out = c;
    l.repeats = repeats;
    l.kernel = kernel;
    l.activation = act;
    l.s2d = s2d;
    l.cross_shift = cross_shift;
    return l;
}

inline constexpr std::size_t kPoolStride = 4;

/// Scaled stand-in for a Heron-like network: variable receptive-field groups, GLU, Heron-style
/// space-to-depth blocks; with dynamic pooling the move network has three layers.
inline ModelConfig heron_mini(bool with_dynpool) {
    ModelConfig c;
    c.name = with_dynpool ? "heron-mini-dynpool" : "heron-mini";
    c.layers.push_back(conv("stem", 1, 16, 5, 1));
    c.layers.push_back(with_dynpool ? dynpool("pool", 16, 48, 9, 1.0 / kPoolStride, MoveNet::conv3)
                                    : conv("pool", 16, 48, 9, kPoolStride));
    c.layers.push_back(block("b0", 48, 2, 0, Activation::glu, S2DStyle::none, false));
    c.layers.push_back(block("b1", 48, 2, 0, Activation::glu, S2DStyle::heron, true));
    c.layers.push_back(block("b2", 48, 2, 0, Activation::glu, S2DStyle::heron, true));
    return c;
}

/// Scaled stand-in for an Osprey-like network: fixed kernels, simplified space-to-depth blocks;
/// with dynamic pooling the move network is a single pointwise convolution.
inline ModelConfig osprey_mini(bool with_dynpool) {
    ModelConfig c;
    c.name = with_dynpool ? "osprey-mini-dynpool" : "osprey-mini";
    c.layers.push_back(conv("stem", 1, 16, 5, 1));
    c.layers.push_back(with_dynpool ? dynpool("pool", 16, 32, 9, 1.0 / kPoolStride, MoveNet::pointwise)
                                    : conv("pool", 16, 32, 9, kPoolStride));
    c.layers.push_back(block("b0", 32, 2, 9, Activation::glu, S2DStyle::osprey, true));
    c.layers.push_back(block("b1", 32, 2, 9, Activation::glu, S2DStyle::osprey, true));
    return c;
}

/// Tiny model for pipeline tests.
inline ModelConfig smoke(bool with_dynpool = true) {
    ModelConfig c;
    c.name = with_dynpool ? "smoke" : "smoke-fixed";
    c.layers.push_back(conv("stem", 1, 8, 5, 1));
    c.layers.push_back(with_dynpool ? dynpool("pool", 8, 16, 9, 1.0 / kPoolStride, MoveNet::pointwise)
                                    : conv("pool", 8, 16, 9, kPoolStride));
    c.layers.push_back(block("b0", 16, 1, 9, Activation::swish, S2DStyle::none, false));
    return c;
}

/// Tiny model with the aligner output layer.
inline ModelConfig smoke_rna() {
    ModelConfig c = smoke(true);
    c.name = "smoke-rna";
    c.decoder = Decoder::rna;
    c.head_features = 8;
    c.rna_order = 3;
    return c;
}

inline std::vector<std::string> names() {
    return {"smoke", "smoke-fixed", "smoke-rna", "heron-mini", "heron-mini-dynpool", "osprey-mini", "osprey-mini-dynpool"};
}

inline ModelConfig by_name(const std::string& name) {
    if (name == "smoke") return smoke(true);
    if (name == "smoke-fixed") return smoke(false);
    if (name == "smoke-rna") return smoke_rna();
    if (name == "heron-mini") return heron_mini(false);
    if (name == "heron-mini-dynpool") return heron_mini(true);
    if (name == "osprey-mini") return osprey_mini(false);
    if (name == "osprey-mini-dynpool") return osprey_mini(true);
    throw std::invalid_argument("unknown preset '" + name + "'");
}

}  // namespace presets

// ---- network ----

template <class T>
struct ModelOutput {
    Var<T> out;                       // logits [B, L, 5] or aligner features [B, L, H]
    std::vector<std::size_t> lengths;
    std::vector<PoolingTrace> traces;  // empty without dynamic pooling
    bool empty = false;                // some read was reduced to zero steps

    /// Mean renormalized length factor over all input points of the batch (NaN without pooling).
    double batch_mean_length_factor() const {
        if (traces.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0, n = 0;
        for (const auto& t : traces) {
            s += t.mean_length_factor * double(t.positions.size());
            n += double(t.positions.size());
        }
        return n > 0 ? s / n : 0.0;
    }
};

template <class T>
class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), store_(seed) {
        std::size_t width = 1;
        for (const auto& l : cfg.layers) {
            if (l.c_in != width)
                throw ShapeError("model layer " + l.name, "expects " + std::to_string(l.c_in) + " input channels, previous layer gives " +
                                                              std::to_string(width));
            if (l.type == "conv") {
                layers_.emplace_back(ConvLayer{Conv1d<T>(store_, l.name + ".conv", Conv1dSpec(l.c_in, l.c_out, l.kernel, l.stride)),
                                               BatchNorm<T>(store_, l.name + ".bn", l.c_out), l.stride});
            } else if (l.type == "dynpool") {
                DynPoolLayerSpec spec = l.pool;
                spec.c_in = l.c_in;
                spec.c_out = l.c_out;
                spec.kernel = l.kernel;
                layers_.emplace_back(PoolLayer{DynamicPooling<T>(store_, l.name, spec), BatchNorm<T>(store_, l.name + ".bn", l.c_out)});
            } else {
                BlockSpec spec;
                spec.c_in = l.c_in;
                spec.c_out = l.c_out;
                spec.repeats = l.repeats;
                spec.kernel = l.kernel;
                spec.activation = l.activation;
                spec.s2d = l.s2d;
                spec.cross_shift = l.cross_shift;
                spec.skip = l.skip;
                layers_.emplace_back(Block<T>(store_, l.name, spec));
            }
            width = l.c_out;
        }
        const std::size_t head_out = cfg.decoder == Decoder::ctc ? kSymbols : cfg.head_features;
        head_ = Conv1d<T>(store_, "head", Conv1dSpec(width, head_out, 1));
        if (cfg.decoder == Decoder::rna) rna_ = RnaHead<T>(store_, "rna", RnaHeadSpec{cfg.head_features, cfg.rna_order});
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& store() { return store_; }
    const ParameterStore<T>& store() const { return store_; }
    const RnaHead<T>& rna_head() const { return rna_; }

    /// Runs the network on signals [B, T, 1] with per-read valid lengths.
    ModelOutput<T> forward(Tape<T>& /*tape*/, Var<T> x, std::vector<std::size_t> lengths, Mode mode) const {
        ModelOutput<T> out;
        if (x.value().rank() != 3 || x.dim(2) != 1) throw ShapeError("model input", Shape{x.value().rank() ? x.dim(0) : 0, 0, 1}, x.shape());
        if (lengths.empty()) lengths.assign(x.dim(0), x.dim(1));
        auto any_empty = [](const std::vector<std::size_t>& lens) {
            return std::any_of(lens.begin(), lens.end(), [](std::size_t n) { return n == 0; });
        };
        Var<T> h = x;
        for (const auto& layer : layers_) {
            if (any_empty(lengths)) {
                out.empty = true;
                break;
            }
            if (const auto* c = std::get_if<ConvLayer>(&layer)) {
                h = c->conv(h);
                lengths = ceil_div_lengths(lengths, c->stride);
                h = ops::swish(c->bn(h, mode, lengths));
            } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
                auto pooled = p->pool(h, mode);
                lengths = pooled.lengths;
                out.traces = std::move(pooled.traces);
                if (any_empty(lengths)) {
                    out.empty = true;
                    break;
                }
                h = ops::swish(p->bn(pooled.y, mode, lengths));
            } else {
                h = std::get<Block<T>>(layer)(h, mode, lengths);
            }
        }
        out.lengths = lengths;
        if (out.empty) return out;
        out.out = ops::mask_time(head_(h), lengths);
        return out;
    }

    /// Per-base negative log-likelihood: Σ_b nll_b / Σ_b |z_b| over alignable reads.
    /// `alignable` receives one flag per read; returns an invalid Var when no read is alignable.
    Var<T> loss(const ModelOutput<T>& out, const std::vector<std::string>& targets, std::vector<bool>& alignable) const {
        Var<T> per_read = cfg_.decoder == Decoder::ctc ? ops::ctc_loss(out.out, out.lengths, targets, &alignable)
                                                       : ops::rna_loss(out.out, out.lengths, targets, rna_, &alignable);
        double bases = 0;
        for (std::size_t b = 0; b < targets.size(); ++b)
            if (alignable[b]) bases += double(std::max<std::size_t>(targets[b].size(), 1));
        if (bases == 0) return Var<T>{};
        Tensor<T> w(Shape{targets.size()});
        for (std::size_t b = 0; b < targets.size(); ++b) w[b] = alignable[b] ? T(1.0 / bases) : T(0);
        return ops::weighted_sum(per_read, w);
    }

private:
    struct ConvLayer {
        Conv1d<T> conv;
        BatchNorm<T> bn;
        std::size_t stride;
    };
    struct PoolLayer {
        DynamicPooling<T> pool;
        BatchNorm<T> bn;
    };

    ModelConfig cfg_;
    ParameterStore<T> store_;
    std::vector<std::variant<ConvLayer, PoolLayer, Block<T>>> layers_;
    Conv1d<T> head_;
    RnaHead<T> rna_;
};

}  // namespace dynpool
