#pragma once

#include <array>
#include <string>
#include <vector>

#include "dynpool/batch_norm.hpp"
#include "dynpool/conv.hpp"
#include "dynpool/ops.hpp"

namespace dynpool {

enum class Activation { swish, glu };
enum class S2DStyle { none, heron, osprey };

inline std::vector<std::size_t> ceil_div_lengths(const std::vector<std::size_t>& lengths, std::size_t f) {
    std::vector<std::size_t> out(lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) out[i] = (lengths[i] + f - 1) / f;
    return out;
}

template <class T>
Var<T> activate(Var<T> x, Activation a) {
    return a == Activation::glu ? ops::glu(x) : ops::swish(x);
}

/// Channel groups in ratio 2:2:1:1 with receptive fields 3, 7, 15 and 31.
struct RFGroupSpec {
    std::array<std::size_t, 4> sizes{};
    std::array<std::size_t, 4> kernels{3, 7, 15, 31};

    /// Splits `channels` by largest-remainder rounding; ties go to the lower group index.
    static RFGroupSpec for_channels(std::size_t channels) {
        if (channels < 6) throw ShapeError("rf_group_depthwise", "needs at least 6 channels, got " + std::to_string(channels));
        constexpr std::array<std::size_t, 4> ratio{2, 2, 1, 1};
        RFGroupSpec spec;
        std::array<std::size_t, 4> rem{};
        std::size_t assigned = 0;
        for (std::size_t g = 0; g < 4; ++g) {
            spec.sizes[g] = channels * ratio[g] / 6;
            rem[g] = channels * ratio[g] % 6;
            assigned += spec.sizes[g];
        }
        while (assigned < channels) {
            std::size_t best = 0;
            for (std::size_t g = 1; g < 4; ++g)
                if (rem[g] > rem[best]) best = g;
            ++spec.sizes[best];
            rem[best] = 0;
            ++assigned;
        }
        return spec;
    }
};

/// Depthwise convolution with a different kernel size in each of four channel groups.
template <class T>
class RFGroupDepthwise {
public:
    RFGroupDepthwise() = default;
    RFGroupDepthwise(ParameterStore<T>& store, const std::string& name, std::size_t channels)
        : spec_(RFGroupSpec::for_channels(channels)) {
        for (std::size_t g = 0; g < 4; ++g) {
            groups_[g] = Conv1d<T>(store, name + ".g" + std::to_string(g),
                                   Conv1dSpec(spec_.sizes[g], spec_.sizes[g], spec_.kernels[g], 1, true));
        }
    }

    Var<T> operator()(Var<T> x) const {
        std::vector<Var<T>> parts;
        std::size_t off = 0;
        for (std::size_t g = 0; g < 4; ++g) {
            parts.push_back(groups_[g](ops::channel_slice(x, off, spec_.sizes[g])));
            off += spec_.sizes[g];
        }
        return ops::concat_channels(parts);
    }

    const RFGroupSpec& spec() const { return spec_; }
    const Conv1d<T>& group(std::size_t g) const { return groups_[g]; }

private:
    RFGroupSpec spec_;
    std::array<Conv1d<T>, 4> groups_;
};

/// Compresses time by 3 and widens channels by `channel_mult`.
///
/// Heron style folds each window of three steps into channels and mixes them with a pointwise
/// convolution (a stride-3 convolution over the window). Osprey style mean-pools the window and
/// applies a pointwise convolution.
template <class T>
class SpaceToDepth {
public:
    static constexpr std::size_t factor = 3;

    SpaceToDepth() = default;
    SpaceToDepth(ParameterStore<T>& store, const std::string& name, std::size_t c_in, std::size_t c_out, S2DStyle style)
        : style_(style) {
        const std::size_t in = style == S2DStyle::heron ? factor * c_in : c_in;
        conv_ = Conv1d<T>(store, name, Conv1dSpec(in, c_out, 1));
    }

    Var<T> operator()(Var<T> x) const {
        Var<T> folded = style_ == S2DStyle::heron ? ops::fold_time(x, factor) : ops::mean_pool(x, factor);
        return conv_(folded);
    }

    const Conv1d<T>& conv() const { return conv_; }

private:
    S2DStyle style_ = S2DStyle::heron;
    Conv1d<T> conv_;
};

/// Expands time by 3, mapping `c_in` channels to `c_out` channels per output step.
///
/// Heron style is a transposed stride-3 convolution (pointwise to 3·c_out, then unfold). Osprey
/// style uses three pointwise convolutions, one per output step, each reading a half of the input
/// channels; consecutive halves overlap by 50%.
template <class T>
class DepthToSpace {
public:
    static constexpr std::size_t factor = 3;

    DepthToSpace() = default;
    DepthToSpace(ParameterStore<T>& store, const std::string& name, std::size_t c_in, std::size_t c_out, S2DStyle style)
        : style_(style), c_in_(c_in) {
        if (style == S2DStyle::heron) {
            convs_.push_back(Conv1d<T>(store, name, Conv1dSpec(c_in, factor * c_out, 1)));
        } else {
            if (c_in % 4 != 0) throw ShapeError("depth_to_space", "osprey style needs channels divisible by 4, got " + std::to_string(c_in));
            for (std::size_t g = 0; g < factor; ++g) {
                convs_.push_back(Conv1d<T>(store, name + ".g" + std::to_string(g), Conv1dSpec(c_in / 2, c_out, 1)));
            }
        }
    }

    Var<T> operator()(Var<T> x, std::size_t out_len) const {
        if (style_ == S2DStyle::heron) return ops::unfold_time(convs_[0](x), factor, out_len);
        std::vector<Var<T>> steps;
        for (std::size_t g = 0; g < factor; ++g) {
            steps.push_back(convs_[g](ops::channel_slice(x, g * c_in_ / 4, c_in_ / 2)));
        }
        return ops::unfold_time(ops::concat_channels(steps), factor, out_len);
    }

    const std::vector<Conv1d<T>>& convs() const { return convs_; }

private:
    S2DStyle style_ = S2DStyle::heron;
    std::size_t c_in_ = 0;
    std::vector<Conv1d<T>> convs_;
};

/// Shape/behaviour of a residual convolutional block.
struct BlockSpec {
    std::size_t c_in = 16;
    std::size_t c_out = 16;
    std::size_t repeats = 1;
    std::size_t kernel = 9;  // 0 selects variable receptive field groups
    Activation activation = Activation::swish;
    S2DStyle s2d = S2DStyle::none;
    bool cross_shift = false;
    bool skip = true;
    BatchNormOptions bn{};
};

/// Repeated (depthwise → pointwise → batch norm → activation) with an optional space-to-depth
/// wrapper and a pointwise + batch-norm skip branch added before the final Swish.
template <class T>
class Block {
public:
    Block() = default;

    Block(ParameterStore<T>& store, const std::string& name, const BlockSpec& spec) : spec_(spec) {
        if (spec.repeats == 0) throw ShapeError("block " + name, "repeats must be positive");
        if (spec.cross_shift && spec.c_in % 2 != 0) throw ShapeError("block " + name, "cross-shift needs an even channel count");
        const bool s2d = spec.s2d != S2DStyle::none;
        std::size_t width = s2d ? 2 * spec.c_in : spec.c_in;
        const std::size_t inner = s2d ? 2 * spec.c_out : spec.c_out;
        if (s2d) compress_ = SpaceToDepth<T>(store, name + ".compress", spec.c_in, width, spec.s2d);
        for (std::size_t r = 0; r < spec.repeats; ++r) {
            const std::string rn = name + ".rep" + std::to_string(r);
            Rep rep;
            if (spec.kernel == 0) {
                rep.rf = RFGroupDepthwise<T>(store, rn + ".dw", width);
                rep.use_rf = true;
            } else {
                rep.dw = Conv1d<T>(store, rn + ".dw", Conv1dSpec(width, width, spec.kernel, 1, true));
            }
            rep.activated = s2d || r + 1 < spec.repeats;
            const bool gated = rep.activated && spec.activation == Activation::glu;
            const std::size_t pw_out = gated ? 2 * inner : inner;
            typename ParameterStore<T>::Init init = nullptr;
            if (gated) {
                init = [fan_in = width](Tensor<T>& w, std::mt19937_64& rng) {
                    kaiming_init<T>(fan_in)(w, rng);
                    glu_init(w);
                };
            }
            rep.pw = Conv1d<T>(store, rn + ".pw", Conv1dSpec(width, pw_out, 1), true, init);
            rep.bn = BatchNorm<T>(store, rn + ".bn", pw_out, spec.bn);
            reps_.push_back(std::move(rep));
            width = inner;
        }
        if (s2d) decompress_ = DepthToSpace<T>(store, name + ".decompress", inner, spec.c_out, spec.s2d);
        if (spec.skip) {
            skip_pw_ = Conv1d<T>(store, name + ".skip.pw", Conv1dSpec(spec.c_in, spec.c_out, 1));
            skip_bn_ = BatchNorm<T>(store, name + ".skip.bn", spec.c_out, spec.bn);
        }
    }

    Var<T> operator()(Var<T> x, Mode mode, const std::vector<std::size_t>& lengths = {}) const {
        const bool s2d = spec_.s2d != S2DStyle::none;
        const std::size_t T_in = x.dim(1);
        Var<T> h = spec_.cross_shift ? ops::cross_shift(x) : x;
        std::vector<std::size_t> lens = lengths;
        if (s2d) {
            h = compress_(h);
            lens = ceil_div_lengths(lengths, SpaceToDepth<T>::factor);
            h = ops::mask_time(h, lens);
        }
        for (const auto& rep : reps_) {
            h = rep.use_rf ? rep.rf(h) : rep.dw(h);
            h = rep.bn(rep.pw(h), mode, lens);
            if (rep.activated) h = activate(h, spec_.activation);
        }
        if (s2d) h = decompress_(h, T_in);
        if (spec_.skip) h = ops::add(h, skip_bn_(skip_pw_(x), mode, lengths));
        return ops::mask_time(ops::swish(h), lengths);
    }

    const BlockSpec& spec() const { return spec_; }

private:
    struct Rep {
        bool use_rf = false;
        bool activated = true;
        Conv1d<T> dw;
        RFGroupDepthwise<T> rf;
        Conv1d<T> pw;
        BatchNorm<T> bn;
    };

    BlockSpec spec_;
    SpaceToDepth<T> compress_;
    std::vector<Rep> reps_;
    DepthToSpace<T> decompress_;
    Conv1d<T> skip_pw_;
    BatchNorm<T> skip_bn_;
};

}  // namespace dynpool
