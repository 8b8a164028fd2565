#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dynpool/batch_norm.hpp"
#include "dynpool/conv.hpp"
#include "dynpool/ops.hpp"

// Dynamic pooling: every input point i gets a feature vector f_i, an importance w_i and a length
// factor m_i. Points are placed at p_i = m_0 + ... + m_i and output step o (real position o + 1)
// collects f_i·w_i·max(0, 1 − |p_i − (o + 1)|). The output has ceil(p_last) steps.

namespace dynpool {

struct DynPoolOptions {
    /// Target batch-mean length factor S (the inverse of the average pooling factor).
    double target_factor = 1.0 / 3.0;
    /// Momentum of the running average of S/M used in eval mode.
    double ema_momentum = 0.99;
    /// Prefix-sum gradient window; each m'_j receives Σ_{k=j}^{j+window} ∂L/∂p_k. Negative = no truncation.
    int trunc_window = 20;
    /// When true the batch mean M is treated as a constant in the backward pass.
    bool detach_mean = false;
};

/// Per-read record of the warping performed by one forward pass.
struct PoolingTrace {
    std::vector<double> positions;  // p_i per input step, nondecreasing
    std::size_t output_length = 0;  // ceil(p_last)
    double mean_length_factor = 0;  // mean of the (renormalized) m'
};

inline std::size_t output_length(const PoolingTrace& trace) { return trace.output_length; }

/// ceil(p) for the last warped position, 0 for empty or non-positive sums.
inline std::size_t pooled_length(double p_last) {
    if (!(p_last > 0)) return 0;
    return std::size_t(std::ceil(p_last));
}

template <class T>
struct Renormalized {
    Tensor<T> factors;
    double ratio = 1;  // S / M
};

/// Scales length factors so that their mean over the whole batch equals `target`.
template <class T>
Renormalized<T> renormalize_batch(const Tensor<T>& m, double target) {
    if (m.size() == 0) throw ShapeError("renormalize_batch", "empty batch");
    double total = 0;
    for (T v : m.data()) total += v;
    const double mean = total / double(m.size());
    if (!(mean > 0)) throw NumericError("renormalize_batch: mean length factor is zero");
    Renormalized<T> r;
    r.ratio = target / mean;
    r.factors = m;
    for (auto& v : r.factors.data()) v = T(double(v) * r.ratio);
    return r;
}

/// State shared by the dynamic-pooling op across calls: the running average of S/M.
struct DynPoolState {
    double ema_ratio = 1.0;
};

namespace ops {

/// Dynamic pooling of f [B,T,C] with importances w [B,T,1] and length factors m [B,T,1].
/// Output is [B, L_max, C], zero padded past each read's length (reported in `traces`).
template <class T>
Var<T> dynamic_pool(Var<T> f, Var<T> w, Var<T> m, const DynPoolOptions& opts, Mode mode, DynPoolState& state,
                    std::vector<PoolingTrace>* traces = nullptr) {
    expect_rank("dynamic_pool", f.shape(), 3);
    const std::size_t B = f.dim(0), Tn = f.dim(1), C = f.dim(2);
    if (w.shape() != Shape{B, Tn, 1}) throw ShapeError("dynamic_pool (w)", Shape{B, Tn, 1}, w.shape());
    if (m.shape() != Shape{B, Tn, 1}) throw ShapeError("dynamic_pool (m)", Shape{B, Tn, 1}, m.shape());
    for (Var<T> v : {f, w, m}) {
        if (!v.value().all_finite()) throw NumericError("dynamic_pool: non-finite values in sub-network output");
    }

    const auto& mv = m.value();
    double ratio = state.ema_ratio;
    double mean_m = 0;
    if (mode == Mode::train) {
        if (Tn == 0) throw ShapeError("dynamic_pool", "train mode needs T >= 1");
        for (T v : mv.data()) mean_m += v;
        mean_m /= double(mv.size());
        if (!(mean_m > 0)) throw NumericError("dynamic_pool: mean length factor is zero");
        ratio = opts.target_factor / mean_m;
        state.ema_ratio = opts.ema_momentum * state.ema_ratio + (1.0 - opts.ema_momentum) * ratio;
    }

    // warped positions, accumulated in double
    std::vector<T> pos(B * Tn);
    std::vector<std::size_t> lens(B);
    std::size_t Lmax = 0;
    if (traces) traces->assign(B, PoolingTrace{});
    for (std::size_t b = 0; b < B; ++b) {
        double p = 0;
        for (std::size_t i = 0; i < Tn; ++i) {
            p += double(mv[b * Tn + i]) * ratio;
            pos[b * Tn + i] = T(p);
        }
        lens[b] = pooled_length(Tn ? double(pos[b * Tn + Tn - 1]) : 0.0);
        Lmax = std::max(Lmax, lens[b]);
        if (traces) {
            auto& tr = (*traces)[b];
            tr.positions.assign(pos.begin() + std::ptrdiff_t(b * Tn), pos.begin() + std::ptrdiff_t((b + 1) * Tn));
            tr.output_length = lens[b];
            tr.mean_length_factor = Tn ? p / double(Tn) : 0.0;
        }
    }

    const auto& fv = f.value();
    const auto& wv = w.value();
    Tensor<T> y(Shape{B, Lmax, C});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < Tn; ++i) {
            const T p = pos[b * Tn + i];
            const T fl = std::floor(p);
            const T frac = p - fl;
            const T wi = wv[b * Tn + i];
            const T* fr = fv.ptr() + (b * Tn + i) * C;
            // real position j = fl receives 1 - frac, j = fl + 1 receives frac
            const long j0 = long(fl);
            for (int k = 0; k < 2; ++k) {
                const long j = j0 + k;
                const T weight = k == 0 ? T(1) - frac : frac;
                if (weight <= T(0) || j < 1 || j > long(lens[b])) continue;
                T* yr = y.ptr() + (b * Lmax + std::size_t(j - 1)) * C;
                const T s = wi * weight;
                for (std::size_t c = 0; c < C; ++c) yr[c] += fr[c] * s;
            }
        }
    }

    Tape<T>& tape = *f.tape;
    const bool rg = tape.any_requires_grad({f, w, m});
    const bool train = mode == Mode::train;
    return tape.record(
        "dynamic_pool", std::move(y), rg,
        [=, pos = std::move(pos), lens = std::move(lens), out = tape.size()](Tape<T>& tp) {
            const auto& gy = tp.grad(Var<T>{&tp, out});
            const auto& fv = tp.value(f);
            const auto& wv = tp.value(w);
            const auto& mv = tp.value(m);
            const bool gf_on = tp.requires_grad(f);
            const bool gw_on = tp.requires_grad(w);
            const bool gm_on = tp.requires_grad(m);
            T* gf = gf_on ? tp.grad(f).ptr() : nullptr;
            T* gw = gw_on ? tp.grad(w).ptr() : nullptr;
            std::vector<double> gp(B * Tn, 0.0);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t i = 0; i < Tn; ++i) {
                    const T p = pos[b * Tn + i];
                    const T fl = std::floor(p);
                    const T frac = p - fl;
                    const T wi = wv[b * Tn + i];
                    const T* fr = fv.ptr() + (b * Tn + i) * C;
                    const long j0 = long(fl);
                    for (int k = 0; k < 2; ++k) {
                        const long j = j0 + k;
                        if (j < 1 || j > long(lens[b])) continue;
                        const T weight = k == 0 ? T(1) - frac : frac;
                        // d weight / d p: -1 toward j0 and +1 toward j0 + 1, zero at the knot
                        const T slope = frac > T(0) ? (k == 0 ? T(-1) : T(1)) : T(0);
                        if (weight <= T(0) && slope == T(0)) continue;
                        const T* gr = gy.ptr() + (b * Lmax + std::size_t(j - 1)) * C;
                        double dot = 0;
                        for (std::size_t c = 0; c < C; ++c) dot += double(gr[c]) * double(fr[c]);
                        if (gf_on && weight > T(0)) {
                            T* gfr = gf + (b * Tn + i) * C;
                            const T s = wi * weight;
                            for (std::size_t c = 0; c < C; ++c) gfr[c] += gr[c] * s;
                        }
                        if (gw_on) gw[b * Tn + i] += T(dot * double(weight));
                        gp[b * Tn + i] += dot * double(wi) * double(slope);
                    }
                }
            }
            if (!gm_on) return;
            // truncated prefix-sum backward: g'_j = Σ_{k=j}^{j+W} gp_k
            std::vector<double> gmr(B * Tn, 0.0);
            for (std::size_t b = 0; b < B; ++b) {
                std::vector<double> suffix(Tn + 1, 0.0);
                for (std::size_t i = Tn; i-- > 0;) suffix[i] = suffix[i + 1] + gp[b * Tn + i];
                for (std::size_t j = 0; j < Tn; ++j) {
                    const std::size_t end =
                        opts.trunc_window < 0 ? Tn : std::min(Tn, j + std::size_t(opts.trunc_window) + 1);
                    gmr[b * Tn + j] = suffix[j] - suffix[end];
                }
            }
            auto& gm = tp.grad(m);
            if (train && !opts.detach_mean) {
                // m' = m·S/M with M the batch mean of m
                double coupling = 0;
                for (std::size_t k = 0; k < B * Tn; ++k) coupling += gmr[k] * double(mv[k]);
                const double shared = ratio / mean_m / double(B * Tn) * coupling;
                for (std::size_t k = 0; k < B * Tn; ++k) gm[k] += T(ratio * gmr[k] - shared);
            } else {
                for (std::size_t k = 0; k < B * Tn; ++k) gm[k] += T(ratio * gmr[k]);
            }
        });
}

}  // namespace ops

/// Sub-network layout used to compute importances and length factors.
enum class MoveNet { pointwise, conv3 };

struct DynPoolLayerSpec {
    std::size_t c_in = 16;
    std::size_t c_out = 32;
    std::size_t kernel = 9;       // kernel of the feature convolution
    MoveNet move_net = MoveNet::pointwise;
    std::size_t move_hidden = 8;  // hidden width of the conv3 move network
    std::size_t move_kernel = 9;
    bool feature_sigmoid = true;  // bound f to (0, 1)
    DynPoolOptions options{};
};

/// Output of a dynamic pooling layer for a batch.
template <class T>
struct PooledBatch {
    Var<T> y;
    std::vector<std::size_t> lengths;
    std::vector<PoolingTrace> traces;
};

/// Dynamic pooling layer: feature convolution f, importance w and length factor m sub-networks,
/// plus the running S/M average stored as a one-element buffer `<name>.ema_ratio`.
template <class T>
class DynamicPooling {
public:
    DynamicPooling() = default;

    DynamicPooling(ParameterStore<T>& store, const std::string& name, const DynPoolLayerSpec& spec) : spec_(spec) {
        f_ = Conv1d<T>(store, name + ".f", Conv1dSpec(spec.c_in, spec.c_out, spec.kernel));
        std::size_t head_in = spec.c_in;
        if (spec.move_net == MoveNet::conv3) {
            mw0_ = Conv1d<T>(store, name + ".mw0", Conv1dSpec(spec.c_in, spec.move_hidden, spec.move_kernel));
            mw1_ = Conv1d<T>(store, name + ".mw1", Conv1dSpec(spec.move_hidden, spec.move_hidden, spec.move_kernel));
            head_in = spec.move_hidden;
        }
        w_ = Conv1d<T>(store, name + ".w", Conv1dSpec(head_in, 1, 1));
        m_ = Conv1d<T>(store, name + ".m", Conv1dSpec(head_in, 1, 1));
        ema_ = &store.get_or_create(name + ".ema_ratio", Shape{1}, [](Tensor<T>& t, std::mt19937_64&) { t.fill(T(1)); },
                                    false);
    }

    PooledBatch<T> operator()(Var<T> x, Mode mode) const {
        Var<T> f = f_(x);
        if (spec_.feature_sigmoid) f = ops::sigmoid(f);
        Var<T> h = x;
        if (spec_.move_net == MoveNet::conv3) h = ops::swish(mw1_(ops::swish(mw0_(x))));
        Var<T> w = ops::sigmoid(w_(h));
        Var<T> m = ops::sigmoid(m_(h));
        DynPoolState state{double(ema_->value[0])};
        PooledBatch<T> out;
        out.y = ops::dynamic_pool(f, w, m, spec_.options, mode, state, &out.traces);
        if (mode == Mode::train) ema_->value[0] = T(state.ema_ratio);
        for (const auto& tr : out.traces) out.lengths.push_back(tr.output_length);
        return out;
    }

    const DynPoolLayerSpec& spec() const { return spec_; }
    double ema_ratio() const { return double(ema_->value[0]); }

private:
    DynPoolLayerSpec spec_;
    Conv1d<T> f_, mw0_, mw1_, w_, m_;
    Parameter<T>* ema_ = nullptr;
};

}  // namespace dynpool
