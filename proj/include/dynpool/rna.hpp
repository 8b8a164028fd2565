#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dynpool/alphabet.hpp"
#include "dynpool/lattice.hpp"
#include "dynpool/tape.hpp"

// Recurrent neural aligner output layer: the distribution at step i depends on the feature vector
// h_i and on the last k emitted bases through a table of per-context affine maps,
// Q(h_i, z_1..z_j) = softmax(W[ctx] h_i + b[ctx] + start[len]) where `start` applies only while
// fewer than k bases have been emitted.

namespace dynpool {

struct RnaHeadSpec {
    std::size_t features = 16;
    std::uint32_t order = 6;

    std::size_t contexts() const { return std::size_t{1} << (2 * order); }
};

template <class T>
class RnaHead {
public:
    RnaHead() = default;

    RnaHead(ParameterStore<T>& store, const std::string& name, const RnaHeadSpec& spec) : spec_(spec) {
        if (spec.order == 0 || spec.order > 12) throw std::invalid_argument("rna head: context order must be in 1..12");
        const std::size_t H = spec.features, K = spec.contexts();
        // every context starts from the same affine map
        auto shared = [H, K](Tensor<T>& w, std::mt19937_64& rng) {
            std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(H)));
            std::vector<T> first(kSymbols * H);
            for (auto& v : first) v = T(dist(rng));
            for (std::size_t k = 0; k < K; ++k) std::copy(first.begin(), first.end(), w.ptr() + k * first.size());
        };
        weight_ = &store.get_or_create(name + ".table_weight", Shape{K, kSymbols, H}, shared);
        bias_ = &store.get_or_create(name + ".table_bias", Shape{K, kSymbols}, nullptr);
        start_ = &store.get_or_create(name + ".start_bias", Shape{spec.order, kSymbols}, nullptr);
    }

    const RnaHeadSpec& spec() const { return spec_; }
    Parameter<T>& weight() const { return *weight_; }
    Parameter<T>& bias() const { return *bias_; }
    Parameter<T>& start_bias() const { return *start_; }

    /// Pre-softmax scores for feature row `h` under context `ctx`, using explicit tensors.
    static std::array<double, kSymbols> scores(const Tensor<T>& W, const Tensor<T>& b, const Tensor<T>& start,
                                               std::size_t H, std::uint32_t order, const T* h, Context ctx) {
        std::array<double, kSymbols> u{};
        const T* wr = W.ptr() + std::size_t(ctx.code) * kSymbols * H;
        for (std::size_t c = 0; c < kSymbols; ++c) {
            double acc = b[ctx.code * kSymbols + c];
            for (std::size_t k = 0; k < H; ++k) acc += double(wr[c * H + k]) * double(h[k]);
            if (ctx.length < order) acc += start[ctx.length * kSymbols + c];
            u[c] = acc;
        }
        return u;
    }

    std::array<double, kSymbols> log_probs(const T* h, Context ctx) const {
        auto u = scores(weight_->value, bias_->value, start_->value, spec_.features, spec_.order, h, ctx);
        return log_softmax5(u.data());
    }

private:
    RnaHeadSpec spec_;
    Parameter<T>* weight_ = nullptr;
    Parameter<T>* bias_ = nullptr;
    Parameter<T>* start_ = nullptr;
};

namespace detail {

/// Log-probabilities Q(h_i, ctx_j) for every lattice cell of one read.
struct RnaBand {
    LatticeBand band;
    std::vector<std::size_t> row_offset;  // first cell index of step i
    std::vector<double> lq;               // cells x 5

    const double* at(std::size_t i, std::size_t j) const {
        return lq.data() + (row_offset[i] + (j - band.lo(i))) * kSymbols;
    }
};

template <class T>
RnaBand rna_band(const Tensor<T>& W, const Tensor<T>& b, const Tensor<T>& start, const RnaHeadSpec& spec,
                 const T* h, std::size_t L, std::span<const std::uint8_t> z, const std::vector<Context>& ctx) {
    RnaBand rb;
    rb.band = {L, z.size()};
    rb.row_offset.resize(L);
    std::size_t cells = 0;
    for (std::size_t i = 0; i < L; ++i) {
        rb.row_offset[i] = cells;
        cells += rb.band.hi(i) - rb.band.lo(i) + 1;
    }
    rb.lq.resize(cells * kSymbols);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = rb.band.lo(i); j <= rb.band.hi(i); ++j) {
            auto u = RnaHead<T>::scores(W, b, start, spec.features, spec.order, h + i * spec.features, ctx[j]);
            auto l = log_softmax5(u.data());
            std::copy(l.begin(), l.end(), rb.lq.begin() + std::ptrdiff_t((rb.row_offset[i] + j - rb.band.lo(i)) * kSymbols));
        }
    }
    return rb;
}

inline std::vector<Context> prefix_contexts(std::span<const std::uint8_t> z, std::uint32_t order) {
    std::vector<Context> ctx(z.size() + 1);
    for (std::size_t j = 0; j < z.size(); ++j) ctx[j + 1] = ctx[j].push(z[j], order);
    return ctx;
}

}  // namespace detail

/// −log Pr(target | h) for one read, h of shape L x H.
template <class T>
double rna_nll(const RnaHead<T>& head, std::span<const T> h, std::string_view target) {
    const std::size_t H = head.spec().features;
    const std::size_t L = h.size() / H;
    const auto z = encode_bases(target);
    if (L < z.size()) throw UnalignableError(L, z.size());
    const auto ctx = detail::prefix_contexts(z, head.spec().order);
    auto rb = detail::rna_band(head.weight().value, head.bias().value, head.start_bias().value, head.spec(), h.data(), L, z, ctx);
    auto r = lattice_forward(L, z, [&](std::size_t i, std::size_t j) { return rb.at(i, j); }, false);
    return -r.log_likelihood;
}

namespace ops {

/// Per-read aligner negative log-likelihood for features h [B, L_max, H]; returns [B].
/// Unalignable reads follow the same convention as ctc_loss.
template <class T>
Var<T> rna_loss(Var<T> h, const std::vector<std::size_t>& lengths, const std::vector<std::string>& targets,
                const RnaHead<T>& head, std::vector<bool>* alignable = nullptr) {
    expect_rank("rna_loss", h.shape(), 3);
    const RnaHeadSpec spec = head.spec();
    const std::size_t B = h.dim(0), Lmax = h.dim(1), H = spec.features;
    if (h.dim(2) != H) throw ShapeError("rna_loss", Shape{B, Lmax, H}, h.shape());
    if (lengths.size() != B || targets.size() != B) throw ShapeError("rna_loss", "lengths/targets do not match batch size");
    if (alignable) alignable->assign(B, true);

    Tape<T>& tape = *h.tape;
    Var<T> W = tape.parameter(head.weight());
    Var<T> bias = tape.parameter(head.bias());
    Var<T> start = tape.parameter(head.start_bias());
    const auto& Wv = W.value();
    const auto& bv = bias.value();
    const auto& sv = start.value();
    const auto& hv = h.value();

    struct Saved {
        std::vector<std::uint8_t> z;
        std::vector<Context> ctx;
        std::vector<double> grad_u;  // d loss / d scores per lattice cell, cells x 5
        detail::RnaBand band;
    };
    std::vector<Saved> saved(B);
    Tensor<T> loss(Shape{B});
    const bool rg = tape.any_requires_grad({h, W, bias, start});
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t L = std::min(lengths[b], Lmax);
        auto& s = saved[b];
        s.z = encode_bases(targets[b]);
        if (L < s.z.size()) {
            if (!alignable) throw UnalignableError(L, s.z.size());
            (*alignable)[b] = false;
            s.z.clear();
            continue;
        }
        s.ctx = detail::prefix_contexts(s.z, spec.order);
        s.band = detail::rna_band(Wv, bv, sv, spec, hv.ptr() + b * Lmax * H, L, s.z, s.ctx);
        auto lq = [&](std::size_t i, std::size_t j) { return s.band.at(i, j); };
        auto r = lattice_forward(L, s.z, lq, rg);
        loss[b] = T(-r.log_likelihood);
        if (!rg) continue;
        s.grad_u.assign(s.band.lq.size(), 0.0);
        lattice_posteriors(r, s.z, lq, [&](std::size_t i, std::size_t j, double occ, double stay, double adv) {
            const std::size_t cell = s.band.row_offset[i] + j - s.band.band.lo(i);
            const double* q = s.band.at(i, j);
            double* g = s.grad_u.data() + cell * kSymbols;
            for (std::size_t c = 0; c < kSymbols; ++c) g[c] += occ * std::exp(q[c]);
            g[kBlank] -= stay;
            if (j < s.z.size()) g[s.z[j]] -= adv;
        });
    }

    return tape.record(
        "rna_loss", std::move(loss), rg,
        [h, W, bias, start, spec, Lmax, H, saved = std::move(saved), out = tape.size()](Tape<T>& tp) {
            const auto& gy = tp.grad(Var<T>{&tp, out});
            const auto& hv = tp.value(h);
            const auto& Wv = tp.value(W);
            T* gh = tp.requires_grad(h) ? tp.grad(h).ptr() : nullptr;
            T* gW = tp.requires_grad(W) ? tp.grad(W).ptr() : nullptr;
            T* gb = tp.requires_grad(bias) ? tp.grad(bias).ptr() : nullptr;
            T* gs = tp.requires_grad(start) ? tp.grad(start).ptr() : nullptr;
            for (std::size_t b = 0; b < saved.size(); ++b) {
                const auto& s = saved[b];
                if (s.grad_u.empty()) continue;
                const double scale = gy[b];
                const auto& band = s.band.band;
                for (std::size_t i = 0; i < band.steps; ++i) {
                    const T* hi = hv.ptr() + (b * Lmax + i) * H;
                    for (std::size_t j = band.lo(i); j <= band.hi(i); ++j) {
                        const std::size_t cell = s.band.row_offset[i] + j - band.lo(i);
                        const double* g = s.grad_u.data() + cell * kSymbols;
                        const Context ctx = s.ctx[j];
                        const std::size_t wo = std::size_t(ctx.code) * kSymbols * H;
                        for (std::size_t c = 0; c < kSymbols; ++c) {
                            const double gc = scale * g[c];
                            if (gc == 0.0) continue;
                            if (gb) gb[ctx.code * kSymbols + c] += T(gc);
                            if (gs && ctx.length < spec.order) gs[ctx.length * kSymbols + c] += T(gc);
                            const T* wr = Wv.ptr() + wo + c * H;
                            for (std::size_t k = 0; k < H; ++k) {
                                if (gh) gh[(b * Lmax + i) * H + k] += T(gc * double(wr[k]));
                                if (gW) gW[wo + c * H + k] += T(gc * double(hi[k]));
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace ops
}  // namespace dynpool
