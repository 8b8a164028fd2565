#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dynpool/alphabet.hpp"
#include "dynpool/lattice.hpp"
#include "dynpool/tape.hpp"

namespace dynpool {

/// −log Σ_{Y : R(Y) = z} Π_i p_i(y_i) for one read, logits of shape L x 5 (row-major).
template <class T>
double ctc_nll(std::span<const T> logits, std::string_view target) {
    const std::size_t L = logits.size() / kSymbols;
    const auto z = encode_bases(target);
    std::vector<std::array<double, kSymbols>> lp(L);
    for (std::size_t i = 0; i < L; ++i) lp[i] = log_softmax5(logits.data() + i * kSymbols);
    auto r = lattice_forward(L, z, [&](std::size_t i, std::size_t) { return lp[i].data(); }, false);
    return -r.log_likelihood;
}

namespace ops {

/// Per-read CTC negative log-likelihood for logits [B, L_max, 5] with valid lengths `lengths`.
/// Returns a [B] tensor. Reads with fewer steps than target bases throw UnalignableError unless
/// `alignable` is given, in which case they get loss 0, no gradient and a false flag.
template <class T>
Var<T> ctc_loss(Var<T> logits, const std::vector<std::size_t>& lengths, const std::vector<std::string>& targets,
                std::vector<bool>* alignable = nullptr) {
    expect_rank("ctc_loss", logits.shape(), 3);
    const std::size_t B = logits.dim(0), Lmax = logits.dim(1);
    if (logits.dim(2) != kSymbols) throw ShapeError("ctc_loss", Shape{B, Lmax, kSymbols}, logits.shape());
    if (lengths.size() != B || targets.size() != B) throw ShapeError("ctc_loss", "lengths/targets do not match batch size");
    if (alignable) alignable->assign(B, true);

    const auto& xv = logits.value();
    Tensor<T> loss(Shape{B});
    std::vector<std::vector<double>> grads(B);  // d loss_b / d logits, L_b x 5
    const bool rg = logits.requires_grad();
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t L = std::min(lengths[b], Lmax);
        const auto z = encode_bases(targets[b]);
        if (L < z.size()) {
            if (!alignable) throw UnalignableError(L, z.size());
            (*alignable)[b] = false;
            continue;
        }
        std::vector<std::array<double, kSymbols>> lp(L);
        for (std::size_t i = 0; i < L; ++i) lp[i] = log_softmax5(xv.ptr() + (b * Lmax + i) * kSymbols);
        auto lq = [&](std::size_t i, std::size_t) { return lp[i].data(); };
        auto r = lattice_forward(L, z, lq, rg);
        loss[b] = T(-r.log_likelihood);
        if (!rg) continue;
        auto& g = grads[b];
        g.assign(L * kSymbols, 0.0);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t c = 0; c < kSymbols; ++c) g[i * kSymbols + c] = std::exp(lp[i][c]);
        lattice_posteriors(r, z, lq, [&](std::size_t i, std::size_t j, double, double stay, double adv) {
            g[i * kSymbols + kBlank] -= stay;
            if (j < z.size()) g[i * kSymbols + z[j]] -= adv;
        });
    }
    Tape<T>& tape = *logits.tape;
    return tape.record("ctc_loss", std::move(loss), rg,
                       [logits, Lmax, grads = std::move(grads), out = tape.size()](Tape<T>& tp) {
                           const auto& gy = tp.grad(Var<T>{&tp, out});
                           auto& gx = tp.grad(logits);
                           for (std::size_t b = 0; b < grads.size(); ++b) {
                               const auto& g = grads[b];
                               for (std::size_t k = 0; k < g.size(); ++k) gx[b * Lmax * kSymbols + k] += T(double(gy[b]) * g[k]);
                           }
                       });
}

}  // namespace ops
}  // namespace dynpool
