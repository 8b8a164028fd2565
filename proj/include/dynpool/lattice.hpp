#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dynpool/alphabet.hpp"

// Alignment lattice shared by the CTC and recurrent-neural-aligner models. After step i the state
// j counts how many target symbols were emitted; each step either emits a blank (stay) or the next
// target symbol (advance). `lq(i, j)` returns the five log-probabilities at step i given that j
// symbols were emitted so far.

namespace dynpool {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct LatticeBand {
    std::size_t steps = 0;
    std::size_t target = 0;

    std::size_t lo(std::size_t i) const { return target + i > steps ? target + i - steps : 0; }
    std::size_t hi(std::size_t i) const { return std::min(i, target); }
    std::size_t at(std::size_t i, std::size_t j) const { return i * (target + 1) + j; }
};

struct LatticeResult {
    LatticeBand band;
    std::vector<double> alpha;  // (steps+1) x (target+1)
    std::vector<double> beta;
    double log_likelihood = kNegInf;
};

template <class LQ>
LatticeResult lattice_forward(std::size_t steps, std::span<const std::uint8_t> z, LQ&& lq, bool with_beta) {
    const std::size_t N = z.size();
    if (steps < N) throw UnalignableError(steps, N);
    LatticeResult r;
    r.band = {steps, N};
    const auto& band = r.band;
    r.alpha.assign((steps + 1) * (N + 1), kNegInf);
    r.alpha[band.at(0, 0)] = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        for (std::size_t j = band.lo(i); j <= band.hi(i); ++j) {
            const double a = r.alpha[band.at(i, j)];
            if (a == kNegInf) continue;
            const double* q = lq(i, j);
            double& stay = r.alpha[band.at(i + 1, j)];
            stay = log_sum_exp(stay, a + q[kBlank]);
            if (j < N) {
                double& adv = r.alpha[band.at(i + 1, j + 1)];
                adv = log_sum_exp(adv, a + q[z[j]]);
            }
        }
    }
    r.log_likelihood = r.alpha[band.at(steps, N)];
    if (!with_beta) return r;
    r.beta.assign((steps + 1) * (N + 1), kNegInf);
    r.beta[band.at(steps, N)] = 0.0;
    for (std::size_t i = steps; i-- > 0;) {
        for (std::size_t j = band.lo(i); j <= band.hi(i); ++j) {
            const double* q = lq(i, j);
            double b = r.beta[band.at(i + 1, j)] + q[kBlank];
            if (j < N) b = log_sum_exp(b, r.beta[band.at(i + 1, j + 1)] + q[z[j]]);
            r.beta[band.at(i, j)] = b;
        }
    }
    return r;
}

/// Calls visit(i, j, occupancy, p_stay, p_advance) for every reachable lattice cell, where the
/// values are posterior probabilities of being in state j before step i and of each transition.
template <class LQ, class Visit>
void lattice_posteriors(const LatticeResult& r, std::span<const std::uint8_t> z, LQ&& lq, Visit&& visit) {
    const auto& band = r.band;
    const double lp = r.log_likelihood;
    for (std::size_t i = 0; i < band.steps; ++i) {
        for (std::size_t j = band.lo(i); j <= band.hi(i); ++j) {
            const double a = r.alpha[band.at(i, j)];
            if (a == kNegInf) continue;
            const double* q = lq(i, j);
            const double occ = std::exp(a + r.beta[band.at(i, j)] - lp);
            const double stay = std::exp(a + q[kBlank] + r.beta[band.at(i + 1, j)] - lp);
            const double adv = j < band.target ? std::exp(a + q[z[j]] + r.beta[band.at(i + 1, j + 1)] - lp) : 0.0;
            visit(i, j, occ, stay, adv);
        }
    }
}

/// Best single path; returns the step index at which each target symbol is emitted.
template <class LQ>
std::vector<std::size_t> lattice_viterbi(std::size_t steps, std::span<const std::uint8_t> z, LQ&& lq) {
    const std::size_t N = z.size();
    if (steps < N) throw UnalignableError(steps, N);
    const LatticeBand band{steps, N};
    std::vector<double> score((steps + 1) * (N + 1), kNegInf);
    std::vector<std::uint8_t> came_by_emit((steps + 1) * (N + 1), 0);
    score[0] = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        for (std::size_t j = band.lo(i); j <= band.hi(i); ++j) {
            const double s = score[band.at(i, j)];
            if (s == kNegInf) continue;
            const double* q = lq(i, j);
            if (s + q[kBlank] > score[band.at(i + 1, j)]) {
                score[band.at(i + 1, j)] = s + q[kBlank];
                came_by_emit[band.at(i + 1, j)] = 0;
            }
            if (j < N && s + q[z[j]] > score[band.at(i + 1, j + 1)]) {
                score[band.at(i + 1, j + 1)] = s + q[z[j]];
                came_by_emit[band.at(i + 1, j + 1)] = 1;
            }
        }
    }
    std::vector<std::size_t> emit_step(N);
    std::size_t j = N;
    for (std::size_t i = steps; i > 0; --i) {
        if (came_by_emit[band.at(i, j)]) {
            --j;
            emit_step[j] = i - 1;
        }
    }
    return emit_step;
}

}  // namespace dynpool
