#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dynpool/tape.hpp"

namespace dynpool {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay over the trainable parameters of a store.
template <class T>
class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    /// Applies one update with learning rate `lr` using each parameter's accumulated grad.
    /// Throws before touching any parameter if a gradient is not finite.
    void step(ParameterStore<T>& store, double lr) {
        for (std::size_t i = 0; i < store.size(); ++i) {
            const auto& p = store[i];
            if (!p.trainable) continue;
            if (!p.grad.all_finite()) throw NumericError("non-finite gradient for parameter " + p.name);
        }
        if (m_.size() < store.size()) {
            m_.resize(store.size());
            v_.resize(store.size());
        }
        ++t_;
        const double c1 = 1.0 - std::pow(opts_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(opts_.beta2, double(t_));
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& p = store[i];
            if (!p.trainable) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            if (m.size() != p.value.size()) {
                m.assign(p.value.size(), 0.0);
                v.assign(p.value.size(), 0.0);
            }
            for (std::size_t k = 0; k < p.value.size(); ++k) {
                const double g = p.grad[k];
                m[k] = opts_.beta1 * m[k] + (1 - opts_.beta1) * g;
                v[k] = opts_.beta2 * v[k] + (1 - opts_.beta2) * g * g;
                double x = p.value[k];
                x -= lr * opts_.weight_decay * x;
                x -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.eps);
                p.value[k] = T(x);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    AdamWOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Linear warmup, then cosine annealing with warm restarts; cycle c lasts first_cycle·2^c steps.
struct ScheduleSpec {
    double max_lr = 1e-3;
    std::size_t warmup = 100;
    std::size_t first_cycle = 400;
    std::size_t cycles = 4;

    std::size_t cycle_length(std::size_t c) const { return first_cycle << c; }
    std::size_t total_steps() const {
        std::size_t n = warmup;
        for (std::size_t c = 0; c < cycles; ++c) n += cycle_length(c);
        return n;
    }
    /// Step index at which cycle c ends (exclusive).
    std::size_t cycle_end(std::size_t c) const {
        std::size_t n = warmup;
        for (std::size_t k = 0; k <= c; ++k) n += cycle_length(k);
        return n;
    }
};

inline double lr_at(std::size_t step, const ScheduleSpec& s) {
    if (step < s.warmup) return s.max_lr * double(step) / double(s.warmup);
    std::size_t t = step - s.warmup;
    for (std::size_t c = 0; c < s.cycles; ++c) {
        const std::size_t len = s.cycle_length(c);
        if (t < len) return 0.5 * s.max_lr * (1.0 + std::cos(std::numbers::pi * double(t) / double(len)));
        t -= len;
    }
    return 0.0;
}

}  // namespace dynpool
