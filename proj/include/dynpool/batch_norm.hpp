#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dynpool/tape.hpp"

namespace dynpool {

enum class Mode { train, eval };

struct BatchNormOptions {
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalization over all valid (batch, time) positions.
///
/// Train mode normalizes with batch statistics (biased variance) and folds them into the running
/// averages; eval mode uses the running averages. Positions past `lengths[b]` are output as zero.
template <class T>
class BatchNorm {
public:
    BatchNorm() = default;

    BatchNorm(ParameterStore<T>& store, const std::string& name, std::size_t channels, BatchNormOptions opts = {})
        : channels_(channels), opts_(opts) {
        auto ones = [](Tensor<T>& t, std::mt19937_64&) { t.fill(T(1)); };
        gamma_ = &store.get_or_create(name + ".gamma", Shape{channels}, ones);
        beta_ = &store.get_or_create(name + ".beta", Shape{channels}, nullptr);
        running_mean_ = &store.get_or_create(name + ".running_mean", Shape{channels}, nullptr, false);
        running_var_ = &store.get_or_create(name + ".running_var", Shape{channels}, ones, false);
    }

    Var<T> operator()(Var<T> x, Mode mode, const std::vector<std::size_t>& lengths = {}) const {
        expect_rank("batch_norm", x.shape(), 3);
        const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
        if (C != channels_) throw ShapeError("batch_norm", Shape{B, L, channels_}, x.shape());
        if (!lengths.empty() && lengths.size() != B) throw ShapeError("batch_norm", "expected " + std::to_string(B) + " lengths");
        auto valid_len = [&](std::size_t b) { return lengths.empty() ? L : std::min(lengths[b], L); };

        std::size_t count = 0;
        for (std::size_t b = 0; b < B; ++b) count += valid_len(b);

        const auto& xv = x.value();
        std::vector<T> mean(C), inv_std(C);
        if (mode == Mode::train) {
            if (count < 2) throw ShapeError("batch_norm", "train mode needs more than one valid position");
            std::vector<double> s(C, 0.0), ss(C, 0.0);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < valid_len(b); ++t) {
                    const T* xr = xv.ptr() + (b * L + t) * C;
                    for (std::size_t c = 0; c < C; ++c) s[c] += xr[c];
                }
            for (std::size_t c = 0; c < C; ++c) s[c] /= double(count);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < valid_len(b); ++t) {
                    const T* xr = xv.ptr() + (b * L + t) * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double d = double(xr[c]) - s[c];
                        ss[c] += d * d;
                    }
                }
            auto& rm = running_mean_->value;
            auto& rv = running_var_->value;
            for (std::size_t c = 0; c < C; ++c) {
                const double var = ss[c] / double(count);
                mean[c] = T(s[c]);
                inv_std[c] = T(1.0 / std::sqrt(var + opts_.eps));
                rm[c] = T((1.0 - opts_.momentum) * double(rm[c]) + opts_.momentum * s[c]);
                rv[c] = T((1.0 - opts_.momentum) * double(rv[c]) + opts_.momentum * var);
            }
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                mean[c] = running_mean_->value[c];
                inv_std[c] = T(1.0 / std::sqrt(double(running_var_->value[c]) + opts_.eps));
            }
        }

        Tape<T>& tape = *x.tape;
        Var<T> gamma = tape.parameter(*gamma_);
        Var<T> beta = tape.parameter(*beta_);
        const auto& g = gamma_->value;
        const auto& be = beta_->value;
        Tensor<T> y(x.shape());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < valid_len(b); ++t) {
                const T* xr = xv.ptr() + (b * L + t) * C;
                T* yr = y.ptr() + (b * L + t) * C;
                for (std::size_t c = 0; c < C; ++c) yr[c] = g[c] * ((xr[c] - mean[c]) * inv_std[c]) + be[c];
            }

        std::vector<std::size_t> lens(B);
        for (std::size_t b = 0; b < B; ++b) lens[b] = valid_len(b);
        const bool rg = tape.any_requires_grad({x, gamma, beta});
        return tape.record("batch_norm", std::move(y), rg,
                           [=, train = mode == Mode::train, out = tape.size()](Tape<T>& tp) {
                               const auto& gy = tp.grad(Var<T>{&tp, out});
                               const auto& xv = tp.value(x);
                               const auto& gv = tp.value(gamma);
                               std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t t = 0; t < lens[b]; ++t) {
                                       const std::size_t off = (b * L + t) * C;
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const double xh = double(xv[off + c] - mean[c]) * inv_std[c];
                                           sum_g[c] += gy[off + c];
                                           sum_gx[c] += double(gy[off + c]) * xh;
                                       }
                                   }
                               if (tp.requires_grad(gamma)) {
                                   auto& gg = tp.grad(gamma);
                                   for (std::size_t c = 0; c < C; ++c) gg[c] += T(sum_gx[c]);
                               }
                               if (tp.requires_grad(beta)) {
                                   auto& gb = tp.grad(beta);
                                   for (std::size_t c = 0; c < C; ++c) gb[c] += T(sum_g[c]);
                               }
                               if (!tp.requires_grad(x)) return;
                               auto& gx = tp.grad(x);
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t t = 0; t < lens[b]; ++t) {
                                       const std::size_t off = (b * L + t) * C;
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const double scale = double(gv[c]) * inv_std[c];
                                           if (train) {
                                               const double xh = double(xv[off + c] - mean[c]) * inv_std[c];
                                               const double n = double(count);
                                               gx[off + c] += T(scale * (double(gy[off + c]) - sum_g[c] / n - xh * sum_gx[c] / n));
                                           } else {
                                               gx[off + c] += T(scale * gy[off + c]);
                                           }
                                       }
                                   }
                           });
    }

    std::size_t channels() const { return channels_; }
    Parameter<T>& gamma() const { return *gamma_; }
    Parameter<T>& beta() const { return *beta_; }
    Parameter<T>& running_mean() const { return *running_mean_; }
    Parameter<T>& running_var() const { return *running_var_; }

private:
    std::size_t channels_ = 0;
    BatchNormOptions opts_;
    Parameter<T>* gamma_ = nullptr;
    Parameter<T>* beta_ = nullptr;
    Parameter<T>* running_mean_ = nullptr;
    Parameter<T>* running_var_ = nullptr;
};

}  // namespace dynpool
