#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dynpool/tape.hpp"

namespace dynpool {

/// Geometry of a 1-D convolution. Output length is ceil(T / stride) with floor(kernel/2) zeros
/// of padding on both ends.
struct Conv1dSpec {
    std::size_t c_in = 1;
    std::size_t c_out = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    bool depthwise = false;

    Conv1dSpec() = default;
    Conv1dSpec(std::size_t in, std::size_t out, std::size_t k, std::size_t s = 1, bool dw = false)
        : c_in(in), c_out(out), kernel(k), stride(s), depthwise(dw) {
        validate();
    }

    void validate() const {
        if (kernel == 0 || kernel % 2 == 0) throw ShapeError("conv1d", "kernel size must be odd and positive, got " + std::to_string(kernel));
        if (stride == 0) throw ShapeError("conv1d", "stride must be positive");
        if (c_in == 0 || c_out == 0) throw ShapeError("conv1d", "channel counts must be positive");
        if (depthwise && c_in != c_out) throw ShapeError("conv1d", "depthwise convolution needs c_in == c_out");
    }

    Shape weight_shape() const { return depthwise ? Shape{c_out, kernel} : Shape{c_out, kernel, c_in}; }
    std::size_t fan_in() const { return depthwise ? kernel : kernel * c_in; }
    std::size_t output_length(std::size_t t) const { return (t + stride - 1) / stride; }
};

namespace ops {

/// Y[t, j] = Σ_{d, i} X[t·s + d − ⌊D/2⌋, i]·W[j, d, i] + B[j], W of shape [C_out, D, C_in].
/// `bias` may be an invalid Var for no bias.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride) {
    expect_rank("conv1d", x.shape(), 3);
    expect_rank("conv1d weight", weight.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), Cin = x.dim(2);
    const std::size_t Cout = weight.dim(0), D = weight.dim(1);
    if (weight.dim(2) != Cin) throw ShapeError("conv1d", Shape{Cout, D, Cin}, weight.shape());
    if (D % 2 == 0) throw ShapeError("conv1d", "even kernel size " + std::to_string(D));
    if (bias.valid() && bias.shape() != Shape{Cout}) throw ShapeError("conv1d bias", Shape{Cout}, bias.shape());
    const std::size_t Lo = (L + stride - 1) / stride;
    const std::ptrdiff_t half = std::ptrdiff_t(D / 2);

    const auto& W = weight.value();
    std::vector<T> Wt(D * Cin * Cout);  // [D, Cin, Cout]
    for (std::size_t j = 0; j < Cout; ++j)
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t i = 0; i < Cin; ++i) Wt[(d * Cin + i) * Cout + j] = W[(j * D + d) * Cin + i];

    Tensor<T> y(Shape{B, Lo, Cout});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < Lo; ++t) {
            T* yr = y.ptr() + (b * Lo + t) * Cout;
            if (bias.valid()) std::copy_n(bias.value().ptr(), Cout, yr);
            for (std::size_t d = 0; d < D; ++d) {
                const std::ptrdiff_t tin = std::ptrdiff_t(t * stride + d) - half;
                if (tin < 0 || tin >= std::ptrdiff_t(L)) continue;
                const T* xr = xv.ptr() + (b * L + std::size_t(tin)) * Cin;
                for (std::size_t i = 0; i < Cin; ++i) {
                    const T xi = xr[i];
                    const T* wr = Wt.data() + (d * Cin + i) * Cout;
                    for (std::size_t j = 0; j < Cout; ++j) yr[j] += xi * wr[j];
                }
            }
        }
    }

    Tape<T>& tape = *x.tape;
    const bool rg = bias.valid() ? tape.any_requires_grad({x, weight, bias}) : tape.any_requires_grad({x, weight});
    return tape.record("conv1d", std::move(y), rg, [=, out = tape.size()](Tape<T>& tp) {
        const auto& gy = tp.grad(Var<T>{&tp, out});
        const auto& xv = tp.value(x);
        const auto& W = tp.value(weight);
        const bool gx_on = tp.requires_grad(x);
        const bool gw_on = tp.requires_grad(weight);
        T* gx = gx_on ? tp.grad(x).ptr() : nullptr;
        T* gw = gw_on ? tp.grad(weight).ptr() : nullptr;
        if (bias.valid() && tp.requires_grad(bias)) {
            auto& gb = tp.grad(bias);
            for (std::size_t r = 0; r < B * Lo; ++r)
                for (std::size_t j = 0; j < Cout; ++j) gb[j] += gy[r * Cout + j];
        }
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < Lo; ++t) {
                const T* gr = gy.ptr() + (b * Lo + t) * Cout;
                for (std::size_t d = 0; d < D; ++d) {
                    const std::ptrdiff_t tin = std::ptrdiff_t(t * stride + d) - half;
                    if (tin < 0 || tin >= std::ptrdiff_t(L)) continue;
                    const std::size_t xoff = (b * L + std::size_t(tin)) * Cin;
                    const T* xr = xv.ptr() + xoff;
                    for (std::size_t j = 0; j < Cout; ++j) {
                        const T g = gr[j];
                        if (g == T(0)) continue;
                        const std::size_t woff = (j * D + d) * Cin;
                        if (gx_on) {
                            const T* wr = W.ptr() + woff;
                            T* gxr = gx + xoff;
                            for (std::size_t i = 0; i < Cin; ++i) gxr[i] += g * wr[i];
                        }
                        if (gw_on) {
                            T* gwr = gw + woff;
                            for (std::size_t i = 0; i < Cin; ++i) gwr[i] += g * xr[i];
                        }
                    }
                }
            }
        }
    });
}

/// Depthwise convolution: channel c of the output reads only channel c of the input.
/// W has shape [C, D].
template <class T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride) {
    expect_rank("depthwise_conv1d", x.shape(), 3);
    expect_rank("depthwise_conv1d weight", weight.shape(), 2);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    const std::size_t D = weight.dim(1);
    if (weight.dim(0) != C) throw ShapeError("depthwise_conv1d", Shape{C, D}, weight.shape());
    if (D % 2 == 0) throw ShapeError("depthwise_conv1d", "even kernel size " + std::to_string(D));
    if (bias.valid() && bias.shape() != Shape{C}) throw ShapeError("depthwise_conv1d bias", Shape{C}, bias.shape());
    const std::size_t Lo = (L + stride - 1) / stride;
    const std::ptrdiff_t half = std::ptrdiff_t(D / 2);

    const auto& W = weight.value();
    std::vector<T> Wt(D * C);  // [D, C]
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < D; ++d) Wt[d * C + c] = W[c * D + d];

    Tensor<T> y(Shape{B, Lo, C});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < Lo; ++t) {
            T* yr = y.ptr() + (b * Lo + t) * C;
            if (bias.valid()) std::copy_n(bias.value().ptr(), C, yr);
            for (std::size_t d = 0; d < D; ++d) {
                const std::ptrdiff_t tin = std::ptrdiff_t(t * stride + d) - half;
                if (tin < 0 || tin >= std::ptrdiff_t(L)) continue;
                const T* xr = xv.ptr() + (b * L + std::size_t(tin)) * C;
                const T* wr = Wt.data() + d * C;
                for (std::size_t c = 0; c < C; ++c) yr[c] += xr[c] * wr[c];
            }
        }
    }

    Tape<T>& tape = *x.tape;
    const bool rg = bias.valid() ? tape.any_requires_grad({x, weight, bias}) : tape.any_requires_grad({x, weight});
    return tape.record("depthwise_conv1d", std::move(y), rg, [=, Wt = std::move(Wt), out = tape.size()](Tape<T>& tp) {
        const auto& gy = tp.grad(Var<T>{&tp, out});
        const auto& xv = tp.value(x);
        const bool gx_on = tp.requires_grad(x);
        const bool gw_on = tp.requires_grad(weight);
        T* gx = gx_on ? tp.grad(x).ptr() : nullptr;
        std::vector<T> gwt(gw_on ? D * C : 0);
        if (bias.valid() && tp.requires_grad(bias)) {
            auto& gb = tp.grad(bias);
            for (std::size_t r = 0; r < B * Lo; ++r)
                for (std::size_t c = 0; c < C; ++c) gb[c] += gy[r * C + c];
        }
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < Lo; ++t) {
                const T* gr = gy.ptr() + (b * Lo + t) * C;
                for (std::size_t d = 0; d < D; ++d) {
                    const std::ptrdiff_t tin = std::ptrdiff_t(t * stride + d) - half;
                    if (tin < 0 || tin >= std::ptrdiff_t(L)) continue;
                    const std::size_t xoff = (b * L + std::size_t(tin)) * C;
                    if (gx_on) {
                        const T* wr = Wt.data() + d * C;
                        T* gxr = gx + xoff;
                        for (std::size_t c = 0; c < C; ++c) gxr[c] += gr[c] * wr[c];
                    }
                    if (gw_on) {
                        const T* xr = xv.ptr() + xoff;
                        T* gwr = gwt.data() + d * C;
                        for (std::size_t c = 0; c < C; ++c) gwr[c] += gr[c] * xr[c];
                    }
                }
            }
        }
        if (gw_on) {
            auto& gw = tp.grad(weight);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < D; ++d) gw[c * D + d] += gwt[d * C + c];
        }
    });
}

}  // namespace ops

/// Fan-in scaled normal initialization, std = sqrt(2 / fan_in).
template <class T>
auto kaiming_init(std::size_t fan_in) {
    return [fan_in](Tensor<T>& w, std::mt19937_64& rng) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
        for (auto& v : w.data()) v = T(dist(rng));
    };
}

/// Copies the first half of the output dimension onto the second half, so that a following
/// GLU initially computes the same function as Swish on the first half.
template <class T>
void glu_init(Tensor<T>& weight) {
    const std::size_t rows = weight.dim(0);
    if (rows % 2 != 0) throw ShapeError("glu_init", "output dimension must be even, got " + std::to_string(rows));
    const std::size_t row_size = weight.size() / rows;
    const std::size_t half = rows / 2 * row_size;
    std::copy_n(weight.ptr(), half, weight.ptr() + half);
}

/// Convolution layer with owned parameters `<name>.weight` and `<name>.bias`.
template <class T>
class Conv1d {
public:
    Conv1d() = default;

    /// `weight_init` replaces the default fan-in initialization; it only runs when the weight is created.
    Conv1d(ParameterStore<T>& store, const std::string& name, const Conv1dSpec& spec, bool with_bias = true,
           typename ParameterStore<T>::Init weight_init = nullptr)
        : spec_(spec) {
        spec_.validate();
        if (!weight_init) weight_init = kaiming_init<T>(spec_.fan_in());
        weight_ = &store.get_or_create(name + ".weight", spec_.weight_shape(), weight_init);
        if (with_bias) bias_ = &store.get_or_create(name + ".bias", Shape{spec_.c_out}, nullptr);
    }

    Var<T> operator()(Var<T> x) const {
        Tape<T>& tape = *x.tape;
        if (x.value().rank() != 3 || x.dim(2) != spec_.c_in) {
            throw ShapeError("conv1d", Shape{x.value().rank() ? x.dim(0) : 0, x.value().rank() > 1 ? x.dim(1) : 0, spec_.c_in}, x.shape());
        }
        Var<T> w = tape.parameter(*weight_);
        Var<T> b = bias_ ? tape.parameter(*bias_) : Var<T>{};
        return spec_.depthwise ? ops::depthwise_conv1d(x, w, b, spec_.stride) : ops::conv1d(x, w, b, spec_.stride);
    }

    const Conv1dSpec& spec() const { return spec_; }
    Parameter<T>& weight() const { return *weight_; }
    Parameter<T>* bias() const { return bias_; }

private:
    Conv1dSpec spec_;
    Parameter<T>* weight_ = nullptr;
    Parameter<T>* bias_ = nullptr;
};

}  // namespace dynpool
