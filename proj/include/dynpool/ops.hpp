#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dynpool/tape.hpp"

// Elementwise and structural differentiable operations on [B, T, C] sequences.

namespace dynpool::ops {

template <class T>
inline T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Var<T> identity(Var<T> x) {
    Tape<T>& tape = *x.tape;
    return tape.record("identity", x.value(), x.requires_grad(), [x, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
    Tape<T>& tape = *a.tape;
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    const bool rg = tape.any_requires_grad({a, b});
    return tape.record("add", std::move(y), rg, [a, b, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        for (Var<T> v : {a, b}) {
            if (!t.requires_grad(v)) continue;
            auto& g = t.grad(v);
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
    Tape<T>& tape = *a.tape;
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    const bool rg = tape.any_requires_grad({a, b});
    return tape.record("mul", std::move(y), rg, [a, b, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        if (t.requires_grad(a)) {
            auto& g = t.grad(a);
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            auto& g = t.grad(b);
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
    Tape<T>& tape = *x.tape;
    Tensor<T> y = x.value();
    for (auto& v : y.data()) v *= s;
    return tape.record("scale", std::move(y), x.requires_grad(), [x, s, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
    });
}

/// Sum of all entries as a scalar of shape [1].
template <class T>
Var<T> sum(Var<T> x) {
    Tape<T>& tape = *x.tape;
    double acc = 0;
    for (T v : x.value().data()) acc += v;
    return tape.record("sum", Tensor<T>(Shape{1}, T(acc)), x.requires_grad(), [x, out = tape.size()](Tape<T>& t) {
        const T g = t.grad(Var<T>{&t, out})[0];
        auto& gx = t.grad(x);
        for (auto& v : gx.data()) v += g;
    });
}

/// Σ x ⊙ w for a constant weight tensor of the same shape.
template <class T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
    if (x.shape() != w.shape()) throw ShapeError("weighted_sum", x.shape(), w.shape());
    Tape<T>& tape = *x.tape;
    double acc = 0;
    const auto& xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i) acc += double(xv[i]) * double(w[i]);
    return tape.record("weighted_sum", Tensor<T>(Shape{1}, T(acc)), x.requires_grad(),
                       [x, w, out = tape.size()](Tape<T>& t) {
                           const T g = t.grad(Var<T>{&t, out})[0];
                           auto& gx = t.grad(x);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
                       });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
    Tape<T>& tape = *x.tape;
    Tensor<T> y = x.value();
    for (auto& v : y.data()) v = sigmoid_scalar(v);
    return tape.record("sigmoid", std::move(y), x.requires_grad(), [x, out = tape.size()](Tape<T>& t) {
        Var<T> o{&t, out};
        const auto& gy = t.grad(o);
        const auto& yv = t.value(o);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
}

/// swish(x) = x·σ(x)
template <class T>
Var<T> swish(Var<T> x) {
    Tape<T>& tape = *x.tape;
    Tensor<T> y = x.value();
    for (auto& v : y.data()) v = v * sigmoid_scalar(v);
    return tape.record("swish", std::move(y), x.requires_grad(), [x, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        const auto& xv = t.value(x);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const T s = sigmoid_scalar(xv[i]);
            gx[i] += gy[i] * (s + xv[i] * s * (T(1) - s));
        }
    });
}

/// Gated linear unit over the last axis: first half x1, second half x2, output x1·σ(x2).
template <class T>
Var<T> glu(Var<T> x) {
    const Shape& s = x.shape();
    if (s.empty() || s.back() % 2 != 0) throw ShapeError("glu", "channel count must be even, got shape " + shape_string(s));
    const std::size_t c2 = s.back();
    const std::size_t c = c2 / 2;
    const std::size_t rows = x.value().size() / c2;
    Shape ys = s;
    ys.back() = c;
    Tensor<T> y(ys);
    const auto& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * c2;
        T* yr = y.ptr() + r * c;
        for (std::size_t k = 0; k < c; ++k) yr[k] = xr[k] * sigmoid_scalar(xr[c + k]);
    }
    Tape<T>& tape = *x.tape;
    return tape.record("glu", std::move(y), x.requires_grad(), [x, rows, c, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        const auto& xv = t.value(x);
        auto& gx = t.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.ptr() + r * 2 * c;
            T* gr = gx.ptr() + r * 2 * c;
            const T* g = gy.ptr() + r * c;
            for (std::size_t k = 0; k < c; ++k) {
                const T s = sigmoid_scalar(xr[c + k]);
                gr[k] += g[k] * s;
                gr[c + k] += g[k] * xr[k] * s * (T(1) - s);
            }
        }
    });
}

/// Channels [start, start+count) of a [B, T, C] tensor.
template <class T>
Var<T> channel_slice(Var<T> x, std::size_t start, std::size_t count) {
    expect_rank("channel_slice", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (start + count > C) throw ShapeError("channel_slice", "range exceeds " + std::to_string(C) + " channels");
    Tensor<T> y(Shape{B, L, count});
    const auto& xv = x.value();
    for (std::size_t r = 0; r < B * L; ++r) {
        std::copy_n(xv.ptr() + r * C + start, count, y.ptr() + r * count);
    }
    Tape<T>& tape = *x.tape;
    return tape.record("channel_slice", std::move(y), x.requires_grad(),
                       [x, start, count, C, rows = B * L, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           auto& gx = t.grad(x);
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t k = 0; k < count; ++k) gx[r * C + start + k] += gy[r * count + k];
                           }
                       });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels", "no inputs");
    const std::size_t B = parts[0].dim(0), L = parts[0].dim(1);
    std::size_t C = 0;
    for (const auto& p : parts) {
        expect_rank("concat_channels", p.shape(), 3);
        if (p.dim(0) != B || p.dim(1) != L) throw ShapeError("concat_channels", Shape{B, L, p.dim(2)}, p.shape());
        C += p.dim(2);
    }
    Tensor<T> y(Shape{B, L, C});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(2);
        const auto& pv = p.value();
        for (std::size_t r = 0; r < B * L; ++r) std::copy_n(pv.ptr() + r * pc, pc, y.ptr() + r * C + off);
        off += pc;
    }
    Tape<T>& tape = *parts[0].tape;
    return tape.record("concat_channels", std::move(y), tape.any_requires_grad(parts),
                       [parts, C, rows = B * L, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           std::size_t off = 0;
                           for (const auto& p : parts) {
                               const std::size_t pc = t.value(p).dim(2);
                               if (t.requires_grad(p)) {
                                   auto& g = t.grad(p);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t k = 0; k < pc; ++k) g[r * pc + k] += gy[r * C + off + k];
                                   }
                               }
                               off += pc;
                           }
                       });
}

/// Zeroes time steps at or beyond each read's valid length. Empty `lengths` is a no-op.
template <class T>
Var<T> mask_time(Var<T> x, const std::vector<std::size_t>& lengths) {
    if (lengths.empty()) return x;
    expect_rank("mask_time", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (lengths.size() != B) throw ShapeError("mask_time", "expected " + std::to_string(B) + " lengths");
    bool full = true;
    for (auto n : lengths) full = full && n >= L;
    if (full) return x;
    Tensor<T> y = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = std::min(lengths[b], L); t < L; ++t) {
            std::fill_n(y.ptr() + (b * L + t) * C, C, T(0));
        }
    }
    Tape<T>& tape = *x.tape;
    return tape.record("mask_time", std::move(y), x.requires_grad(),
                       [x, lengths, L, C, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           auto& gx = t.grad(x);
                           for (std::size_t b = 0; b < lengths.size(); ++b) {
                               const std::size_t n = std::min(lengths[b], L);
                               for (std::size_t i = 0; i < n * C; ++i) gx[b * L * C + i] += gy[b * L * C + i];
                           }
                       });
}

/// Groups `factor` consecutive time steps into channels: [B,T,C] -> [B,ceil(T/f),f·C].
/// The tail is zero padded.
template <class T>
Var<T> fold_time(Var<T> x, std::size_t factor) {
    expect_rank("fold_time", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    const std::size_t Lo = (L + factor - 1) / factor;
    Tensor<T> y(Shape{B, Lo, factor * C});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        std::copy_n(xv.ptr() + b * L * C, L * C, y.ptr() + b * Lo * factor * C);
    }
    Tape<T>& tape = *x.tape;
    return tape.record("fold_time", std::move(y), x.requires_grad(), [x, B, L, C, Lo, factor, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        auto& gx = t.grad(x);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < L * C; ++i) gx[b * L * C + i] += gy[b * Lo * factor * C + i];
        }
    });
}

/// Inverse of fold_time: [B,L,f·C] -> [B,out_len,C] with out_len <= f·L.
template <class T>
Var<T> unfold_time(Var<T> x, std::size_t factor, std::size_t out_len) {
    expect_rank("unfold_time", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), FC = x.dim(2);
    if (FC % factor != 0) throw ShapeError("unfold_time", "channels not divisible by factor");
    if (out_len > L * factor) throw ShapeError("unfold_time", "output longer than input");
    const std::size_t C = FC / factor;
    Tensor<T> y(Shape{B, out_len, C});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        std::copy_n(xv.ptr() + b * L * FC, out_len * C, y.ptr() + b * out_len * C);
    }
    Tape<T>& tape = *x.tape;
    return tape.record("unfold_time", std::move(y), x.requires_grad(),
                       [x, B, L, FC, C, out_len, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           auto& gx = t.grad(x);
                           for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t i = 0; i < out_len * C; ++i) gx[b * L * FC + i] += gy[b * out_len * C + i];
                           }
                       });
}

/// Window-s mean pooling with stride s: y_k = Σ_{i in window k} x_i·(1/s), zero padded tail.
template <class T>
Var<T> mean_pool(Var<T> x, std::size_t s) {
    expect_rank("mean_pool", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    const std::size_t Lo = (L + s - 1) / s;
    const T inv = T(1) / T(s);
    Tensor<T> y(Shape{B, Lo, C});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            const T* xr = xv.ptr() + (b * L + t) * C;
            T* yr = y.ptr() + (b * Lo + t / s) * C;
            for (std::size_t c = 0; c < C; ++c) yr[c] += xr[c] * inv;
        }
    }
    Tape<T>& tape = *x.tape;
    return tape.record("mean_pool", std::move(y), x.requires_grad(),
                       [x, B, L, C, Lo, s, inv, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           auto& gx = t.grad(x);
                           for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t i = 0; i < L; ++i) {
                                   for (std::size_t c = 0; c < C; ++c) {
                                       gx[(b * L + i) * C + c] += gy[(b * Lo + i / s) * C + c] * inv;
                                   }
                               }
                           }
                       });
}

/// Every s-th time step starting at 0.
template <class T>
Var<T> stride_pick(Var<T> x, std::size_t s) {
    expect_rank("stride_pick", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    const std::size_t Lo = (L + s - 1) / s;
    Tensor<T> y(Shape{B, Lo, C});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < Lo; ++k) std::copy_n(xv.ptr() + (b * L + k * s) * C, C, y.ptr() + (b * Lo + k) * C);
    }
    Tape<T>& tape = *x.tape;
    return tape.record("stride_pick", std::move(y), x.requires_grad(),
                       [x, B, L, C, Lo, s, out = tape.size()](Tape<T>& t) {
                           const auto& gy = t.grad(Var<T>{&t, out});
                           auto& gx = t.grad(x);
                           for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t k = 0; k < Lo; ++k) {
                                   for (std::size_t c = 0; c < C; ++c) gx[(b * L + k * s) * C + c] += gy[(b * Lo + k) * C + c];
                               }
                           }
                       });
}

/// Shifts the first channel half one step later in time and the second half one step earlier;
/// vacated slots are zero.
template <class T>
Var<T> cross_shift(Var<T> x) {
    expect_rank("cross_shift", x.shape(), 3);
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (C % 2 != 0) throw ShapeError("cross_shift", "channel count must be even, got " + std::to_string(C));
    const std::size_t h = C / 2;
    Tensor<T> y(x.shape());
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            T* yr = y.ptr() + (b * L + t) * C;
            if (t >= 1) std::copy_n(xv.ptr() + (b * L + t - 1) * C, h, yr);
            if (t + 1 < L) std::copy_n(xv.ptr() + (b * L + t + 1) * C + h, h, yr + h);
        }
    }
    Tape<T>& tape = *x.tape;
    return tape.record("cross_shift", std::move(y), x.requires_grad(), [x, B, L, C, h, out = tape.size()](Tape<T>& t) {
        const auto& gy = t.grad(Var<T>{&t, out});
        auto& gx = t.grad(x);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < L; ++s) {
                const T* gr = gy.ptr() + (b * L + s) * C;
                if (s >= 1) {
                    T* dst = gx.ptr() + (b * L + s - 1) * C;
                    for (std::size_t k = 0; k < h; ++k) dst[k] += gr[k];
                }
                if (s + 1 < L) {
                    T* dst = gx.ptr() + (b * L + s + 1) * C + h;
                    for (std::size_t k = 0; k < h; ++k) dst[k] += gr[h + k];
                }
            }
        }
    });
}

}  // namespace dynpool::ops
