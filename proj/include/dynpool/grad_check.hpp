#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dynpool/blocks.hpp"
#include "dynpool/ctc.hpp"
#include "dynpool/dynamic_pooling.hpp"
#include "dynpool/rna.hpp"

// Finite-difference audit of analytic gradients. Each case builds the same computation in float
// (analytic backward) and double (central differences). The scalar probed is Σ_k out_k·R_k with
// R a fixed pseudo-random weight per flat index, so every output element matters.

namespace dynpool {

struct GradCheckOptions {
    double eps = 1e-3;
    double rel_tol = 1e-2;
    double abs_floor = 1e-4;
    /// Largest number of elements probed per tensor (half the largest analytic entries, half random).
    std::size_t max_elements = 48;
};

struct TensorCheck {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0;  // |a − n| / max(|a|, |n|) over probed elements
    double max_abs_error = 0;
    std::size_t failures = 0;
    bool pass() const { return failures == 0; }
};

struct GradCheckReport {
    std::string op;
    std::uint64_t seed = 0;
    std::vector<TensorCheck> tensors;
    bool pass() const {
        return std::all_of(tensors.begin(), tensors.end(), [](const TensorCheck& t) { return t.pass(); });
    }
};

/// Weight of output element k in the probed scalar.
inline double probe_weight(std::size_t k) {
    std::uint64_t x = k * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull;
    x ^= x >> 31;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    return double(x >> 11) / double(1ull << 53) * 2.0 - 1.0;
}

template <class T>
double probe(const Tensor<T>& y) {
    double s = 0;
    for (std::size_t k = 0; k < y.size(); ++k) s += double(y[k]) * probe_weight(k);
    return s;
}

template <class T>
Var<T> probe_loss(Var<T> y) {
    Tensor<T> w(y.shape());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = T(probe_weight(k));
    return ops::weighted_sum(y, w);
}

struct GradCase {
    template <class T>
    using Build = std::function<Var<T>(Tape<T>&, ParameterStore<T>&, const std::vector<Var<T>>&)>;

    std::string name;
    std::vector<std::string> input_names;
    /// Random inputs in double precision.
    std::function<std::vector<Tensor<double>>(std::mt19937_64&)> make_inputs;
    /// Inputs that are differentiated (others are fed as constants).
    std::vector<bool> checked;
    Build<float> build_f;
    Build<double> build_d;
    /// Replaces the double forward when the analytic gradient is defined against a surrogate.
    std::function<double(const std::vector<Tensor<double>>&, ParameterStore<double>&)> numeric;
    bool check_parameters = true;
};

template <class U>
Tensor<U> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    Tensor<U> t(shape);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = U(d(rng));
    return t;
}

namespace detail {

inline std::vector<std::size_t> probe_indices(const Tensor<float>& analytic, std::size_t max_elements, std::mt19937_64& rng) {
    const std::size_t n = analytic.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n <= max_elements) return idx;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(analytic[a]) > std::abs(analytic[b]);
    });
    std::vector<std::size_t> out(idx.begin(), idx.begin() + std::ptrdiff_t(max_elements / 2));
    std::vector<std::size_t> rest(idx.begin() + std::ptrdiff_t(max_elements / 2), idx.end());
    std::shuffle(rest.begin(), rest.end(), rng);
    out.insert(out.end(), rest.begin(), rest.begin() + std::ptrdiff_t(max_elements - out.size()));
    std::sort(out.begin(), out.end());
    return out;
}

inline void compare(TensorCheck& tc, double a, double n, const GradCheckOptions& o) {
    const double diff = std::abs(a - n);
    const double scale = std::max(std::abs(a), std::abs(n));
    tc.max_abs_error = std::max(tc.max_abs_error, diff);
    if (scale > 0) tc.max_rel_error = std::max(tc.max_rel_error, diff / scale);
    if (diff > std::max(o.abs_floor, o.rel_tol * scale)) ++tc.failures;
    ++tc.checked;
}

}  // namespace detail

inline GradCheckReport grad_check(const GradCase& c, std::uint64_t seed, const GradCheckOptions& opts = {}) {
    GradCheckReport report;
    report.op = c.name;
    report.seed = seed;
    std::mt19937_64 rng(seed);
    const auto inputs = c.make_inputs(rng);

    // parameters are created once in double and copied to float
    ParameterStore<double> pd(seed ^ 0x5bd1e995ull);
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(tape.constant(t));
        c.build_d(tape, pd, vars);
    }
    ParameterStore<float> pf;
    pf.assign_from(pd);

    // analytic gradients in float
    Tape<float> tape;
    std::vector<Var<float>> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto t = inputs[i].cast<float>();
        vars.push_back(c.checked[i] ? tape.variable(std::move(t)) : tape.constant(std::move(t)));
    }
    pf.zero_grad();
    auto y = c.build_f(tape, pf, vars);
    tape.backward(probe_loss(y));

    auto eval = [&](const std::vector<Tensor<double>>& in, ParameterStore<double>& params) {
        if (c.numeric) return c.numeric(in, params);
        Tape<double> t;
        std::vector<Var<double>> v;
        for (const auto& x : in) v.push_back(t.constant(x));
        return probe(c.build_d(t, params, v).value());
    };

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!c.checked[i]) continue;
        TensorCheck tc;
        tc.name = i < c.input_names.size() ? c.input_names[i] : "input" + std::to_string(i);
        const Tensor<float>& analytic = tape.grad(vars[i]);
        auto in = inputs;
        for (std::size_t k : detail::probe_indices(analytic, opts.max_elements, rng)) {
            const double x0 = in[i][k];
            in[i][k] = x0 + opts.eps;
            const double up = eval(in, pd);
            in[i][k] = x0 - opts.eps;
            const double down = eval(in, pd);
            in[i][k] = x0;
            detail::compare(tc, analytic[k], (up - down) / (2 * opts.eps), opts);
        }
        report.tensors.push_back(tc);
    }
    if (c.check_parameters) {
        for (std::size_t p = 0; p < pf.size(); ++p) {
            if (!pf[p].trainable) continue;
            TensorCheck tc;
            tc.name = pf[p].name;
            auto& param = pd[p];
            for (std::size_t k : detail::probe_indices(pf[p].grad, opts.max_elements, rng)) {
                const double x0 = param.value[k];
                param.value[k] = x0 + opts.eps;
                const double up = eval(inputs, pd);
                param.value[k] = x0 - opts.eps;
                const double down = eval(inputs, pd);
                param.value[k] = x0;
                detail::compare(tc, pf[p].grad[k], (up - down) / (2 * opts.eps), opts);
            }
            report.tensors.push_back(tc);
        }
    }
    return report;
}

// ---- registry ----

namespace gradcases {

template <class Fn>
GradCase unary(std::string name, Shape shape, Fn&& fn) {
    GradCase c;
    c.name = std::move(name);
    c.input_names = {"x"};
    c.make_inputs = [shape](std::mt19937_64& rng) { return std::vector<Tensor<double>>{random_tensor<double>(shape, rng)}; };
    c.checked = {true};
    c.build_f = [fn](Tape<float>& t, ParameterStore<float>& s, const std::vector<Var<float>>& in) { return fn(t, s, in[0]); };
    c.build_d = [fn](Tape<double>& t, ParameterStore<double>& s, const std::vector<Var<double>>& in) { return fn(t, s, in[0]); };
    return c;
}

/// Warped positions of m·ratio that keep every point at least `margin` from an integer, so that
/// the finite-difference step never crosses a knot of the triangular weights.
inline bool knot_free(const Tensor<double>& m, std::size_t B, std::size_t Tn, double ratio, double margin) {
    for (std::size_t b = 0; b < B; ++b) {
        double p = 0;
        for (std::size_t i = 0; i < Tn; ++i) {
            p += m[b * Tn + i] * ratio;
            if (std::abs(p - std::round(p)) < margin) return false;
        }
    }
    return true;
}

/// Length factors for a dynamic-pooling check; train mode renormalizes to `target`.
inline Tensor<double> pool_factors(std::mt19937_64& rng, std::size_t B, std::size_t Tn, double target) {
    for (;;) {
        auto m = random_tensor<double>(Shape{B, Tn, 1}, rng, 0.15, 0.95);
        double mean = 0;
        for (double v : m.data()) mean += v;
        mean /= double(m.size());
        if (knot_free(m, B, Tn, target / mean, 0.02)) return m;
    }
}

/// Double-precision forward of dynamic pooling where p_k only follows changes of m'_j for
/// k − window ≤ j ≤ k (positions computed from the unperturbed factors m0 otherwise).
inline Tensor<double> truncated_pool_reference(const Tensor<double>& f, const Tensor<double>& w, const Tensor<double>& m,
                                               const Tensor<double>& m0, double target, int window) {
    const std::size_t B = f.dim(0), Tn = f.dim(1), C = f.dim(2);
    auto renorm = [&](const Tensor<double>& mm) {
        double mean = 0;
        for (double v : mm.data()) mean += v;
        mean /= double(mm.size());
        std::vector<double> r(mm.size());
        for (std::size_t k = 0; k < mm.size(); ++k) r[k] = mm[k] * target / mean;
        return r;
    };
    const auto mp = renorm(m), mp0 = renorm(m0);
    std::vector<std::vector<double>> pos(B, std::vector<double>(Tn));
    std::size_t Lmax = 0;
    std::vector<std::size_t> lens(B);
    for (std::size_t b = 0; b < B; ++b) {
        double p0 = 0;
        for (std::size_t k = 0; k < Tn; ++k) {
            p0 += mp0[b * Tn + k];
            double delta = 0;
            const std::size_t lo = window < 0 || k < std::size_t(window) ? 0 : k - std::size_t(window);
            for (std::size_t j = lo; j <= k; ++j) delta += mp[b * Tn + j] - mp0[b * Tn + j];
            pos[b][k] = p0 + delta;
        }
        lens[b] = pooled_length(pos[b][Tn - 1]);
        Lmax = std::max(Lmax, lens[b]);
    }
    Tensor<double> y(Shape{B, Lmax, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < lens[b]; ++o)
            for (std::size_t i = 0; i < Tn; ++i) {
                const double tri = std::max(0.0, 1.0 - std::abs(pos[b][i] - double(o + 1)));
                if (tri == 0) continue;
                for (std::size_t c = 0; c < C; ++c) y.at(b, o, c) += f[(b * Tn + i) * C + c] * w[b * Tn + i] * tri;
            }
    return y;
}

inline std::vector<GradCase> registry() {
    std::vector<GradCase> cases;
    cases.push_back(unary("sigmoid", {4}, [](auto&, auto&, auto x) { return ops::sigmoid(x); }));
    cases.push_back(unary("swish", {2, 5, 3}, [](auto&, auto&, auto x) { return ops::swish(x); }));
    cases.push_back(unary("glu", {2, 5, 4}, [](auto&, auto&, auto x) { return ops::glu(x); }));
    cases.push_back(unary("mul", {3, 4}, [](auto&, auto&, auto x) { return ops::mul(x, ops::sigmoid(x)); }));
    cases.push_back(unary("cross_shift", {2, 6, 4}, [](auto&, auto&, auto x) { return ops::cross_shift(x); }));
    cases.push_back(unary("fold_unfold", {2, 7, 3}, [](auto&, auto&, auto x) {
        return ops::unfold_time(ops::swish(ops::fold_time(x, 3)), 3, 7);
    }));
    cases.push_back(unary("mean_pool", {2, 8, 3}, [](auto&, auto&, auto x) { return ops::mean_pool(x, 3); }));
    cases.push_back(unary("mask_time", {2, 6, 3}, [](auto&, auto&, auto x) { return ops::mask_time(x, {6, 4}); }));
    cases.push_back(unary("conv1d", {1, 8, 2}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return Conv1d<T>(s, "conv", Conv1dSpec(2, 3, 3))(x);
    }));
    cases.push_back(unary("conv1d_strided", {2, 10, 3}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return Conv1d<T>(s, "conv", Conv1dSpec(3, 4, 5, 3))(x);
    }));
    cases.push_back(unary("conv1d_pointwise", {2, 5, 3}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return Conv1d<T>(s, "pw", Conv1dSpec(3, 2, 1))(x);
    }));
    cases.push_back(unary("depthwise_conv1d", {2, 9, 3}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return Conv1d<T>(s, "dw", Conv1dSpec(3, 3, 5, 2, true))(x);
    }));
    cases.push_back(unary("batch_norm_train", {3, 5, 2}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return BatchNorm<T>(s, "bn", 2)(x, Mode::train, {5, 3, 4});
    }));
    cases.push_back(unary("batch_norm_eval", {2, 4, 3}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return BatchNorm<T>(s, "bn", 3)(x, Mode::eval);
    }));
    cases.push_back(unary("rf_groups", {1, 12, 6}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return RFGroupDepthwise<T>(s, "rf", 6)(x);
    }));
    cases.push_back(unary("s2d_heron", {2, 7, 2}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return SpaceToDepth<T>(s, "s2d", 2, 4, S2DStyle::heron)(x);
    }));
    cases.push_back(unary("s2d_osprey", {2, 7, 2}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return SpaceToDepth<T>(s, "s2d", 2, 4, S2DStyle::osprey)(x);
    }));
    cases.push_back(unary("d2s_heron", {2, 3, 4}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return DepthToSpace<T>(s, "d2s", 4, 2, S2DStyle::heron)(x, 8);
    }));
    cases.push_back(unary("d2s_osprey", {2, 3, 4}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        return DepthToSpace<T>(s, "d2s", 4, 2, S2DStyle::osprey)(x, 8);
    }));
    cases.push_back(unary("block_glu_osprey", {2, 7, 4}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        BlockSpec b;
        b.c_in = b.c_out = 4;
        b.repeats = 2;
        b.kernel = 3;
        b.activation = Activation::glu;
        b.s2d = S2DStyle::osprey;
        b.cross_shift = true;
        return Block<T>(s, "block", b)(x, Mode::train, {7, 5});
    }));
    cases.push_back(unary("block_rf_heron", {2, 6, 6}, [](auto&, auto& s, auto x) {
        using T = typename std::decay_t<decltype(x)>::value_type;
        BlockSpec b;
        b.c_in = b.c_out = 6;
        b.repeats = 1;
        b.kernel = 0;
        b.s2d = S2DStyle::heron;
        return Block<T>(s, "block", b)(x, Mode::train);
    }));

    // dynamic pooling: exact gradients for f and w (m fixed)
    {
        GradCase c;
        c.name = "dynamic_pool_fw";
        c.input_names = {"f", "w", "m"};
        c.make_inputs = [](std::mt19937_64& rng) {
            return std::vector<Tensor<double>>{random_tensor<double>({2, 12, 3}, rng, 0.05, 0.95),
                                               random_tensor<double>({2, 12, 1}, rng, 0.05, 0.95),
                                               pool_factors(rng, 2, 12, 0.4)};
        };
        c.checked = {true, true, false};
        auto build = [](auto&, auto&, const auto& in) {
            DynPoolOptions o;
            o.target_factor = 0.4;
            DynPoolState st;
            return ops::dynamic_pool(in[0], in[1], in[2], o, Mode::train, st);
        };
        c.build_f = build;
        c.build_d = build;
        cases.push_back(c);
    }
    // dynamic pooling: length-factor path against the truncated surrogate
    for (int window : {20, 3}) {
        GradCase c;
        c.name = "dynamic_pool_m_window" + std::to_string(window);
        c.input_names = {"f", "w", "m"};
        c.make_inputs = [](std::mt19937_64& rng) {
            return std::vector<Tensor<double>>{random_tensor<double>({2, 30, 2}, rng, 0.05, 0.95),
                                               random_tensor<double>({2, 30, 1}, rng, 0.05, 0.95),
                                               pool_factors(rng, 2, 30, 0.5)};
        };
        c.checked = {false, false, true};
        auto build = [window](auto&, auto&, const auto& in) {
            DynPoolOptions o;
            o.target_factor = 0.5;
            o.trunc_window = window;
            DynPoolState st;
            return ops::dynamic_pool(in[0], in[1], in[2], o, Mode::train, st);
        };
        c.build_f = build;
        c.build_d = build;
        // m0 is the unperturbed draw, remembered by make_inputs
        auto base = std::make_shared<Tensor<double>>();
        c.numeric = [window, base](const std::vector<Tensor<double>>& in, ParameterStore<double>&) {
            return probe(truncated_pool_reference(in[0], in[1], in[2], *base, 0.5, window));
        };
        c.make_inputs = [inner = c.make_inputs, base](std::mt19937_64& rng) {
            auto v = inner(rng);
            *base = v[2];
            return v;
        };
        cases.push_back(c);
    }

    {
        GradCase c;
        c.name = "ctc_loss";
        c.input_names = {"logits"};
        c.make_inputs = [](std::mt19937_64& rng) {
            return std::vector<Tensor<double>>{random_tensor<double>({2, 7, 5}, rng, -2, 2)};
        };
        c.checked = {true};
        auto build = [](auto&, auto&, const auto& in) { return ops::ctc_loss(in[0], {7, 5}, {"ACGA", "TT"}); };
        c.build_f = build;
        c.build_d = build;
        cases.push_back(c);
    }
    for (std::uint32_t order : {2u, 6u}) {
        GradCase c;
        c.name = "rna_loss_k" + std::to_string(order);
        c.input_names = {"h"};
        c.make_inputs = [](std::mt19937_64& rng) {
            return std::vector<Tensor<double>>{random_tensor<double>({2, 6, 3}, rng, -1, 1)};
        };
        c.checked = {true};
        auto build = [order](auto&, auto& s, const auto& in) {
            using T = typename std::decay_t<decltype(in[0])>::value_type;
            // random (not shared) table so that contexts differ
            auto randn = [](Tensor<T>& t, std::mt19937_64& rng) {
                std::normal_distribution<double> d(0.0, 0.7);
                for (auto& v : t.data()) v = T(d(rng));
            };
            const RnaHeadSpec spec{3, order};
            s.get_or_create("rna.table_weight", Shape{spec.contexts(), kSymbols, 3}, randn);
            s.get_or_create("rna.table_bias", Shape{spec.contexts(), kSymbols}, randn);
            s.get_or_create("rna.start_bias", Shape{order, kSymbols}, randn);
            RnaHead<T> head(s, "rna", spec);
            return ops::rna_loss(in[0], {6, 4}, {"ACAG", "GT"}, head);
        };
        c.build_f = build;
        c.build_d = build;
        cases.push_back(c);
    }
    return cases;
}

}  // namespace gradcases
}  // namespace dynpool
