#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

namespace dynpool {

struct Alignment {
    std::size_t matches = 0;
    std::size_t mismatches = 0;
    std::size_t insertions = 0;  // bases in the call absent from the reference
    std::size_t deletions = 0;   // reference bases missing from the call
    std::size_t columns() const { return matches + mismatches + insertions + deletions; }
    std::size_t edit_distance() const { return mismatches + insertions + deletions; }
};

/// Global unit-cost alignment of `call` against `ref`. Among optimal alignments the traceback
/// prefers a diagonal step, then a deletion, then an insertion.
inline Alignment align(std::string_view call, std::string_view ref) {
    const std::size_t n = call.size(), m = ref.size();
    std::vector<std::uint32_t> d((n + 1) * (m + 1));
    auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
    for (std::size_t i = 0; i <= n; ++i) d[at(i, 0)] = std::uint32_t(i);
    for (std::size_t j = 0; j <= m; ++j) d[at(0, j)] = std::uint32_t(j);
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j) {
            const std::uint32_t diag = d[at(i - 1, j - 1)] + (call[i - 1] == ref[j - 1] ? 0u : 1u);
            d[at(i, j)] = std::min({diag, d[at(i - 1, j)] + 1, d[at(i, j - 1)] + 1});
        }
    Alignment a;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && d[at(i, j)] == d[at(i - 1, j - 1)] + (call[i - 1] == ref[j - 1] ? 0u : 1u)) {
            (call[i - 1] == ref[j - 1] ? a.matches : a.mismatches)++;
            --i;
            --j;
        } else if (j > 0 && d[at(i, j)] == d[at(i, j - 1)] + 1) {
            ++a.deletions;
            --j;
        } else {
            ++a.insertions;
            --i;
        }
    }
    return a;
}

/// Fraction of alignment columns that are matches; 0 for an empty call.
inline double read_accuracy(std::string_view call, std::string_view ref) {
    if (call.empty()) return 0.0;
    const auto a = align(call, ref);
    return a.columns() ? double(a.matches) / double(a.columns()) : 0.0;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct LinearFit {
    double slope = 0;
    double intercept = 0;
    double r2 = 0;
};

/// Least-squares fit y ≈ slope·x + intercept with coefficient of determination.
inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    LinearFit f;
    const std::size_t n = std::min(x.size(), y.size());
    if (n < 2) return f;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0) return f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy == 0 ? 1.0 : std::clamp(sxy * sxy / (sxx * syy), 0.0, 1.0);
    return f;
}

struct ReadEval {
    std::string read_id;
    double accuracy = 0;
    Alignment alignment;
    bool empty_call = false;
    double mean_length_factor = std::numeric_limits<double>::quiet_NaN();
    double speed = 0;
};

struct EvalReport {
    std::vector<ReadEval> reads;
    double median_accuracy = 0;
    std::size_t empty_calls = 0;
    bool has_length_factors = false;
    LinearFit speed_fit;  // mean length factor against speed
};

/// Builds the report; per-read length factors may be NaN when the model has no dynamic pooling.
inline EvalReport summarize(std::vector<ReadEval> reads) {
    EvalReport r;
    std::vector<double> acc, x, y;
    for (const auto& e : reads) {
        acc.push_back(e.accuracy);
        if (e.empty_call) ++r.empty_calls;
        if (std::isfinite(e.mean_length_factor)) {
            x.push_back(e.speed);
            y.push_back(e.mean_length_factor);
        }
    }
    r.median_accuracy = acc.empty() ? 0.0 : median(acc);
    r.has_length_factors = !x.empty();
    if (r.has_length_factors) r.speed_fit = linear_fit(x, y);
    r.reads = std::move(reads);
    return r;
}

}  // namespace dynpool
