#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dynpool {

/// Blank-extended output alphabet {A, C, G, T, ε}; ε has index 4.
inline constexpr std::size_t kSymbols = 5;
inline constexpr std::size_t kBlank = 4;
inline constexpr std::array<char, 4> kBases{'A', 'C', 'G', 'T'};

inline int base_index(char c) {
    switch (c) {
        case 'A': return 0;
        case 'C': return 1;
        case 'G': return 2;
        case 'T': return 3;
        default: return -1;
    }
}

/// Symbol indices of a base string; throws on characters outside {A,C,G,T}.
inline std::vector<std::uint8_t> encode_bases(std::string_view s) {
    std::vector<std::uint8_t> out;
    out.reserve(s.size());
    for (char c : s) {
        const int k = base_index(c);
        if (k < 0) throw std::invalid_argument(std::string("invalid base '") + c + "'");
        out.push_back(std::uint8_t(k));
    }
    return out;
}

/// Reduction R: drops blanks, keeps every other symbol (repeats are not collapsed).
inline std::string reduce_path(const std::vector<std::uint8_t>& path) {
    std::string out;
    for (auto s : path) {
        if (s != kBlank) out.push_back(kBases[s]);
    }
    return out;
}

/// The last min(j, k) emitted bases, packed base-4 with the newest base in the lowest digits.
/// Shorter histories are implicitly left-padded with 'A' (digit 0); `length` tells them apart.
struct Context {
    std::uint32_t code = 0;
    std::uint32_t length = 0;

    Context push(std::uint8_t base, std::uint32_t order) const {
        Context c;
        const std::uint32_t mask = order >= 16 ? ~0u : ((1u << (2 * order)) - 1u);
        c.code = order == 0 ? 0 : ((code << 2) | base) & mask;
        c.length = std::min(length + 1, order);
        return c;
    }
};

/// Table index of the context formed by the last k symbols of `z`.
inline std::uint32_t context_encode(std::string_view z, std::uint32_t k) {
    Context c;
    for (char ch : z) {
        const int b = base_index(ch);
        if (b < 0) throw std::invalid_argument(std::string("invalid base '") + ch + "'");
        c = c.push(std::uint8_t(b), k);
    }
    return c.code;
}

inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

template <class T>
std::array<double, kSymbols> log_softmax5(const T* logits) {
    std::array<double, kSymbols> out{};
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < kSymbols; ++c) mx = std::max(mx, double(logits[c]));
    double s = 0;
    for (std::size_t c = 0; c < kSymbols; ++c) s += std::exp(double(logits[c]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < kSymbols; ++c) out[c] = double(logits[c]) - lse;
    return out;
}

/// Thrown when an output sequence cannot be aligned (fewer steps than target symbols).
class UnalignableError : public std::runtime_error {
public:
    UnalignableError(std::size_t steps, std::size_t target)
        : std::runtime_error("unalignable: " + std::to_string(steps) + " steps for " + std::to_string(target) +
                             " target symbols"),
          steps_(steps), target_(target) {}
    std::size_t steps() const noexcept { return steps_; }
    std::size_t target() const noexcept { return target_; }

private:
    std::size_t steps_, target_;
};

}  // namespace dynpool
