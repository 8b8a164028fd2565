#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "dynpool/alphabet.hpp"
#include "dynpool/lattice.hpp"
#include "dynpool/rna.hpp"

// Decoding over emission models. A model exposes `steps()`, `order()` (context length it looks at,
// 0 when the distribution ignores history) and `log_probs(i, ctx)`, the five log-probabilities at
// step i after emitting the bases summarized by ctx.

namespace dynpool {

/// Log-probability floor applied while decoding.
inline constexpr double kDecodeLogFloor = -30.0;

/// Context-free emissions from CTC logits [L, 5].
class CtcEmissions {
public:
    template <class T>
    explicit CtcEmissions(std::span<const T> logits) : lp_(logits.size() / kSymbols) {
        for (std::size_t i = 0; i < lp_.size(); ++i) lp_[i] = log_softmax5(logits.data() + i * kSymbols);
    }

    std::size_t steps() const { return lp_.size(); }
    std::uint32_t order() const { return 0; }
    const std::array<double, kSymbols>& log_probs(std::size_t i, Context) const { return lp_[i]; }

private:
    std::vector<std::array<double, kSymbols>> lp_;
};

/// Aligner emissions: features h [L, H] and a context table head.
template <class T>
class RnaEmissions {
public:
    RnaEmissions(const RnaHead<T>& head, std::span<const T> h)
        : head_(&head), h_(h), steps_(h.size() / head.spec().features) {}

    std::size_t steps() const { return steps_; }
    std::uint32_t order() const { return head_->spec().order; }
    std::array<double, kSymbols> log_probs(std::size_t i, Context ctx) const {
        return head_->log_probs(h_.data() + i * head_->spec().features, ctx);
    }

private:
    const RnaHead<T>* head_;
    std::span<const T> h_;
    std::size_t steps_;
};

/// Exact log Σ_{Y : R(Y) = z} Pr(Y) under the model (no floor).
template <class Model>
double sequence_log_likelihood(const Model& model, std::string_view seq) {
    const auto z = encode_bases(seq);
    if (model.steps() < z.size()) return kNegInf;
    std::vector<Context> ctx(z.size() + 1);
    for (std::size_t j = 0; j < z.size(); ++j) ctx[j + 1] = ctx[j].push(z[j], model.order());
    std::array<double, kSymbols> scratch{};
    auto lq = [&](std::size_t i, std::size_t j) {
        scratch = model.log_probs(i, ctx[j]);
        return static_cast<const double*>(scratch.data());
    };
    return lattice_forward(model.steps(), z, lq, false).log_likelihood;
}

/// Most probable symbol at each step, following the emitted history; blanks dropped.
template <class Model>
std::string greedy_decode(const Model& model) {
    std::string out;
    Context ctx;
    for (std::size_t i = 0; i < model.steps(); ++i) {
        const auto lp = model.log_probs(i, ctx);
        const auto best = std::size_t(std::max_element(lp.begin(), lp.end()) - lp.begin());
        if (best == kBlank) continue;
        out.push_back(kBases[best]);
        ctx = ctx.push(std::uint8_t(best), model.order());
    }
    return out;
}

struct BeamOptions {
    std::size_t width = 50;
    /// Number of top beam candidates re-scored with the exact forward algorithm, together with
    /// the greedy call. 0 disables re-scoring.
    std::size_t rescore = 4;
};

namespace detail {

/// Prefix tree of emitted bases; node 0 is the empty prefix.
class PrefixTrie {
public:
    PrefixTrie() { nodes_.push_back({0, 0, 0, {-1, -1, -1, -1}}); }

    std::size_t child(std::size_t node, std::uint8_t base) {
        auto& slot = nodes_[node].children[base];
        if (slot < 0) {
            slot = std::int64_t(nodes_.size());
            nodes_.push_back({node, base, nodes_[node].depth + 1, {-1, -1, -1, -1}});
        }
        return std::size_t(nodes_[node].children[base]);
    }

    std::string sequence(std::size_t node) const {
        std::string s(nodes_[node].depth, 'A');
        for (std::size_t k = s.size(); k > 0; --k) {
            s[k - 1] = kBases[nodes_[node].base];
            node = nodes_[node].parent;
        }
        return s;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::size_t parent;
        std::uint8_t base;
        std::size_t depth;
        std::array<std::int64_t, 4> children;
    };
    std::vector<Node> nodes_;
};

}  // namespace detail

struct BeamHypothesis {
    std::string sequence;
    double log_mass;  // floored decoding mass
};

/// Prefix-merging beam search. Returns the surviving hypotheses after the last step, best first.
template <class Model>
std::vector<BeamHypothesis> beam_search(const Model& model, std::size_t width) {
    if (width == 0) throw std::invalid_argument("beam width must be positive");
    detail::PrefixTrie trie;
    struct Hyp {
        std::size_t node;
        Context ctx;
        double mass;
    };
    std::vector<Hyp> beam{{0, Context{}, 0.0}}, next;
    std::vector<std::int64_t> slot;  // per trie node, index into `next` or -1
    auto order_less = [&](const Hyp& a, const Hyp& b) {
        if (a.mass != b.mass) return a.mass > b.mass;
        return trie.sequence(a.node) < trie.sequence(b.node);
    };
    for (std::size_t i = 0; i < model.steps(); ++i) {
        next.clear();
        auto add = [&](std::size_t node, Context ctx, double mass) {
            if (slot.size() < trie.size()) slot.resize(trie.size(), -1);
            if (slot[node] < 0) {
                slot[node] = std::int64_t(next.size());
                next.push_back({node, ctx, mass});
            } else {
                auto& h = next[std::size_t(slot[node])];
                h.mass = log_sum_exp(h.mass, mass);
            }
        };
        for (const auto& h : beam) {
            auto lp = model.log_probs(i, h.ctx);
            for (auto& v : lp) v = std::max(v, kDecodeLogFloor);
            add(h.node, h.ctx, h.mass + lp[kBlank]);
            for (std::uint8_t b = 0; b < 4; ++b) {
                const std::size_t c = trie.child(h.node, b);
                add(c, h.ctx.push(b, model.order()), h.mass + lp[b]);
            }
        }
        for (const auto& h : next) slot[h.node] = -1;
        if (next.size() > width) {
            std::partial_sort(next.begin(), next.begin() + std::ptrdiff_t(width), next.end(), order_less);
            next.resize(width);
        }
        std::swap(beam, next);
    }
    std::sort(beam.begin(), beam.end(), order_less);
    std::vector<BeamHypothesis> out;
    for (const auto& h : beam) out.push_back({trie.sequence(h.node), h.mass});
    return out;
}

/// Beam search followed by exact re-scoring of the leading candidates and the greedy call.
template <class Model>
std::string beam_decode(const Model& model, const BeamOptions& opts = {}) {
    auto hyps = beam_search(model, opts.width);
    if (opts.rescore == 0 || hyps.empty()) return hyps.empty() ? std::string{} : hyps.front().sequence;
    std::vector<std::string> candidates;
    for (std::size_t k = 0; k < std::min(opts.rescore, hyps.size()); ++k) candidates.push_back(hyps[k].sequence);
    candidates.push_back(greedy_decode(model));
    std::string best;
    double best_ll = kNegInf;
    bool first = true;
    for (const auto& c : candidates) {
        const double ll = sequence_log_likelihood(model, c);
        if (first || ll > best_ll || (ll == best_ll && c < best)) {
            best = c;
            best_ll = ll;
            first = false;
        }
    }
    return best;
}

/// Phred qualities: for each called base, p is the probability the model assigns to that base at
/// the step where the best alignment emits it; Q = −10·log10(1 − p), clamped to [0, 50].
template <class Model>
std::vector<int> base_qualities(const Model& model, std::string_view seq) {
    const auto z = encode_bases(seq);
    std::vector<int> q(z.size(), 0);
    if (z.empty() || model.steps() < z.size()) return q;
    std::vector<Context> ctx(z.size() + 1);
    for (std::size_t j = 0; j < z.size(); ++j) ctx[j + 1] = ctx[j].push(z[j], model.order());
    std::array<double, kSymbols> scratch{};
    auto lq = [&](std::size_t i, std::size_t j) {
        scratch = model.log_probs(i, ctx[j]);
        return static_cast<const double*>(scratch.data());
    };
    const auto steps = lattice_viterbi(model.steps(), z, lq);
    for (std::size_t j = 0; j < z.size(); ++j) {
        const double p = std::exp(model.log_probs(steps[j], ctx[j])[z[j]]);
        const double phred = -10.0 * std::log10(std::max(1.0 - p, 1e-10));
        q[j] = int(std::lround(std::clamp(phred, 0.0, 50.0)));
    }
    return q;
}

struct FastqRecord {
    std::string id;
    std::string sequence;
    std::vector<int> quality;
};

inline void write_fastq(std::ostream& os, const FastqRecord& r) {
    os << '@' << r.id << '\n' << r.sequence << "\n+\n";
    for (int q : r.quality) os << char(33 + std::clamp(q, 0, 93));
    os << '\n';
}

}  // namespace dynpool
