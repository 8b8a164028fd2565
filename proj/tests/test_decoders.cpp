#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "dynpool/ctc.hpp"
#include "dynpool/decoders.hpp"
#include "dynpool/rna.hpp"
#include "decoder_oracle.hpp"

using namespace dynpool;
using namespace testutil;

TEST(CtcLoss, UniformSingleStepExample) {
    const std::vector<double> zero(kSymbols, 0.0);
    EXPECT_NEAR(ctc_nll<double>(zero, ""), -std::log(0.2), 1e-12);
    EXPECT_NEAR(ctc_nll<double>(zero, "G"), -std::log(0.2), 1e-12);
}

TEST(CtcLoss, RepeatsAreNotCollapsed) {
    std::vector<std::uint8_t> path{0, kBlank, 1, kBlank};
    EXPECT_EQ(reduce_path(path), "AC");
    EXPECT_EQ(reduce_path({0, 0, kBlank, 2}), "AAG");
}

TEST(CtcLoss, MatchesEnumeration) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t L = 1 + rng() % 4;
        const auto x = random_logits(L, seed);
        const CtcEmissions em{std::span<const double>(x)};
        const auto mass = enumerate_sequences(em);
        for (std::size_t n = 0; n <= std::min<std::size_t>(L, 3); ++n) {
            const std::string z = random_bases(n, rng);
            const double expect = mass.count(z) ? -std::log(mass.at(z)) : INFINITY;
            EXPECT_NEAR(ctc_nll<double>(x, z), expect, 1e-5) << "seed " << seed << " z=" << z;
            EXPECT_NEAR(-sequence_log_likelihood(em, z), expect, 1e-5);
        }
    }
}

TEST(CtcLoss, BatchedOpMatchesSingleRead) {
    Tape<double> tape;
    const auto a = random_logits(4, 1), b = random_logits(4, 2);
    std::vector<double> both(a);
    both.insert(both.end(), b.begin(), b.end());
    auto x = tape.variable(Tensor<double>(Shape{2, 4, kSymbols}, both));
    auto loss = ops::ctc_loss(x, {4, 3}, {"AC", "T"});
    EXPECT_NEAR(loss.value()[0], ctc_nll<double>(a, "AC"), 1e-12);
    EXPECT_NEAR(loss.value()[1], ctc_nll<double>(std::span<const double>(b).first(3 * kSymbols), "T"), 1e-12);
}

TEST(CtcLoss, UnalignableIsReported) {
    const auto x = random_logits(2, 3);
    EXPECT_THROW(ctc_nll<double>(x, "ACG"), UnalignableError);
    Tape<double> tape;
    auto v = tape.variable(Tensor<double>(Shape{1, 2, kSymbols}, x));
    std::vector<bool> ok;
    auto loss = ops::ctc_loss(v, {2}, {"ACG"}, &ok);
    EXPECT_FALSE(ok[0]);
    EXPECT_EQ(loss.value()[0], 0.0);
}

TEST(RnaLoss, MatchesEnumeration) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed + 100);
        const std::size_t L = 1 + rng() % 4;
        const std::uint32_t order = 1 + std::uint32_t(rng() % 3);
        RnaFixture fx(L, order, seed);
        const auto em = fx.emissions();
        const auto mass = enumerate_sequences(em);
        for (std::size_t n = 0; n <= std::min<std::size_t>(L, 3); ++n) {
            const std::string z = random_bases(n, rng);
            const double expect = mass.count(z) ? -std::log(mass.at(z)) : INFINITY;
            EXPECT_NEAR(rna_nll(fx.head, std::span<const double>(fx.h), z), expect, 1e-5) << "seed " << seed;
            EXPECT_NEAR(-sequence_log_likelihood(em, z), expect, 1e-5);
        }
    }
}

TEST(RnaLoss, ProbabilitiesOverAllSequencesSumToOne) {
    for (std::size_t L = 1; L <= 3; ++L) {
        RnaFixture fx(L, 2, 40 + L);
        const auto em = fx.emissions();
        double total = 0;
        // every sequence of length <= L, scored through the lattice
        std::vector<std::string> level{""}, seqs{""};
        for (std::size_t n = 0; n < L; ++n) {
            std::vector<std::string> next;
            for (const auto& s : level)
                for (char c : kBases) next.push_back(s + c);
            seqs.insert(seqs.end(), next.begin(), next.end());
            level = std::move(next);
        }
        EXPECT_EQ(seqs.size(), (std::size_t(std::pow(4, L + 1)) - 1) / 3);
        for (const auto& z : seqs) total += std::exp(sequence_log_likelihood(em, z));
        EXPECT_NEAR(total, 1.0, 1e-9) << "L=" << L;
    }
}

TEST(RnaLoss, ContextFreeTableReducesToCtc) {
    // identical maps for every context and no start bias: Q no longer depends on history
    RnaFixture fx(4, 2, 5);
    auto& W = fx.head.weight().value;
    auto& b = fx.head.bias().value;
    const std::size_t row = kSymbols * 3;
    for (std::size_t k = 1; k < fx.head.spec().contexts(); ++k) {
        std::copy(W.ptr(), W.ptr() + row, W.ptr() + k * row);
        std::copy(b.ptr(), b.ptr() + kSymbols, b.ptr() + k * kSymbols);
    }
    fx.head.start_bias().value.fill(0.0);
    std::vector<double> logits;
    for (std::size_t i = 0; i < 4; ++i) {
        auto u = RnaHead<double>::scores(W, b, fx.head.start_bias().value, 3, 2, fx.h.data() + i * 3, Context{});
        logits.insert(logits.end(), u.begin(), u.end());
    }
    for (const char* z : {"", "A", "CG", "TTA", "ACGT"})
        EXPECT_NEAR(rna_nll(fx.head, std::span<const double>(fx.h), z), ctc_nll<double>(logits, z), 1e-10) << z;
}

TEST(RnaHead, RowsAreDistributions) {
    RnaFixture fx(3, 3, 8);
    for (std::uint32_t code = 0; code < 64; code += 7) {
        for (std::uint32_t len = 0; len <= 3; ++len) {
            const auto lp = fx.head.log_probs(fx.h.data(), Context{code, len});
            double s = 0;
            for (double v : lp) s += std::exp(v);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Context, EncodesNewestBaseInLowDigits) {
    EXPECT_EQ(context_encode("", 3), 0u);
    EXPECT_EQ(context_encode("C", 3), 1u);
    EXPECT_EQ(context_encode("CA", 3), 4u);
    EXPECT_EQ(context_encode("TACG", 3), 0u * 16 + 1 * 4 + 2);
    const auto c = Context{}.push(3, 2).push(1, 2).push(2, 2);
    EXPECT_EQ(c.code, 1u * 4 + 2);
    EXPECT_EQ(c.length, 2u);
}

TEST(Decoding, GreedyDropsBlanks) {
    // A, ε, C, ε as the per-step argmax
    std::vector<double> x(4 * kSymbols, 0.0);
    x[0 * kSymbols + 0] = 5;
    x[1 * kSymbols + kBlank] = 5;
    x[2 * kSymbols + 1] = 5;
    x[3 * kSymbols + kBlank] = 5;
    EXPECT_EQ(greedy_decode(CtcEmissions(std::span<const double>(x))), "AC");
}

TEST(Decoding, ExhaustiveBeamFindsMostProbableSequence) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const std::size_t L = 1 + seed % 5;
        const auto x = random_logits(L, seed, 1.0);
        const CtcEmissions ctc{std::span<const double>(x)};
        RnaFixture fx(L, 2, seed);
        const auto rna = fx.emissions();
        auto check = [&](const auto& em, const char* what) {
            const auto mass = enumerate_sequences(em);
            auto best = mass.begin();
            for (auto it = mass.begin(); it != mass.end(); ++it)
                if (it->second > best->second) best = it;
            const auto hyps = beam_search(em, 100000);
            ASSERT_FALSE(hyps.empty());
            EXPECT_EQ(hyps.front().sequence, best->first) << what << " seed " << seed;
            EXPECT_NEAR(hyps.front().log_mass, std::log(best->second), 1e-9);
            EXPECT_EQ(beam_decode(em, BeamOptions{100000, 4}), best->first);
        };
        check(ctc, "ctc");
        check(rna, "rna");
    }
}

TEST(Decoding, BeamIsNoWorseThanGreedy) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto x = random_logits(40, seed, 1.5);
        const CtcEmissions em{std::span<const double>(x)};
        const auto g = greedy_decode(em);
        const auto b = beam_decode(em, BeamOptions{16, 4});
        EXPECT_GE(sequence_log_likelihood(em, b), sequence_log_likelihood(em, g));
    }
}

TEST(Decoding, BeamWidthZeroIsRejected) {
    const auto x = random_logits(3, 1);
    EXPECT_THROW(beam_search(CtcEmissions(std::span<const double>(x)), 0), std::invalid_argument);
}

TEST(Qualities, ConfidentStepsGetHighScores) {
    std::vector<double> x(3 * kSymbols, 0.0);
    x[0 * kSymbols + 2] = 20;       // G, near certain
    x[1 * kSymbols + kBlank] = 20;
    x[2 * kSymbols + 3] = 0.5;      // T, weak
    const CtcEmissions em{std::span<const double>(x)};
    const auto q = base_qualities(em, "GT");
    ASSERT_EQ(q.size(), 2u);
    EXPECT_EQ(q[0], 50);
    EXPECT_LT(q[1], 3);
    for (int v : q) EXPECT_GE(v, 0);
}

TEST(Fastq, RecordLayout) {
    std::ostringstream os;
    write_fastq(os, FastqRecord{"r1", "ACG", {0, 40, 93}});
    EXPECT_EQ(os.str(), "@r1\nACG\n+\n!I~\n");
}
