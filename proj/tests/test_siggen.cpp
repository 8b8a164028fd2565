#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include "dynpool/siggen.hpp"

using namespace dynpool;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dynpool_siggen_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

GeneratorConfig steady() {
    GeneratorConfig c;
    c.speed.min = c.speed.max = 1.0;
    c.speed.drift = 0;
    return c;
}

}  // namespace

TEST(EventLengths, MeanAtUnitSpeedIsEightToTen) {
    const DurationLaw law;
    std::mt19937_64 rng(1);
    double sum = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += draw_event_length(law, 1.0, rng);
    const double mean = sum / n;
    EXPECT_GE(mean, 8.0);
    EXPECT_LE(mean, 10.0);
}

TEST(EventLengths, HistogramHasShortAndLongEvents) {
    const DurationLaw law;
    std::mt19937_64 rng(2);
    std::map<std::uint32_t, int> hist;
    for (int i = 0; i < 100000; ++i) ++hist[draw_event_length(law, 1.0, rng)];
    EXPECT_GT(hist[1], 0);
    int long_events = 0;
    for (auto [len, count] : hist) {
        if (len >= 30) long_events += count;
        EXPECT_GE(len, law.min_length);
        EXPECT_LE(len, law.max_length);
    }
    EXPECT_GT(long_events, 0);
}

TEST(EventLengths, FasterMeansShorter) {
    const DurationLaw law;
    std::mt19937_64 rng(3);
    double slow = 0, fast = 0;
    for (int i = 0; i < 20000; ++i) {
        slow += draw_event_length(law, 0.7, rng);
        fast += draw_event_length(law, 1.4, rng);
    }
    EXPECT_GT(slow, 1.5 * fast);
}

TEST(PoreModel, LevelsAreStandardized) {
    const PoreModel pore(5, 7, 0.15);
    ASSERT_EQ(pore.size(), 1024u);
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < pore.size(); ++i) mean += pore.level(i);
    mean /= 1024;
    for (std::size_t i = 0; i < pore.size(); ++i) sq += (pore.level(i) - mean) * (pore.level(i) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(sq / 1024), 1.0, 1e-12);
    for (std::size_t i = 0; i < pore.size(); ++i) {
        EXPECT_GE(pore.sigma(i), 0.15 * 0.8);
        EXPECT_LE(pore.sigma(i), 0.15 * 1.2);
    }
}

TEST(PoreModel, KmerWindowIsCentredAndClamped) {
    const PoreModel pore(3, 1, 0.1);
    const auto z = encode_bases("ACGT");
    EXPECT_EQ(pore.kmer_at(z, 1), 0u * 16 + 1 * 4 + 2);  // ACG
    EXPECT_EQ(pore.kmer_at(z, 0), 0u * 16 + 0 * 4 + 1);  // AAC
    EXPECT_EQ(pore.kmer_at(z, 3), 2u * 16 + 3 * 4 + 3);  // GTT
}

TEST(SimulateRead, NoiselessConstantEventsGiveFlatRuns) {
    GeneratorConfig c = steady();
    c.noise_sigma = 0;
    c.duration.constant_length = 8;
    const PoreModel pore(c.kmer, c.pore_seed, c.noise_sigma);
    std::mt19937_64 rng(4);
    const auto r = simulate_read(std::string(12, 'A'), rng, pore, c);
    ASSERT_EQ(r.signal.size(), 96u);
    for (float v : r.signal) EXPECT_EQ(v, r.signal[0]);
    for (std::size_t j = 0; j < r.event_bounds.size(); ++j) EXPECT_EQ(r.event_bounds[j], 8 * j);
    EXPECT_FLOAT_EQ(r.speed, 12.5f);
}

TEST(SimulateRead, RecordInvariants) {
    const GeneratorConfig c;
    const PoreModel pore(c.kmer, c.pore_seed, c.noise_sigma);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto r = generate_read(seed, 300, pore, c);
        ASSERT_EQ(r.event_bounds.size(), r.sequence.size());
        EXPECT_EQ(r.event_bounds.front(), 0u);
        for (std::size_t j = 1; j < r.event_bounds.size(); ++j) EXPECT_LT(r.event_bounds[j - 1], r.event_bounds[j]);
        EXPECT_GT(r.signal.size(), r.event_bounds.back());
        EXPECT_LE(r.signal.size() - r.event_bounds.back(), c.duration.max_length);
        EXPECT_FLOAT_EQ(r.speed, float(300.0 / double(r.signal.size()) * 100.0));
    }
}

TEST(SimulateRead, RejectsBadSpeedProfile) {
    GeneratorConfig c;
    c.speed.min = 1.5;
    c.speed.max = 1.0;
    const PoreModel pore(c.kmer, c.pore_seed, c.noise_sigma);
    std::mt19937_64 rng(1);
    EXPECT_THROW(simulate_read("ACGTACGT", rng, pore, c), std::invalid_argument);
    c.speed.min = 0;
    EXPECT_THROW(generate_dataset(1, 10, c), std::invalid_argument);
}

TEST(SimulateRead, SignalMomentsMatchPoreModel) {
    // Per-read mean and variance against the values implied by the sequence's levels, with
    // event lengths i.i.d.: the spread of both statistics comes from ratio-estimator variance.
    const GeneratorConfig c = steady();
    const PoreModel pore(c.kmer, c.pore_seed, c.noise_sigma);
    std::mt19937_64 lrng(9);
    double mu = 0, m2 = 0;
    const int draws = 200000;
    for (int i = 0; i < draws; ++i) {
        const double l = draw_event_length(c.duration, 1.0, lrng);
        mu += l;
        m2 += l * l;
    }
    mu /= draws;
    const double var_len = m2 / draws - mu * mu;

    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto r = generate_read(seed, 400, pore, c);
        const auto z = encode_bases(r.sequence);
        const std::size_t n = z.size();
        std::vector<double> lev(n), sig(n);
        double mbar = 0;
        for (std::size_t j = 0; j < n; ++j) {
            lev[j] = pore.level(pore.kmer_at(z, j));
            sig[j] = pore.sigma(pore.kmer_at(z, j));
            mbar += lev[j] / double(n);
        }
        double vbar = 0;
        for (std::size_t j = 0; j < n; ++j) vbar += ((lev[j] - mbar) * (lev[j] - mbar) + sig[j] * sig[j]) / double(n);
        const double N = double(n) * mu;
        double var_mean = 0, var_var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = lev[j] - mbar, s2 = sig[j] * sig[j];
            var_mean += var_len * d * d + mu * s2;
            var_var += var_len * (d * d + s2 - vbar) * (d * d + s2 - vbar) + mu * (2 * s2 * s2 + 4 * d * d * s2);
        }
        var_mean /= N * N;
        var_var /= N * N;

        double m = 0, v = 0;
        for (float x : r.signal) m += x;
        m /= double(r.signal.size());
        for (float x : r.signal) v += (x - m) * (x - m);
        v /= double(r.signal.size());
        EXPECT_LT(std::abs(m - mbar), 3 * std::sqrt(var_mean)) << "seed " << seed;
        EXPECT_LT(std::abs(v - vbar), 3 * std::sqrt(var_var)) << "seed " << seed;
    }
}

TEST(Dataset, DeterministicAndSplit) {
    const GeneratorConfig c;
    const auto a = generate_dataset(5, 40, c);
    const auto b = generate_dataset(5, 40, c);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.valid, b.valid);
    EXPECT_EQ(a.test, b.test);
    EXPECT_EQ(a.train.size(), 32u);
    EXPECT_EQ(a.valid.size(), 4u);
    EXPECT_EQ(a.test.size(), 4u);
    std::set<std::string> ids;
    for (const char* s : kSplits)
        for (const auto& r : a.split(s)) EXPECT_TRUE(ids.insert(r.read_id).second) << r.read_id;
    const auto other = generate_dataset(6, 40, c);
    EXPECT_NE(a.train.front().signal, other.train.front().signal);
}

TEST(Dataset, SplitSizes) {
    EXPECT_EQ(split_sizes(10), (std::array<std::size_t, 3>{8, 1, 1}));
    EXPECT_EQ(split_sizes(1), (std::array<std::size_t, 3>{0, 0, 1}));
    EXPECT_THROW(generate_dataset(1, 0, GeneratorConfig{}), std::invalid_argument);
}

TEST(Dataset, RecordsRoundTripBitExactly) {
    const auto ds = generate_dataset(3, 10, GeneratorConfig{});
    std::stringstream ss;
    for (const auto& r : ds.train) write_record(ss, r);
    for (const auto& r : ds.train) EXPECT_EQ(read_record(ss), r);
}

TEST(Dataset, FilesAreByteIdenticalAcrossRuns) {
    const auto d1 = scratch("a"), d2 = scratch("b");
    save_dataset(d1, generate_dataset(11, 20, GeneratorConfig{}));
    save_dataset(d2, generate_dataset(11, 20, GeneratorConfig{}));
    for (const char* f : {"meta.json", "train.bin", "valid.bin", "test.bin"}) EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
    const auto back = load_dataset(d1);
    EXPECT_EQ(back.test, generate_dataset(11, 20, GeneratorConfig{}).test);
    EXPECT_EQ(back.meta.at("generator").at("speed").at("max"), 1.4);
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Dataset, RefusesToOverwrite) {
    const auto d = scratch("c");
    fs::create_directories(d);
    std::ofstream(d / "keep.txt") << "x";
    EXPECT_THROW(save_dataset(d, generate_dataset(1, 5, GeneratorConfig{})), std::runtime_error);
    EXPECT_EQ(slurp(d / "keep.txt"), "x");
    fs::remove_all(d);
}

TEST(GeneratorConfig, JsonRoundTrip) {
    GeneratorConfig c;
    c.noise_sigma = 0.3;
    c.speed.min = 0.5;
    c.duration.constant_length = 4;
    const GeneratorConfig back = nlohmann::json(c).get<GeneratorConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    EXPECT_EQ(nlohmann::json::parse("{}").get<GeneratorConfig>().kmer, 5u);
}
