#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <string>
#include <vector>

#include "dynpool/alphabet.hpp"
#include "dynpool/binary_io.hpp"

// Synthetic nanopore-like reads: each base occupies the pore for a random number of readouts
// (an event); the readout level depends on the k-mer around the base, plus Gaussian noise.

namespace dynpool {

struct DurationLaw {
    double short_weight = 0.85;
    double short_mean = 9.0;
    double long_mean = 25.0;
    std::uint32_t min_length = 1;
    std::uint32_t max_length = 40;
    /// Non-zero forces every event to this many readouts (speed is then ignored).
    std::uint32_t constant_length = 0;
};

struct SpeedProfile {
    double min = 0.7;
    double max = 1.4;
    /// Bases per piecewise-constant speed segment within a read; 0 disables drift.
    std::uint32_t drift_segment = 50;
    /// Each segment multiplies the read speed by exp(U(-drift, drift)).
    double drift = 0.1;

    void validate() const {
        if (!(min > 0) || !(max >= min) || !std::isfinite(max))
            throw std::invalid_argument("speed profile: need 0 < min <= max, got [" + std::to_string(min) + ", " +
                                        std::to_string(max) + "]");
        if (!(drift >= 0)) throw std::invalid_argument("speed profile: drift must be non-negative");
    }
};

struct GeneratorConfig {
    std::uint32_t kmer = 5;
    std::uint64_t pore_seed = 7;
    double noise_sigma = 0.15;
    DurationLaw duration{};
    SpeedProfile speed{};
    std::uint32_t min_bases = 250;
    std::uint32_t max_bases = 450;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"kmer", c.kmer},
         {"pore_seed", c.pore_seed},
         {"noise_sigma", c.noise_sigma},
         {"duration",
          {{"short_weight", c.duration.short_weight},
           {"short_mean", c.duration.short_mean},
           {"long_mean", c.duration.long_mean},
           {"min_length", c.duration.min_length},
           {"max_length", c.duration.max_length},
           {"constant_length", c.duration.constant_length}}},
         {"speed",
          {{"min", c.speed.min}, {"max", c.speed.max}, {"drift_segment", c.speed.drift_segment}, {"drift", c.speed.drift}}},
         {"min_bases", c.min_bases},
         {"max_bases", c.max_bases}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c = GeneratorConfig{};
    c.kmer = j.value("kmer", c.kmer);
    c.pore_seed = j.value("pore_seed", c.pore_seed);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    if (j.contains("duration")) {
        const auto& d = j["duration"];
        c.duration.short_weight = d.value("short_weight", c.duration.short_weight);
        c.duration.short_mean = d.value("short_mean", c.duration.short_mean);
        c.duration.long_mean = d.value("long_mean", c.duration.long_mean);
        c.duration.min_length = d.value("min_length", c.duration.min_length);
        c.duration.max_length = d.value("max_length", c.duration.max_length);
        c.duration.constant_length = d.value("constant_length", c.duration.constant_length);
    }
    if (j.contains("speed")) {
        const auto& s = j["speed"];
        c.speed.min = s.value("min", c.speed.min);
        c.speed.max = s.value("max", c.speed.max);
        c.speed.drift_segment = s.value("drift_segment", c.speed.drift_segment);
        c.speed.drift = s.value("drift", c.speed.drift);
    }
    c.min_bases = j.value("min_bases", c.min_bases);
    c.max_bases = j.value("max_bases", c.max_bases);
}

/// Mean level and noise per k-mer. Levels are standardized over the table.
///
/// A level is a sum of per-position base effects (weight halves with distance from the centre)
/// plus a small k-mer specific term. The centre effects are a shuffled even ladder so every
/// centre base is separable; an unstructured random table is close to unlearnable at this noise.
class PoreModel {
public:
    PoreModel(std::uint32_t k, std::uint64_t seed, double noise_sigma) : k_(k) {
        if (k == 0 || k > 10) throw std::invalid_argument("pore model: k must be in 1..10");
        const std::size_t n = std::size_t{1} << (2 * k);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> spread(0.8, 1.2);
        const std::uint32_t centre = k / 2;
        std::vector<std::array<double, 4>> effect(k);
        for (std::uint32_t p = 0; p < k; ++p) {
            const double w = std::pow(0.5, std::abs(int(p) - int(centre)));
            if (p == centre) {
                effect[p] = {-1.5, -0.5, 0.5, 1.5};
                std::shuffle(effect[p].begin(), effect[p].end(), rng);
            } else {
                for (auto& e : effect[p]) e = normal(rng);
            }
            for (auto& e : effect[p]) e *= w;
        }
        levels_.resize(n);
        sigma_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double v = 0.3 * normal(rng);
            std::size_t code = i;
            for (std::uint32_t p = k; p-- > 0; code >>= 2) v += effect[p][code & 3];
            levels_[i] = v;
            sigma_[i] = noise_sigma * spread(rng);
        }
        double mean = 0, var = 0;
        for (double v : levels_) mean += v;
        mean /= double(n);
        for (double v : levels_) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / double(n));
        for (double& v : levels_) v = (v - mean) / sd;
    }

    std::uint32_t k() const { return k_; }
    std::size_t size() const { return levels_.size(); }
    double level(std::size_t kmer) const { return levels_.at(kmer); }
    double sigma(std::size_t kmer) const { return sigma_.at(kmer); }

    /// k-mer index of the window centred on base j; the ends repeat the first/last base.
    std::size_t kmer_at(const std::vector<std::uint8_t>& z, std::size_t j) const {
        std::size_t code = 0;
        const std::ptrdiff_t half = std::ptrdiff_t(k_ / 2);
        for (std::ptrdiff_t d = -half; d < std::ptrdiff_t(k_) - half; ++d) {
            const std::ptrdiff_t pos = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(j) + d, 0, std::ptrdiff_t(z.size()) - 1);
            code = code * 4 + z[std::size_t(pos)];
        }
        return code;
    }

private:
    std::uint32_t k_;
    std::vector<double> levels_;
    std::vector<double> sigma_;
};

struct ReadRecord {
    std::string read_id;
    std::string sequence;
    std::vector<float> signal;
    float speed = 0;  // bases per 100 readouts
    std::vector<std::uint32_t> event_bounds;

    friend bool operator==(const ReadRecord&, const ReadRecord&) = default;
};

/// Draws one event length; `multiplier` > 1 means faster translocation (shorter events).
inline std::uint32_t draw_event_length(const DurationLaw& law, double multiplier, std::mt19937_64& rng) {
    if (law.constant_length) return law.constant_length;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (;;) {
        const double mean = (u(rng) < law.short_weight ? law.short_mean : law.long_mean) / multiplier;
        const double p = std::min(1.0, 1.0 / std::max(mean, 1.0));
        std::geometric_distribution<std::uint32_t> geom(p);
        const std::uint32_t len = geom(rng) + 1;
        if (len >= law.min_length && len <= law.max_length) return len;
    }
}

/// Signal for a given base sequence, drawing durations, speeds and noise from `rng`.
inline ReadRecord simulate_read(const std::string& sequence, std::mt19937_64& rng, const PoreModel& pore,
                                const GeneratorConfig& cfg, std::string read_id = "read") {
    cfg.speed.validate();
    if (sequence.size() < pore.k()) throw std::invalid_argument("simulate_read: sequence shorter than the k-mer order");
    const auto z = encode_bases(sequence);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    ReadRecord r;
    r.read_id = std::move(read_id);
    r.sequence = sequence;
    const double lmin = std::log(cfg.speed.min), lmax = std::log(cfg.speed.max);
    const double read_mult = std::exp(lmin + (lmax - lmin) * u(rng));
    double mult = read_mult;
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (cfg.speed.drift_segment && cfg.speed.drift > 0 && j % cfg.speed.drift_segment == 0)
            mult = read_mult * std::exp(cfg.speed.drift * (2 * u(rng) - 1));
        const std::uint32_t len = draw_event_length(cfg.duration, mult, rng);
        const std::size_t kmer = pore.kmer_at(z, j);
        r.event_bounds.push_back(std::uint32_t(r.signal.size()));
        for (std::uint32_t t = 0; t < len; ++t)
            r.signal.push_back(float(pore.level(kmer) + pore.sigma(kmer) * noise(rng)));
    }
    r.speed = float(double(z.size()) / double(r.signal.size()) * 100.0);
    return r;
}

/// Random sequence of `seq_len` bases and its simulated signal.
inline ReadRecord generate_read(std::uint64_t seed, std::size_t seq_len, const PoreModel& pore, const GeneratorConfig& cfg,
                                std::string read_id = "read") {
    if (seq_len < pore.k()) throw std::invalid_argument("generate_read: sequence shorter than the k-mer order");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> base(0, 3);
    std::string seq(seq_len, 'A');
    for (auto& c : seq) c = kBases[std::size_t(base(rng))];
    return simulate_read(seq, rng, pore, cfg, std::move(read_id));
}

// ---- dataset files ----

inline void write_record(std::ostream& os, const ReadRecord& r) {
    io::write_string(os, r.read_id);
    io::write_string(os, r.sequence);
    io::write_le<float>(os, r.speed);
    io::write_le<std::uint32_t>(os, std::uint32_t(r.event_bounds.size()));
    io::write_array(os, r.event_bounds.data(), r.event_bounds.size());
    io::write_le<std::uint32_t>(os, std::uint32_t(r.signal.size()));
    io::write_array(os, r.signal.data(), r.signal.size());
}

inline ReadRecord read_record(std::istream& is) {
    ReadRecord r;
    r.read_id = io::read_string(is);
    r.sequence = io::read_string(is);
    r.speed = io::read_le<float>(is);
    r.event_bounds.resize(io::read_le<std::uint32_t>(is));
    io::read_array(is, r.event_bounds.data(), r.event_bounds.size());
    r.signal.resize(io::read_le<std::uint32_t>(is));
    io::read_array(is, r.signal.data(), r.signal.size());
    return r;
}

inline void write_reads(const std::filesystem::path& path, const std::vector<ReadRecord>& reads) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : reads) write_record(os, r);
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<ReadRecord> read_reads(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<ReadRecord> out;
    while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_record(is));
    return out;
}

inline constexpr const char* kSplits[3] = {"train", "valid", "test"};

struct Dataset {
    nlohmann::json meta;
    std::vector<ReadRecord> train, valid, test;

    const std::vector<ReadRecord>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "valid") return valid;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split '" + name + "'");
    }
};

/// Reads per split for an 80/10/10 division by read index.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
    const std::size_t train = n * 8 / 10, valid = n / 10;
    return {train, valid, n - train - valid};
}

inline Dataset generate_dataset(std::uint64_t seed, std::size_t n_reads, const GeneratorConfig& cfg) {
    if (n_reads == 0) throw std::invalid_argument("generate_dataset: need at least one read");
    cfg.speed.validate();
    if (cfg.min_bases > cfg.max_bases) throw std::invalid_argument("generate_dataset: min_bases > max_bases");
    const PoreModel pore(cfg.kmer, cfg.pore_seed, cfg.noise_sigma);
    Dataset ds;
    ds.meta = {{"seed", seed}, {"reads", n_reads}, {"generator", cfg}};
    const auto sizes = split_sizes(n_reads);
    for (std::size_t i = 0; i < n_reads; ++i) {
        const std::uint64_t read_seed = seed ^ std::uint64_t(i);
        std::mt19937_64 len_rng(read_seed ^ 0x9e3779b97f4a7c15ull);
        std::uniform_int_distribution<std::uint32_t> len(cfg.min_bases, cfg.max_bases);
        char id[32];
        std::snprintf(id, sizeof id, "read_%06zu", i);
        auto r = generate_read(read_seed, std::max<std::size_t>(len(len_rng), cfg.kmer), pore, cfg, id);
        (i < sizes[0] ? ds.train : i < sizes[0] + sizes[1] ? ds.valid : ds.test).push_back(std::move(r));
    }
    ds.meta["splits"] = {{"train", ds.train.size()}, {"valid", ds.valid.size()}, {"test", ds.test.size()}};
    return ds;
}

/// Writes meta.json and one file per split into `dir`, which must not exist or be empty.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && (!fs::is_directory(dir) || !fs::is_empty(dir)))
        throw std::runtime_error("output path " + dir.string() + " already exists and is not an empty directory");
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "meta.json");
        if (!os) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
        os << ds.meta.dump(2) << '\n';
    }
    for (const char* s : kSplits) write_reads(dir / (std::string(s) + ".bin"), ds.split(s));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    std::ifstream meta(dir / "meta.json");
    if (!meta) throw std::runtime_error("no dataset at " + dir.string() + " (meta.json missing)");
    ds.meta = nlohmann::json::parse(meta);
    ds.train = read_reads(dir / "train.bin");
    ds.valid = read_reads(dir / "valid.bin");
    ds.test = read_reads(dir / "test.bin");
    return ds;
}

}  // namespace dynpool
