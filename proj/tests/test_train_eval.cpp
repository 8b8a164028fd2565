#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>

#include <unistd.h>

#include "dynpool/train.hpp"

using namespace dynpool;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dynpool_train_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
    std::ifstream is(p);
    std::vector<nlohmann::json> out;
    for (std::string line; std::getline(is, line);)
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

std::set<std::string> tensor_names(const ModelConfig& cfg) {
    Model<float> m(cfg, 1);
    const auto n = m.store().names();
    return {n.begin(), n.end()};
}

// Edit distance by memoized recursion over prefixes.
std::size_t edit_distance_oracle(const std::string& a, const std::string& b) {
    std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
    std::function<long(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> long {
        if (i == 0) return long(j);
        if (j == 0) return long(i);
        long& m = memo[i][j];
        if (m >= 0) return m;
        m = std::min({go(i - 1, j) + 1, go(i, j - 1) + 1, go(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1)});
        return m;
    };
    return std::size_t(go(a.size(), b.size()));
}

TrainConfig tiny_schedule() {
    TrainConfig tc;
    tc.schedule.warmup = 5;
    tc.schedule.first_cycle = 20;
    tc.schedule.cycles = 2;
    tc.schedule.max_lr = 3e-3;
    tc.batch_size = 4;
    tc.valid_reads = 3;
    return tc;
}

}  // namespace

TEST(Schedule, WarmupThenCosineWithRestarts) {
    const ScheduleSpec s{1e-3, 100, 400, 4};
    EXPECT_EQ(s.total_steps(), 6100u);
    EXPECT_DOUBLE_EQ(lr_at(0, s), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(50, s), 5e-4);
    EXPECT_DOUBLE_EQ(lr_at(100, s), 1e-3);
    EXPECT_NEAR(lr_at(300, s), 5e-4, 1e-15);
    EXPECT_LT(lr_at(499, s), 1e-7);
    EXPECT_DOUBLE_EQ(lr_at(500, s), 1e-3);  // restart
    EXPECT_EQ(s.cycle_end(0), 500u);
    EXPECT_EQ(s.cycle_end(1), 1300u);
    EXPECT_NEAR(lr_at(900, s), 5e-4, 1e-15);
    EXPECT_EQ(lr_at(6100, s), 0.0);
    for (std::size_t t = 0; t < 6100; ++t) {
        EXPECT_GE(lr_at(t, s), 0.0);
        EXPECT_LE(lr_at(t, s), 1e-3);
    }
}

TEST(AdamW, ZeroGradientLeavesParametersWithoutDecay) {
    ParameterStore<double> store(1);
    auto& p = store.get_or_create("p", Shape{3}, [](Tensor<double>& t, std::mt19937_64&) { t.fill(0.5); });
    AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    for (int k = 0; k < 10; ++k) opt.step(store, 1e-2);
    for (double v : p.value.data()) EXPECT_EQ(v, 0.5);
}

TEST(AdamW, ConstantGradientMovesAgainstItsSign) {
    ParameterStore<double> store(1);
    auto& p = store.get_or_create("p", Shape{2}, nullptr);
    AdamW<double> opt;
    for (int k = 0; k < 20; ++k) {
        p.grad[0] = 2.0;
        p.grad[1] = -0.1;
        opt.step(store, 1e-2);
    }
    EXPECT_LT(p.value[0], -0.1);
    EXPECT_GT(p.value[1], 0.1);
}

TEST(AdamW, ConvergesOnQuadratic) {
    // (x - 1)^2 from x = 0
    ParameterStore<double> store(1);
    auto& p = store.get_or_create("x", Shape{1}, nullptr);
    AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    for (int k = 0; k < 500; ++k) {
        p.grad[0] = 2 * (p.value[0] - 1.0);
        opt.step(store, 1e-2);
    }
    EXPECT_NEAR(p.value[0], 1.0, 1e-3);
}

TEST(AdamW, NonFiniteGradientIsRejectedBeforeAnyUpdate) {
    ParameterStore<float> store(1);
    auto& a = store.get_or_create("layer.a", Shape{2}, nullptr);
    auto& b = store.get_or_create("layer.b", Shape{2}, nullptr);
    a.grad[0] = 1;
    b.grad[1] = std::numeric_limits<float>::quiet_NaN();
    AdamW<float> opt;
    try {
        opt.step(store, 1e-2);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
    }
    EXPECT_EQ(a.value[0], 0.0f);
}

TEST(Alignment, EditDistanceMatchesOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::string a, b;
        const std::size_t na = rng() % 51, nb = rng() % 51;
        for (std::size_t i = 0; i < na; ++i) a.push_back(kBases[rng() % 4]);
        if (trial % 2) {
            // a mutated copy so that matches dominate
            b = a;
            for (int k = 0; k < 5 && !b.empty(); ++k) {
                const std::size_t pos = rng() % b.size();
                switch (rng() % 3) {
                    case 0: b[pos] = kBases[rng() % 4]; break;
                    case 1: b.erase(pos, 1); break;
                    default: b.insert(pos, 1, kBases[rng() % 4]);
                }
            }
        } else {
            for (std::size_t i = 0; i < nb; ++i) b.push_back(kBases[rng() % 4]);
        }
        const auto al = align(a, b);
        EXPECT_EQ(al.edit_distance(), edit_distance_oracle(a, b));
        EXPECT_EQ(al.matches + al.mismatches + al.insertions, a.size());
        EXPECT_EQ(al.matches + al.mismatches + al.deletions, b.size());
    }
}

TEST(Accuracy, Examples) {
    EXPECT_DOUBLE_EQ(read_accuracy("ACGTACGT", "ACGTACGT"), 1.0);
    std::string ref(100, 'A');
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = kBases[(i * 7 + i / 3) % 4];
    std::string call = ref;
    call[40] = call[40] == 'C' ? 'G' : 'C';
    EXPECT_DOUBLE_EQ(read_accuracy(call, ref), 0.99);
    EXPECT_DOUBLE_EQ(read_accuracy("", ref), 0.0);
    const auto al = align("ACGT", "AGT");
    EXPECT_EQ(al.matches, 3u);
    EXPECT_EQ(al.insertions, 1u);
    EXPECT_DOUBLE_EQ(read_accuracy("ACGT", "AGT"), 0.75);
}

TEST(Summary, MedianIgnoresOrder) {
    std::vector<double> v{0.9, 0.2, 0.5, 0.7, 0.1, 0.8};
    const double m = median(v);
    EXPECT_DOUBLE_EQ(m, 0.6);
    std::mt19937_64 rng(1);
    for (int k = 0; k < 10; ++k) {
        std::shuffle(v.begin(), v.end(), rng);
        EXPECT_EQ(median(v), m);
    }
    EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
}

TEST(Summary, PerfectLineHasUnitR2) {
    std::vector<double> x{0.7, 0.8, 1.0, 1.2, 1.4}, y;
    for (double s : x) y.push_back(0.1 + 0.2 * s);
    const auto f = linear_fit(x, y);
    EXPECT_NEAR(f.r2, 1.0, 1e-12);
    EXPECT_NEAR(f.slope, 0.2, 1e-12);
    EXPECT_NEAR(f.intercept, 0.1, 1e-12);
}

TEST(Summary, CountsEmptyCallsAndSkipsMissingFactors) {
    std::vector<ReadEval> reads(3);
    reads[0].accuracy = 0.9;
    reads[0].mean_length_factor = 0.3;
    reads[0].speed = 10;
    reads[1].accuracy = 0.0;
    reads[1].empty_call = true;
    reads[2].accuracy = 0.8;
    const auto r = summarize(reads);
    EXPECT_EQ(r.empty_calls, 1u);
    EXPECT_DOUBLE_EQ(r.median_accuracy, 0.8);
    EXPECT_TRUE(r.has_length_factors);
}

TEST(Presets, DynamicVariantOnlyChangesThePoolLayer) {
    for (const auto& [fixed, dyn] : {std::pair{"osprey-mini", "osprey-mini-dynpool"}, std::pair{"heron-mini", "heron-mini-dynpool"},
                                     std::pair{"smoke-fixed", "smoke"}}) {
        const auto a = tensor_names(presets::by_name(fixed)), b = tensor_names(presets::by_name(dyn));
        std::vector<std::string> diff;
        std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(diff));
        EXPECT_FALSE(diff.empty());
        for (const auto& n : diff) EXPECT_EQ(n.rfind("pool.", 0), 0u) << fixed << " vs " << dyn << ": " << n;
    }
}

TEST(Presets, ConfigFilesMatchBuiltins) {
    for (const auto& name : presets::names()) {
        std::ifstream is(fs::path(DYNPOOL_SOURCE_DIR) / "configs" / (name + ".json"));
        ASSERT_TRUE(is) << name;
        const ModelConfig cfg = nlohmann::json::parse(is).get<ModelConfig>();
        EXPECT_EQ(cfg, presets::by_name(name)) << name;
    }
    EXPECT_THROW(presets::by_name("nope"), std::invalid_argument);
}

TEST(Presets, FixedPoolingDownsamplesByTheTargetFactor) {
    for (const auto& name : presets::names()) EXPECT_DOUBLE_EQ(presets::by_name(name).total_downsampling(), 4.0) << name;
}

TEST(Chunks, TargetsAreBasesStartingInside) {
    ReadRecord r;
    r.sequence = "ACGT";
    r.event_bounds = {0, 3, 5, 9};
    r.signal.assign(12, 0.f);
    EXPECT_EQ(extract_chunk(r, 2, 5).target, "CG");
    EXPECT_EQ(extract_chunk(r, 0, 12).target, "ACGT");
    EXPECT_THROW(extract_chunk(r, 8, 5), std::out_of_range);
}

TEST(Training, SmokeRunLogsAndCheckpoints) {
    const auto ds = generate_dataset(21, 40, GeneratorConfig{});
    Model<float> model(presets::smoke(), 3);
    const auto dir = scratch("smoke");
    auto tc = tiny_schedule();
    tc.schedule.first_cycle = 60;
    tc.schedule.cycles = 2;
    const auto summary = train(model, ds, tc, dir);
    EXPECT_EQ(summary.steps, 185u);
    const auto log = read_jsonl(dir / "train_log.jsonl");
    ASSERT_EQ(log.size(), 185u);
    for (const auto& line : log) EXPECT_NEAR(line.at("batch_mean_length_factor").get<double>(), 0.25, 1e-5);
    double first = 0, last = 0;
    for (std::size_t k = 0; k < 20; ++k) {
        first += log[k].at("loss").get<double>();
        last += log[log.size() - 1 - k].at("loss").get<double>();
    }
    EXPECT_LT(last, first);
    EXPECT_LT(summary.final_valid_loss, summary.init_valid_loss);
    const auto vlog = read_jsonl(dir / "valid_log.jsonl");
    ASSERT_EQ(vlog.size(), 3u);
    EXPECT_EQ(vlog[0].at("at"), "init");
    EXPECT_EQ(vlog[2].at("step"), 185);
    for (const char* f : {"checkpoint_cycle0.dpk", "checkpoint_cycle1.dpk", "model.dpk"}) EXPECT_TRUE(fs::exists(dir / f)) << f;

    const auto loaded = load_model<float>(load_checkpoint(dir / "model.dpk"));
    EXPECT_EQ(loaded->config(), model.config());
    const auto& r = ds.test.front();
    const auto a = call_read(model, r), b = call_read(*loaded, r);
    EXPECT_EQ(a.sequence, b.sequence);
    EXPECT_EQ(a.quality, b.quality);
    fs::remove_all(dir);
}

TEST(Training, AlignerHeadTrains) {
    const auto ds = generate_dataset(22, 30, GeneratorConfig{});
    Model<float> model(presets::smoke_rna(), 4);
    const auto dir = scratch("rna");
    const auto summary = train(model, ds, tiny_schedule(), dir);
    EXPECT_EQ(summary.steps, 65u);
    EXPECT_LT(summary.final_valid_loss, summary.init_valid_loss);
    const auto c = call_read(model, ds.test.front(), CallOptions{true, {8, 2}, true});
    EXPECT_EQ(c.quality.size(), c.sequence.size());
    fs::remove_all(dir);
}

TEST(Training, NonFiniteParametersRaiseDivergence) {
    const auto ds = generate_dataset(23, 20, GeneratorConfig{});
    Model<float> model(presets::smoke(), 5);
    // poisons the logits only, so the first training step sees a NaN loss
    model.store().find("head.bias")->value[0] = std::numeric_limits<float>::quiet_NaN();
    const auto dir = scratch("nan");
    EXPECT_THROW(train(model, ds, tiny_schedule(), dir), DivergenceError);
    fs::remove_all(dir);
}

TEST(Training, SameSeedSameWeights) {
    const auto ds = generate_dataset(24, 20, GeneratorConfig{});
    auto tc = tiny_schedule();
    tc.schedule.cycles = 1;
    Model<float> a(presets::smoke(), 6), b(presets::smoke(), 6);
    const auto d1 = scratch("det1"), d2 = scratch("det2");
    train(a, ds, tc, d1);
    train(b, ds, tc, d2);
    for (std::size_t i = 0; i < a.store().size(); ++i) {
        const auto x = a.store()[i].value.data(), y = b.store()[i].value.data();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << a.store()[i].name;
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Basecall, EmptySignalGivesEmptyCall) {
    Model<float> model(presets::smoke(), 1);
    ReadRecord r;
    r.read_id = "empty";
    const auto c = call_read(model, r);
    EXPECT_TRUE(c.sequence.empty());
    EXPECT_TRUE(c.quality.empty());
    r.signal.assign(2, 0.5f);
    EXPECT_NO_THROW(call_read(model, r));
}

TEST(Basecall, ThreadCountDoesNotChangeCalls) {
    const auto ds = generate_dataset(25, 30, GeneratorConfig{});
    Model<float> model(presets::smoke(), 2);
    const auto one = call_reads(model, ds.train, CallOptions{true, {4, 2}, true}, 1);
    const auto three = call_reads(model, ds.train, CallOptions{true, {4, 2}, true}, 3);
    ASSERT_EQ(one.size(), three.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_EQ(one[i].read_id, three[i].read_id);
        EXPECT_EQ(one[i].sequence, three[i].sequence);
        EXPECT_EQ(one[i].quality, three[i].quality);
        ASSERT_TRUE(one[i].trace && three[i].trace);
        EXPECT_EQ(one[i].trace->positions, three[i].trace->positions);
    }
}

TEST(Basecall, CheckpointForAnotherArchitectureIsRejected) {
    Model<float> osprey(presets::osprey_mini(true), 1);
    const auto ck = snapshot(osprey.store(), {{"model", osprey.config()}});
    const auto heron = presets::heron_mini(true);
    try {
        load_model<float>(ck, &heron);
        FAIL() << "expected mismatch";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("missing tensors"), std::string::npos) << msg;
        EXPECT_NE(msg.find("b2."), std::string::npos) << msg;
    }
}

TEST(Basecall, FastqRoundTrip) {
    std::vector<CallResult> calls(2);
    calls[0].read_id = "r0";
    calls[0].sequence = "ACGT";
    calls[0].quality = {1, 2, 30, 50};
    calls[1].read_id = "r1";
    std::stringstream ss;
    write_calls_fastq(ss, calls);
    const auto back = read_fastq(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].sequence, "ACGT");
    EXPECT_EQ(back[0].quality, calls[0].quality);
    EXPECT_EQ(back[1].id, "r1");
    EXPECT_TRUE(back[1].sequence.empty());
}
