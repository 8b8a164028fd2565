// dynpool: dataset generation, training, base calling, evaluation, gradient audit, plot export.
// Exit codes: 0 ok, 1 runtime failure, 2 usage error (bad flags, missing inputs).

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>

#include "dynpool/basecall.hpp"
#include "dynpool/checkpoint.hpp"
#include "dynpool/evaluate.hpp"
#include "dynpool/grad_check.hpp"
#include "dynpool/model.hpp"
#include "dynpool/siggen.hpp"
#include "dynpool/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dynpool;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError(p.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
}

void ensure_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
    const auto probe = dir / ".write_probe";
    {
        std::ofstream t(probe);
        if (!t) throw UsageError("output directory is not writable: " + dir.string());
    }
    fs::remove(probe, ec);
}

void require_exists(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::unique_ptr<Model<float>> open_model(const fs::path& path) {
    require_exists(path, "checkpoint");
    return load_model<float>(load_checkpoint(path));
}

// ---- generate

struct GenerateArgs {
    std::uint64_t seed = 1;
    std::size_t reads = 0;
    fs::path out;
    fs::path config;
    double speed_min = 0.7, speed_max = 1.4;
};

int run_generate(const GenerateArgs& a, CLI::App& sub) {
    if (a.reads == 0) throw UsageError("--reads must be at least 1");
    GeneratorConfig cfg;
    if (!a.config.empty()) cfg = read_json_file(a.config).get<GeneratorConfig>();
    if (sub.count("--speed-min")) cfg.speed.min = a.speed_min;
    if (sub.count("--speed-max")) cfg.speed.max = a.speed_max;
    try {
        cfg.speed.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (fs::exists(a.out) && !fs::is_empty(a.out)) throw UsageError("output directory exists and is not empty: " + a.out.string());
    ensure_out_dir(a.out);
    const auto ds = generate_dataset(a.seed, a.reads, cfg);
    save_dataset(a.out, ds);
    std::cout << "wrote " << ds.train.size() << "/" << ds.valid.size() << "/" << ds.test.size() << " reads to " << a.out.string()
              << '\n';
    return 0;
}

// ---- train

struct TrainArgs {
    fs::path data, out, model_config, train_config;
    std::string preset = "osprey-mini-dynpool";
    std::uint64_t seed = 1;
    std::optional<std::size_t> cycles, first_cycle, warmup, batch_size;
    std::optional<double> max_lr;
    bool quiet = false;
};

int run_train(const TrainArgs& a, CLI::App& sub) {
    require_exists(a.data, "dataset");
    ModelConfig mc;
    if (!a.model_config.empty()) {
        mc = read_json_file(a.model_config).get<ModelConfig>();
    } else {
        try {
            mc = presets::by_name(a.preset);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    TrainConfig tc;
    if (!a.train_config.empty()) tc = read_json_file(a.train_config).get<TrainConfig>();
    if (sub.count("--seed") || a.train_config.empty()) tc.seed = a.seed;
    if (a.cycles) tc.schedule.cycles = *a.cycles;
    if (a.first_cycle) tc.schedule.first_cycle = *a.first_cycle;
    if (a.warmup) tc.schedule.warmup = *a.warmup;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.max_lr) tc.schedule.max_lr = *a.max_lr;
    if (tc.batch_size == 0 || tc.chunk_length == 0) throw UsageError("batch size and chunk length must be positive");

    const Dataset ds = load_dataset(a.data);
    if (ds.train.empty()) throw UsageError("dataset has no training reads");
    ensure_out_dir(a.out);
    write_json_file(a.out / "config.json", {{"model", mc}, {"train", tc}});

    Model<float> model(mc, tc.seed);
    const auto s = train(model, ds, tc, a.out, a.quiet ? nullptr : &std::cerr);
    std::cout << "trained " << s.steps << " steps; held-out loss " << fmt(s.init_valid_loss) << " -> "
              << fmt(s.final_valid_loss) << "; checkpoint " << s.checkpoint.string() << '\n';
    return 0;
}

// ---- basecall

struct BasecallArgs {
    fs::path model, data, out;
    std::string split = "test";
    std::size_t beam = 0;
    std::size_t limit = 0;
    std::size_t threads = 1;
};

int run_basecall(const BasecallArgs& a) {
    auto model = open_model(a.model);
    require_exists(a.data, "dataset");
    const Dataset ds = load_dataset(a.data);
    std::vector<ReadRecord> reads = ds.split(a.split);
    if (a.limit && reads.size() > a.limit) reads.resize(a.limit);
    ensure_out_dir(a.out);

    CallOptions opts;
    opts.beam = a.beam > 0;
    if (opts.beam) opts.beam_options.width = a.beam;
    const auto t0 = std::chrono::steady_clock::now();
    const auto calls = call_reads(*model, reads, opts, a.threads);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto fq = open_out(a.out / "calls.fastq");
    write_calls_fastq(fq, calls);
    auto tr = open_out(a.out / "traces.tsv");
    write_trace_tsv(tr, calls);

    std::size_t signals = 0;
    for (const auto& r : reads) signals += r.signal.size();
    write_json_file(a.out / "timing.json", {{"reads", reads.size()},
                                            {"signals", signals},
                                            {"seconds", secs},
                                            {"threads", a.threads},
                                            {"signals_per_second", secs > 0 ? double(signals) / secs : 0.0},
                                            {"decoder", opts.beam ? "beam" : "greedy"}});
    std::cout << "called " << calls.size() << " reads, " << fmt(secs > 0 ? signals / secs : 0) << " signals/s\n";
    return 0;
}

// ---- eval

struct EvalArgs {
    fs::path calls, data, traces, out;
    std::string split = "test";
};

int run_eval(const EvalArgs& a) {
    require_exists(a.calls, "calls file");
    require_exists(a.data, "dataset");
    if (!a.traces.empty()) require_exists(a.traces, "traces file");
    std::ifstream fin(a.calls);
    const auto calls = read_fastq(fin);
    const Dataset ds = load_dataset(a.data);
    std::map<std::string, const ReadRecord*> refs;
    for (const auto& r : ds.split(a.split)) refs[r.read_id] = &r;

    std::map<std::string, double> factors;
    if (!a.traces.empty()) {
        std::ifstream tin(a.traces);
        std::string line;
        std::getline(tin, line);
        while (std::getline(tin, line)) {
            std::istringstream ss(line);
            std::string id, t, len, mlf;
            if (std::getline(ss, id, '\t') && std::getline(ss, t, '\t') && std::getline(ss, len, '\t') && std::getline(ss, mlf))
                factors[id] = std::stod(mlf);
        }
    }

    std::vector<ReadEval> evals;
    for (const auto& c : calls) {
        auto it = refs.find(c.id);
        if (it == refs.end()) throw std::runtime_error("no reference for read '" + c.id + "' in split " + a.split);
        ReadEval e;
        e.read_id = c.id;
        e.alignment = align(c.sequence, it->second->sequence);
        e.accuracy = read_accuracy(c.sequence, it->second->sequence);
        e.empty_call = c.sequence.empty();
        e.speed = it->second->speed;
        if (auto f = factors.find(c.id); f != factors.end()) e.mean_length_factor = f->second;
        evals.push_back(e);
    }
    const EvalReport rep = summarize(std::move(evals));

    ensure_out_dir(a.out);
    json j = {{"reads", rep.reads.size()}, {"median_accuracy", rep.median_accuracy}, {"empty_calls", rep.empty_calls}};
    if (rep.has_length_factors)
        j["length_factor_vs_speed"] = {
            {"slope", rep.speed_fit.slope}, {"intercept", rep.speed_fit.intercept}, {"r2", rep.speed_fit.r2}};
    write_json_file(a.out / "report.json", j);

    auto tsv = open_out(a.out / "per_read.tsv");
    tsv << "read_id\taccuracy\tmatches\tmismatches\tinsertions\tdeletions\tempty_call\tspeed\tmean_length_factor\n";
    for (const auto& e : rep.reads)
        tsv << e.read_id << '\t' << fmt(e.accuracy) << '\t' << e.alignment.matches << '\t' << e.alignment.mismatches << '\t'
            << e.alignment.insertions << '\t' << e.alignment.deletions << '\t' << (e.empty_call ? 1 : 0) << '\t'
            << fmt(e.speed) << '\t' << (std::isfinite(e.mean_length_factor) ? fmt(e.mean_length_factor) : "NA") << '\n';

    std::cout << "median accuracy " << fmt(rep.median_accuracy) << " over " << rep.reads.size() << " reads";
    if (rep.has_length_factors) std::cout << "; r2 " << fmt(rep.speed_fit.r2);
    std::cout << '\n';
    return 0;
}

// ---- gradcheck

struct GradcheckArgs {
    std::uint64_t seed = 1;
    std::size_t seeds = 5;
    std::vector<std::string> ops;
    fs::path out;
    bool list = false;
};

int run_gradcheck(const GradcheckArgs& a) {
    auto cases = gradcases::registry();
    if (a.list) {
        for (const auto& c : cases) std::cout << c.name << '\n';
        return 0;
    }
    std::set<std::string> wanted(a.ops.begin(), a.ops.end());
    for (const auto& w : wanted)
        if (std::none_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == w; }))
            throw UsageError("unknown op '" + w + "' (see --list)");

    json results = json::array();
    bool ok = true;
    for (const auto& c : cases) {
        if (!wanted.empty() && !wanted.count(c.name)) continue;
        bool case_ok = true;
        double worst_rel = 0, worst_abs = 0;
        for (std::uint64_t s = a.seed; s < a.seed + a.seeds; ++s) {
            const auto rep = grad_check(c, s);
            for (const auto& t : rep.tensors) {
                worst_rel = std::max(worst_rel, t.max_rel_error);
                worst_abs = std::max(worst_abs, t.max_abs_error);
                if (!t.pass()) {
                    case_ok = false;
                    std::cerr << "FAIL " << c.name << " seed " << s << " " << t.name << ": " << t.failures << "/" << t.checked
                              << " elements out of tolerance (max rel " << fmt(t.max_rel_error) << ")\n";
                }
                results.push_back({{"op", c.name},
                                   {"seed", s},
                                   {"tensor", t.name},
                                   {"checked", t.checked},
                                   {"failures", t.failures},
                                   {"max_rel_error", t.max_rel_error},
                                   {"max_abs_error", t.max_abs_error}});
            }
        }
        std::printf("%-26s %s  max rel %.2e  max abs %.2e\n", c.name.c_str(), case_ok ? "ok  " : "FAIL", worst_rel, worst_abs);
        ok = ok && case_ok;
    }
    if (!a.out.empty()) {
        ensure_out_dir(a.out);
        write_json_file(a.out / "gradcheck.json", {{"pass", ok}, {"results", results}});
    }
    return ok ? 0 : 1;
}

// ---- export-plots

struct ExportArgs {
    fs::path model, data, out;
    std::string split = "test";
    std::size_t trace_reads = 5;
    std::size_t threads = 1;
};

int run_export(const ExportArgs& a) {
    auto model = open_model(a.model);
    require_exists(a.data, "dataset");
    const Dataset ds = load_dataset(a.data);
    const auto& reads = ds.split(a.split);
    ensure_out_dir(a.out);
    const auto calls = call_reads(*model, reads, CallOptions{false, {}, false}, a.threads);

    auto acc = open_out(a.out / "accuracy.tsv");
    acc << "read_id\taccuracy\n";
    for (std::size_t i = 0; i < calls.size(); ++i)
        acc << calls[i].read_id << '\t' << fmt(read_accuracy(calls[i].sequence, reads[i].sequence)) << '\n';

    if (!model->config().uses_dynpool()) {
        std::cout << "model has no dynamic pooling layer; wrote accuracy.tsv only\n";
        return 0;
    }
    auto sc = open_out(a.out / "length_factor_vs_speed.tsv");
    sc << "read_id\tspeed\tmean_length_factor\n";
    auto pos = open_out(a.out / "positions.tsv");
    pos << "read_id\tstep\tposition\n";
    for (std::size_t i = 0; i < calls.size(); ++i) {
        if (!calls[i].trace) continue;
        sc << calls[i].read_id << '\t' << fmt(reads[i].speed) << '\t' << fmt(calls[i].trace->mean_length_factor) << '\n';
        if (i < a.trace_reads)
            for (std::size_t k = 0; k < calls[i].trace->positions.size(); ++k)
                pos << calls[i].read_id << '\t' << k << '\t' << fmt(calls[i].trace->positions[k]) << '\n';
    }
    std::cout << "wrote plot data for " << calls.size() << " reads to " << a.out.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic pooling base caller toolkit"};
    app.require_subcommand(1);
    std::size_t threads = 1;
    app.add_option("--threads", threads, "Worker threads for read-parallel stages")->check(CLI::PositiveNumber)->capture_default_str();

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Simulate a synthetic read dataset");
    g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
    g->add_option("--reads", gen.reads, "Number of reads (split 80/10/10)")->required();
    g->add_option("--out", gen.out, "Output directory (must be new or empty)")->required();
    g->add_option("--config", gen.config, "Generator config JSON");
    g->add_option("--speed-min", gen.speed_min, "Lowest per-read speed multiplier")->capture_default_str();
    g->add_option("--speed-max", gen.speed_max, "Highest per-read speed multiplier")->capture_default_str();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model on a dataset's train split");
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--out", tr.out, "Output directory for logs and checkpoints")->required();
    t->add_option("--preset", tr.preset, "Model preset: " + [] {
        std::string s;
        for (const auto& n : presets::names()) s += (s.empty() ? "" : ", ") + n;
        return s;
    }())->capture_default_str();
    t->add_option("--model-config", tr.model_config, "Model config JSON (overrides --preset)");
    t->add_option("--train-config", tr.train_config, "Training config JSON");
    t->add_option("--seed", tr.seed, "Initialization and sampling seed")->capture_default_str();
    t->add_option("--cycles", tr.cycles, "Number of cosine cycles");
    t->add_option("--first-cycle", tr.first_cycle, "Length of the first cycle in batches");
    t->add_option("--warmup", tr.warmup, "Warmup batches");
    t->add_option("--batch-size", tr.batch_size, "Chunks per batch");
    t->add_option("--max-lr", tr.max_lr, "Peak learning rate");
    t->add_flag("--quiet", tr.quiet, "No progress on stderr");

    BasecallArgs bc;
    auto* b = app.add_subcommand("basecall", "Call reads with a trained checkpoint");
    b->add_option("--model", bc.model, "Checkpoint (.dpk)")->required();
    b->add_option("--data", bc.data, "Dataset directory")->required();
    b->add_option("--out", bc.out, "Output directory")->required();
    b->add_option("--split", bc.split, "Dataset split")->check(CLI::IsMember({"train", "valid", "test"}))->capture_default_str();
    b->add_option("--beam", bc.beam, "Beam width; 0 selects greedy decoding")->capture_default_str();
    b->add_option("--limit", bc.limit, "Call at most this many reads (0 = all)")->capture_default_str();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Score calls against reference sequences");
    e->add_option("--calls", ev.calls, "FASTQ written by basecall")->required();
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_option("--traces", ev.traces, "traces.tsv for the length-factor/speed fit");
    e->add_option("--out", ev.out, "Output directory")->required();
    e->add_option("--split", ev.split, "Dataset split")->check(CLI::IsMember({"train", "valid", "test"}))->capture_default_str();

    GradcheckArgs gc;
    auto* c = app.add_subcommand("gradcheck", "Finite-difference audit of every differentiable op");
    c->add_option("--seed", gc.seed, "First seed")->capture_default_str();
    c->add_option("--seeds", gc.seeds, "Number of seeds per op")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--op", gc.ops, "Restrict to these ops (repeatable)");
    c->add_option("--out", gc.out, "Write gradcheck.json here");
    c->add_flag("--list", gc.list, "List registered ops and exit");

    ExportArgs ex;
    auto* x = app.add_subcommand("export-plots", "Write TSV data for accuracy, length-factor and position plots");
    x->alias("export_plots");
    x->add_option("--model", ex.model, "Checkpoint (.dpk)")->required();
    x->add_option("--data", ex.data, "Dataset directory")->required();
    x->add_option("--out", ex.out, "Output directory")->required();
    x->add_option("--split", ex.split, "Dataset split")->check(CLI::IsMember({"train", "valid", "test"}))->capture_default_str();
    x->add_option("--trace-reads", ex.trace_reads, "Reads whose warped positions are exported")->capture_default_str();

    for (auto* sub : {g, t, b, e, c, x}) sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    try {
        if (*g) return run_generate(gen, *g);
        if (*t) return run_train(tr, *t);
        bc.threads = ex.threads = threads;
        if (*b) return run_basecall(bc);
        if (*e) return run_eval(ev);
        if (*c) return run_gradcheck(gc);
        if (*x) return run_export(ex);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 2;
}
