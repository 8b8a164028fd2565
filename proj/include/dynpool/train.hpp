#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <string>
#include <vector>

#include "dynpool/basecall.hpp"
#include "dynpool/checkpoint.hpp"
#include "dynpool/evaluate.hpp"
#include "dynpool/model.hpp"
#include "dynpool/optimizer.hpp"
#include "dynpool/siggen.hpp"

namespace dynpool {

struct TrainConfig {
    ScheduleSpec schedule{};
    AdamWOptions adam{};
    std::size_t batch_size = 16;
    std::size_t chunk_length = 1000;
    std::uint64_t seed = 1;
    /// Held-out reads scored at initialization and after every cycle.
    std::size_t valid_reads = 20;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0;

    friend void to_json(nlohmann::json& j, const TrainConfig& c) {
        j = {{"max_lr", c.schedule.max_lr},
             {"warmup", c.schedule.warmup},
             {"first_cycle", c.schedule.first_cycle},
             {"cycles", c.schedule.cycles},
             {"beta1", c.adam.beta1},
             {"beta2", c.adam.beta2},
             {"adam_eps", c.adam.eps},
             {"weight_decay", c.adam.weight_decay},
             {"batch_size", c.batch_size},
             {"chunk_length", c.chunk_length},
             {"seed", c.seed},
             {"valid_reads", c.valid_reads},
             {"grad_clip", c.grad_clip}};
    }

    friend void from_json(const nlohmann::json& j, TrainConfig& c) {
        c = TrainConfig{};
        c.schedule.max_lr = j.value("max_lr", c.schedule.max_lr);
        c.schedule.warmup = j.value("warmup", c.schedule.warmup);
        c.schedule.first_cycle = j.value("first_cycle", c.schedule.first_cycle);
        c.schedule.cycles = j.value("cycles", c.schedule.cycles);
        c.adam.beta1 = j.value("beta1", c.adam.beta1);
        c.adam.beta2 = j.value("beta2", c.adam.beta2);
        c.adam.eps = j.value("adam_eps", c.adam.eps);
        c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.chunk_length = j.value("chunk_length", c.chunk_length);
        c.seed = j.value("seed", c.seed);
        c.valid_reads = j.value("valid_reads", c.valid_reads);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
    }
};

struct Chunk {
    std::vector<float> signal;
    std::string target;  // bases whose event starts inside the chunk
};

inline Chunk extract_chunk(const ReadRecord& r, std::size_t start, std::size_t length) {
    if (start + length > r.signal.size()) throw std::out_of_range("chunk exceeds read " + r.read_id);
    Chunk c;
    c.signal.assign(r.signal.begin() + std::ptrdiff_t(start), r.signal.begin() + std::ptrdiff_t(start + length));
    for (std::size_t j = 0; j < r.sequence.size(); ++j)
        if (r.event_bounds[j] >= start && r.event_bounds[j] < start + length) c.target.push_back(r.sequence[j]);
    return c;
}

/// Draws random fixed-length chunks from reads that are long enough.
class ChunkSampler {
public:
    ChunkSampler(const std::vector<ReadRecord>& reads, std::size_t length, std::uint64_t seed)
        : reads_(&reads), length_(length), rng_(seed) {
        for (std::size_t i = 0; i < reads.size(); ++i)
            if (reads[i].signal.size() >= length) eligible_.push_back(i);
        if (eligible_.empty()) throw std::invalid_argument("no read has at least " + std::to_string(length) + " samples");
    }

    Chunk next() {
        std::uniform_int_distribution<std::size_t> pick(0, eligible_.size() - 1);
        const auto& r = (*reads_)[eligible_[pick(rng_)]];
        std::uniform_int_distribution<std::size_t> start(0, r.signal.size() - length_);
        return extract_chunk(r, start(rng_), length_);
    }

private:
    const std::vector<ReadRecord>* reads_;
    std::size_t length_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> eligible_;
};

template <class T>
Tensor<T> stack_chunks(const std::vector<Chunk>& chunks) {
    const std::size_t L = chunks.empty() ? 0 : chunks.front().signal.size();
    Tensor<T> x(Shape{chunks.size(), L, 1});
    for (std::size_t b = 0; b < chunks.size(); ++b) std::copy(chunks[b].signal.begin(), chunks[b].signal.end(), x.ptr() + b * L);
    return x;
}

struct StepResult {
    double loss = std::numeric_limits<double>::quiet_NaN();
    double batch_mean_length_factor = std::numeric_limits<double>::quiet_NaN();
    std::size_t unalignable = 0;
};

/// One forward/backward pass over a batch; gradients are accumulated into the store.
template <class T>
StepResult train_step(Model<T>& model, const std::vector<Chunk>& batch) {
    StepResult res;
    Tape<T> tape;
    std::vector<std::string> targets;
    for (const auto& c : batch) targets.push_back(c.target);
    auto out = model.forward(tape, tape.constant(stack_chunks<T>(batch)), {}, Mode::train);
    res.batch_mean_length_factor = out.batch_mean_length_factor();
    if (out.empty) {
        res.unalignable = batch.size();
        return res;
    }
    std::vector<bool> ok;
    Var<T> loss = model.loss(out, targets, ok);
    res.unalignable = std::size_t(std::count(ok.begin(), ok.end(), false));
    if (!loss.valid()) return res;
    res.loss = double(loss.value().item());
    if (!std::isfinite(res.loss)) return res;
    tape.backward(loss);
    return res;
}

/// Mean per-base loss over fixed chunks in eval mode (no parameter or statistic updates).
template <class T>
double held_out_loss(const Model<T>& model, const std::vector<Chunk>& chunks) {
    double total = 0, bases = 0;
    for (const auto& c : chunks) {
        Tape<T> tape(false);
        auto out = model.forward(tape, tape.constant(stack_chunks<T>({c})), {}, Mode::eval);
        if (out.empty) continue;
        std::vector<bool> ok;
        Var<T> loss = model.loss(out, {c.target}, ok);
        if (!loss.valid()) continue;
        const double n = double(std::max<std::size_t>(c.target.size(), 1));
        total += double(loss.value().item()) * n;
        bases += n;
    }
    return bases > 0 ? total / bases : std::numeric_limits<double>::quiet_NaN();
}

template <class T>
double clip_gradients(ParameterStore<T>& store, double max_norm) {
    double sq = 0;
    for (std::size_t i = 0; i < store.size(); ++i)
        if (store[i].trainable)
            for (T g : store[i].grad.data()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (std::size_t i = 0; i < store.size(); ++i)
            if (store[i].trainable)
                for (T& g : store[i].grad.data()) g = T(double(g) * s);
    }
    return norm;
}

struct TrainSummary {
    std::size_t steps = 0;
    std::size_t unalignable_chunks = 0;
    double init_valid_loss = 0;
    double final_valid_loss = 0;
    std::filesystem::path checkpoint;
};

/// Thrown when training diverges; the last cycle checkpoint (if any) is left in place.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Trains `model` on the dataset's train split, writing into `out_dir`:
/// train_log.jsonl (one line per step), valid_log.jsonl (initial state and every cycle end),
/// checkpoint_cycle<c>.dpk at each cycle end and model.dpk (latest good checkpoint).
template <class T>
TrainSummary train(Model<T>& model, const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                   std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
    std::ofstream vlog(out_dir / "valid_log.jsonl", std::ios::trunc);
    if (!log || !vlog) throw std::runtime_error("cannot write logs in " + out_dir.string());

    ChunkSampler sampler(data.train, cfg.chunk_length, cfg.seed * 0x9e3779b97f4a7c15ull + 1);
    std::vector<Chunk> valid_chunks;
    {
        const auto& pool = data.valid.empty() ? data.train : data.valid;
        ChunkSampler vs(pool, cfg.chunk_length, cfg.seed + 17);
        for (std::size_t k = 0; k < cfg.valid_reads; ++k) valid_chunks.push_back(vs.next());
    }
    const nlohmann::json metadata_base = {{"model", model.config()}, {"train", cfg}};

    auto validate = [&](const std::string& label, std::size_t step) {
        const double vl = held_out_loss(model, valid_chunks);
        std::vector<double> acc;
        for (const auto& c : valid_chunks) {
            ReadRecord r;
            r.signal = c.signal;
            auto call = call_read(model, r, CallOptions{false, {}, false});
            acc.push_back(read_accuracy(call.sequence, c.target));
        }
        nlohmann::json line = {{"at", label}, {"step", step}, {"valid_loss", vl}, {"valid_median_accuracy", median(acc)}};
        vlog << line.dump() << '\n';
        vlog.flush();
        if (progress) *progress << "valid " << line.dump() << '\n';
        return vl;
    };

    TrainSummary summary;
    summary.init_valid_loss = validate("init", 0);
    summary.final_valid_loss = summary.init_valid_loss;

    AdamW<T> opt(cfg.adam);
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t total = cfg.schedule.total_steps();
    std::size_t cycle = 0;
    for (std::size_t step = 0; step < total; ++step) {
        std::vector<Chunk> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(sampler.next());
        model.store().zero_grad();
        StepResult r;
        try {
            r = train_step(model, batch);
        } catch (const NumericError& e) {
            throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step));
        }
        summary.unalignable_chunks += r.unalignable;
        if (std::isnan(r.loss) && r.unalignable == batch.size()) {
            // nothing to learn from this batch
        } else if (!std::isfinite(r.loss)) {
            throw DivergenceError("loss became non-finite at step " + std::to_string(step));
        } else {
            if (cfg.grad_clip > 0) clip_gradients(model.store(), cfg.grad_clip);
            try {
                opt.step(model.store(), lr_at(step, cfg.schedule));
            } catch (const NumericError& e) {
                throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step));
            }
        }
        const auto wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        nlohmann::json line = {{"step", step},
                               {"lr", lr_at(step, cfg.schedule)},
                               {"loss", std::isfinite(r.loss) ? nlohmann::json(r.loss) : nlohmann::json(nullptr)},
                               {"batch_mean_length_factor", std::isfinite(r.batch_mean_length_factor)
                                                                ? nlohmann::json(r.batch_mean_length_factor)
                                                                : nlohmann::json(nullptr)},
                               {"unalignable", r.unalignable},
                               {"wall_ms", std::llround(wall_ms)}};
        log << line.dump() << '\n';
        if (progress && (step % 50 == 0 || step + 1 == total)) *progress << line.dump() << '\n';
        summary.steps = step + 1;
        if (step + 1 == cfg.schedule.cycle_end(cycle)) {
            log.flush();
            summary.final_valid_loss = validate("cycle" + std::to_string(cycle), step + 1);
            auto meta = metadata_base;
            meta["step"] = step + 1;
            meta["cycle"] = cycle;
            const auto ck = snapshot(model.store(), meta);
            save_checkpoint(out_dir / ("checkpoint_cycle" + std::to_string(cycle) + ".dpk"), ck);
            save_checkpoint(out_dir / "model.dpk", ck);
            summary.checkpoint = out_dir / "model.dpk";
            ++cycle;
        }
    }
    return summary;
}

/// Rebuilds a model from a checkpoint's embedded configuration (or `config` when given).
template <class T>
std::unique_ptr<Model<T>> load_model(const Checkpoint& ck, const ModelConfig* config = nullptr) {
    ModelConfig cfg = config ? *config : ck.metadata.at("model").get<ModelConfig>();
    auto model = std::make_unique<Model<T>>(cfg);
    restore(model->store(), ck);
    return model;
}

}  // namespace dynpool
