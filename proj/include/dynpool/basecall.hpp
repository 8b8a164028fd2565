#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "dynpool/decoders.hpp"
#include "dynpool/model.hpp"
#include "dynpool/siggen.hpp"

namespace dynpool {

struct CallOptions {
    bool beam = false;
    BeamOptions beam_options{};
    bool qualities = true;
};

struct CallResult {
    std::string read_id;
    std::string sequence;
    std::vector<int> quality;
    std::size_t signal_length = 0;
    std::optional<PoolingTrace> trace;
};

/// Decodes one read in eval mode. An empty signal (or one pooled to zero steps) gives an empty call.
template <class T>
CallResult call_read(const Model<T>& model, const ReadRecord& read, const CallOptions& opts = {}) {
    CallResult res;
    res.read_id = read.read_id;
    res.signal_length = read.signal.size();
    if (read.signal.empty()) return res;
    Tape<T> tape(false);
    Tensor<T> x(Shape{1, read.signal.size(), 1});
    std::copy(read.signal.begin(), read.signal.end(), x.ptr());
    auto out = model.forward(tape, tape.constant(std::move(x)), {}, Mode::eval);
    if (!out.traces.empty()) res.trace = out.traces.front();
    if (out.empty) return res;
    const auto& v = out.out.value();
    const std::size_t L = out.lengths.front();
    std::span<const T> rows(v.ptr(), L * v.dim(2));
    auto decode = [&](const auto& em) {
        res.sequence = opts.beam ? beam_decode(em, opts.beam_options) : greedy_decode(em);
        if (opts.qualities) res.quality = base_qualities(em, res.sequence);
        else res.quality.assign(res.sequence.size(), 0);
    };
    if (model.config().decoder == Decoder::ctc) decode(CtcEmissions(rows));
    else decode(RnaEmissions<T>(model.rna_head(), rows));
    return res;
}

/// Calls every read; reads are split over `threads` workers but results keep input order.
template <class T>
std::vector<CallResult> call_reads(const Model<T>& model, const std::vector<ReadRecord>& reads, const CallOptions& opts = {},
                                   std::size_t threads = 1) {
    std::vector<CallResult> out(reads.size());
    threads = std::max<std::size_t>(1, std::min(threads, reads.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < reads.size(); ++i) out[i] = call_read(model, reads[i], opts);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < reads.size(); i += threads) out[i] = call_read(model, reads[i], opts);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

inline void write_calls_fastq(std::ostream& os, const std::vector<CallResult>& calls) {
    for (const auto& c : calls) write_fastq(os, {c.read_id, c.sequence, c.quality});
}

/// Reads records written by write_fastq (four lines each).
inline std::vector<FastqRecord> read_fastq(std::istream& is) {
    std::vector<FastqRecord> out;
    std::string header, seq, plus, qual;
    while (std::getline(is, header)) {
        if (header.empty()) continue;
        if (header[0] != '@' || !std::getline(is, seq) || !std::getline(is, plus) || !std::getline(is, qual))
            throw std::runtime_error("malformed FASTQ record near '" + header + "'");
        FastqRecord r{header.substr(1), seq, {}};
        for (char c : qual) r.quality.push_back(int(c) - 33);
        out.push_back(std::move(r));
    }
    return out;
}

/// Per-read trace summary: read_id, T, output_length, mean_length_factor.
inline void write_trace_tsv(std::ostream& os, const std::vector<CallResult>& calls) {
    os << "read_id\tT\toutput_length\tmean_length_factor\n";
    char buf[64];
    for (const auto& c : calls) {
        if (!c.trace) continue;
        std::snprintf(buf, sizeof buf, "%.9g", c.trace->mean_length_factor);
        os << c.read_id << '\t' << c.signal_length << '\t' << c.trace->output_length << '\t' << buf << '\n';
    }
}

}  // namespace dynpool
