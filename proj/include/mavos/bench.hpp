#pragma once

#include <chrono>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mavos/segmenter.hpp"
#include "mavos/synthgen.hpp"

namespace mavos {

// Latency and memory sweep: stream synthetic video through the segmenter
// under each eviction policy and record, per frame, how many tokens the
// bank holds and how long the frame took. The weights are fixed random,
// never trained; the growth (or flatness) under test is a property of the
// policy, not of accuracy.

struct BenchConfig {
    std::vector<std::string> policies{"full", "window:4", "refprev", "mca"};
    std::vector<long> lengths{128};
    int delta = 10;
    int grid = 64;
    int d = 32;
    int levels = 2;
    std::string precision = "f32";  // f32 | f64
    int warmup = 3;                 // leading frames dropped from the report
    int repetitions = 5;            // timing reps per cell; median wins
    uint64_t seed = 1;
    std::string out_path = "bench.csv";
    bool parallel = false;  // when true, (policy, length) cells may run on
                            // worker threads; a single timed stream never splits

    void validate() const;
};

struct BenchRow {
    std::string policy;
    long video_length = 0;
    long frame_index = 0;
    size_t tokens_stored = 0;
    size_t logical_bytes = 0;
    double ms_per_frame = 0.0;  // median over repetitions, quantized to 4 decimals

    bool operator==(const BenchRow&) const = default;
};

// "full", "refprev", "mca", or "window:N".
void parse_bench_policy(const std::string& s, MemoryPolicy& policy, int& window);

double median(std::vector<double> v);

// Worker cap: MAVOS_THREADS when set and valid, else 1.
int env_thread_cap();

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(const std::string& path);

// Least-squares slope of ms against frame index over rows with
// frame_index >= t0, for one policy. Used to decide whether a latency
// curve is flat.
double latency_slope(const std::vector<BenchRow>& rows, const std::string& policy, long t0);

namespace detail {

inline double quantize4(double x) {
    return std::round(x * 1e4) / 1e4;
}

}  // namespace detail

// One (policy, length) cell: repetitions of the same deterministic stream,
// timed per frame with a monotonic clock. Stats come from the first
// repetition; every repetition replays the identical frame sequence.
template <typename T>
std::vector<BenchRow> bench_cell(const BenchConfig& bc, const std::string& policy_str, long length,
                                 std::ostream* log) {
    StreamOptions opt;
    opt.delta = bc.delta;
    parse_bench_policy(policy_str, opt.policy, opt.window);

    ModelConfig mc;
    mc.d = bc.d;
    mc.levels = bc.levels;
    mc.grid = bc.grid;
    mc.seed = bc.seed;
    mc.validate();
    Model<T> m = make_model<T>(mc);

    SynthConfig sc;
    sc.grid = bc.grid;
    sc.n_objects = 2;
    sc.frames = length;
    sc.seed = bc.seed + 17;

    std::vector<std::vector<double>> ms(static_cast<size_t>(length));
    std::vector<size_t> tokens(static_cast<size_t>(length)), bytes(static_cast<size_t>(length));

    for (int rep = 0; rep < bc.repetitions; ++rep) {
        StreamState<T> st;
        {
            Graph<T> g;
            ModelVars mv = lift(g, m, false);
            init_stream(g, mv, m, st, frame_to_tensor<T>(render_pixels(sc, 0)),
                        render_masks(sc, 0), opt);
        }
        for (long t = 1; t < length; ++t) {
            Tensor<T> image = frame_to_tensor<T>(render_pixels(sc, t));
            auto t0 = std::chrono::steady_clock::now();
            {
                Graph<T> g;
                ModelVars mv = lift(g, m, false);
                segment_frame(g, mv, m, st, t, image);
            }
            auto t1 = std::chrono::steady_clock::now();
            ms[static_cast<size_t>(t)].push_back(
                std::chrono::duration<double, std::milli>(t1 - t0).count());
            if (rep == 0) {
                MemoryStats s = st.bank.stats();
                tokens[static_cast<size_t>(t)] = s.token_count;
                bytes[static_cast<size_t>(t)] = s.logical_bytes;
            }
        }
    }

    std::vector<BenchRow> rows;
    for (long t = std::max<long>(1, bc.warmup); t < length; ++t) {
        BenchRow r;
        r.policy = policy_str;
        r.video_length = length;
        r.frame_index = t;
        r.tokens_stored = tokens[static_cast<size_t>(t)];
        r.logical_bytes = bytes[static_cast<size_t>(t)];
        r.ms_per_frame = detail::quantize4(median(ms[static_cast<size_t>(t)]));
        rows.push_back(std::move(r));
    }
    if (log != nullptr) {
        *log << "bench " << policy_str << " length " << length << ": " << rows.size()
             << " rows\n";
    }
    return rows;
}

template <typename T>
std::vector<BenchRow> run_bench_t(const BenchConfig& bc, std::ostream* log);

std::vector<BenchRow> run_bench(const BenchConfig& bc, std::ostream* log = nullptr);

}  // namespace mavos
