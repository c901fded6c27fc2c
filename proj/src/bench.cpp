#include "mavos/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace mavos {

void BenchConfig::validate() const {
    if (policies.empty()) throw ConfigError("bench needs at least one policy");
    if (lengths.empty()) throw ConfigError("bench needs at least one video length");
    for (long l : lengths) {
        if (l < 2) throw ConfigError("bench lengths must be >= 2 frames");
    }
    if (repetitions < 1) throw ConfigError("bench needs repetitions >= 1");
    if (warmup < 0) throw ConfigError("bench warmup must be >= 0");
    if (delta <= 0) throw ConfigError("bench needs delta > 0");
    if (precision != "f32" && precision != "f64") {
        throw ConfigError("bench precision must be f32 or f64, got '" + precision + "'");
    }
    MemoryPolicy p;
    int w;
    for (const auto& s : policies) parse_bench_policy(s, p, w);
}

void parse_bench_policy(const std::string& s, MemoryPolicy& policy, int& window) {
    window = 4;
    auto colon = s.find(':');
    if (colon == std::string::npos) {
        policy = parse_policy(s);
        return;
    }
    std::string head = s.substr(0, colon);
    std::string tail = s.substr(colon + 1);
    if (head != "window" || tail.empty() ||
        !std::all_of(tail.begin(), tail.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw ConfigError("bad policy spec '" + s + "', expected window:N");
    }
    policy = MemoryPolicy::window;
    window = std::atoi(tail.c_str());
    if (window < 1) throw ConfigError("window size must be >= 1 in '" + s + "'");
}

double median(std::vector<double> v) {
    if (v.empty()) throw UsageError("median of an empty sample");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int env_thread_cap() {
    const char* e = std::getenv("MAVOS_THREADS");
    if (e == nullptr || *e == '\0') return 1;
    char* end = nullptr;
    long n = std::strtol(e, &end, 10);
    if (end == nullptr || *end != '\0' || n < 1) return 1;
    return static_cast<int>(std::min<long>(n, 64));
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "policy,video_length,frame_index,tokens_stored,logical_bytes,ms_per_frame\n";
    char ms[32];
    for (const auto& r : rows) {
        std::snprintf(ms, sizeof(ms), "%.4f", r.ms_per_frame);
        out << r.policy << "," << r.video_length << "," << r.frame_index << ","
            << r.tokens_stored << "," << r.logical_bytes << "," << ms << "\n";
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

std::vector<BenchRow> read_bench_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') {
        throw FormatError(path + ": CRLF line endings, expected LF");
    }
    if (line != "policy,video_length,frame_index,tokens_stored,logical_bytes,ms_per_frame") {
        throw FormatError(path + ": unexpected header '" + line + "'");
    }
    std::vector<BenchRow> rows;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 6) {
            throw FormatError(path + ": line " + std::to_string(lineno) + " has " +
                              std::to_string(f.size()) + " fields, expected 6");
        }
        BenchRow r;
        r.policy = f[0];
        r.video_length = std::atol(f[1].c_str());
        r.frame_index = std::atol(f[2].c_str());
        r.tokens_stored = static_cast<size_t>(std::strtoull(f[3].c_str(), nullptr, 10));
        r.logical_bytes = static_cast<size_t>(std::strtoull(f[4].c_str(), nullptr, 10));
        r.ms_per_frame = std::strtod(f[5].c_str(), nullptr);
        rows.push_back(std::move(r));
    }
    return rows;
}

double latency_slope(const std::vector<BenchRow>& rows, const std::string& policy, long t0) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    long n = 0;
    for (const auto& r : rows) {
        if (r.policy != policy || r.frame_index < t0) continue;
        double x = static_cast<double>(r.frame_index);
        sx += x;
        sy += r.ms_per_frame;
        sxx += x * x;
        sxy += x * r.ms_per_frame;
        ++n;
    }
    if (n < 2) throw UsageError("latency_slope needs at least two rows past t0");
    double denom = n * sxx - sx * sx;
    return (n * sxy - sx * sy) / denom;
}

template <typename T>
std::vector<BenchRow> run_bench_t(const BenchConfig& bc, std::ostream* log) {
    bc.validate();
    struct Cell {
        std::string policy;
        long length;
    };
    std::vector<Cell> cells;
    for (const auto& p : bc.policies) {
        for (long l : bc.lengths) cells.push_back({p, l});
    }
    std::vector<std::vector<BenchRow>> per_cell(cells.size());

    int workers = bc.parallel ? std::min<int>(env_thread_cap(), static_cast<int>(cells.size())) : 1;
    if (workers <= 1) {
        for (size_t i = 0; i < cells.size(); ++i) {
            per_cell[i] = bench_cell<T>(bc, cells[i].policy, cells[i].length, log);
        }
    } else {
        // Cells are independent; one worker never touches another's stream,
        // so timing inside a cell stays single-threaded.
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
                    per_cell[i] = bench_cell<T>(bc, cells[i].policy, cells[i].length, nullptr);
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    std::vector<BenchRow> rows;
    for (auto& c : per_cell) {
        rows.insert(rows.end(), c.begin(), c.end());
    }
    return rows;
}

template std::vector<BenchRow> run_bench_t<float>(const BenchConfig&, std::ostream*);
template std::vector<BenchRow> run_bench_t<double>(const BenchConfig&, std::ostream*);

std::vector<BenchRow> run_bench(const BenchConfig& bc, std::ostream* log) {
    if (bc.precision == "f64") return run_bench_t<double>(bc, log);
    return run_bench_t<float>(bc, log);
}

}  // namespace mavos
