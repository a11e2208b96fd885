#pragma once

// Exact MAC accounting for every attention and aggregation component, plus
// the closed-form costs they must match. Counts come from the thread local
// counter that only the matmul and depthwise convolution kernels touch, so a
// measured number is the arithmetic actually executed, not an estimate.
// modality_specific rows are the cost of one modality; modality_shared rows
// already cover both modalities, matching the closed formula 2*2*T*S*d.

#include <chrono>
#include <fstream>
#include <map>
#include <thread>

#include "ecofuse/attention.hpp"

namespace ecofuse {

struct BenchConfig {
    std::vector<std::size_t> sweep_t = {128, 256, 512, 1024, 2048};
    std::size_t chunk = 32;
    std::size_t topk = 4;
    std::size_t d = 64;
    std::size_t d_m = 256;
    std::size_t kernel = 3;
    bool wall_clock = false;  // median of five warm runs per row
    std::size_t threads = 1;
    bool flops = false;  // display MACs doubled as FLOPs in summaries

    void validate() const {
        if (sweep_t.empty()) throw std::runtime_error("bench: empty sweep");
        if (chunk < 1 || topk < 1 || topk > chunk)
            throw std::runtime_error("bench: need 1 <= k <= C");
        if (d < 1 || d_m < 1 || kernel < 1 || kernel % 2 == 0)
            throw std::runtime_error("bench: bad widths or kernel");
        if (threads < 1) throw std::runtime_error("bench: threads must be >= 1");
        for (std::size_t t : sweep_t)
            if (t == 0 || t % chunk != 0)
                throw std::runtime_error("bench: T must be a positive multiple of C");
    }
};

inline const std::vector<std::string>& bench_components() {
    static const std::vector<std::string> names = {
        "baseline",   "modality_specific", "modality_specific_reorder",
        "modality_shared", "conagg_dwc",   "conagg_pwc",
        "projections"};
    return names;
}

inline std::uint64_t analytic_macs(const std::string& component, std::size_t T,
                                   std::size_t C, std::size_t k, std::size_t d,
                                   std::size_t d_m, std::size_t D) {
    const std::uint64_t n = T / C;
    const std::uint64_t S = 2 * n * k;
    if (component == "baseline") return 2ull * (2 * T) * (2 * T) * d;
    if (component == "modality_specific") return n * 2ull * C * C * d;
    if (component == "modality_specific_reorder") return n * 2ull * C * d * d;
    if (component == "modality_shared") return 2ull * 2ull * T * S * d;
    if (component == "conagg_dwc") return std::uint64_t(T) * D * d_m;
    if (component == "conagg_pwc") return std::uint64_t(T) * d_m * d_m;
    if (component == "projections")
        return std::uint64_t(T) * d_m * 2 * d + std::uint64_t(T) * d * d_m;
    throw std::runtime_error("bench: unknown component " + component);
}

namespace detail {

inline Tensor bench_randn(std::vector<std::size_t> shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(std::move(shape), rng, 0.1);
}

inline void run_component(const std::string& component, std::size_t T, std::size_t C,
                          std::size_t k, std::size_t d, std::size_t d_m, std::size_t D) {
    if (component == "baseline") {
        Tensor q = bench_randn({2 * T, d}, 11), key = bench_randn({2 * T, d}, 12),
               v = bench_randn({2 * T, d}, 13);
        Tensor a = softmax_rows(scale(matmul(q, transpose(key)), 1.0 / std::sqrt(double(d))));
        matmul(a, v);
        return;
    }
    if (component == "modality_specific" || component == "modality_specific_reorder") {
        ChunkLayout l = make_chunk_layout(T, C);
        Tensor q = bench_randn({T, d}, 21), key = bench_randn({T, d}, 22),
               v = bench_randn({T, d}, 23);
        std::vector<Tensor> qc = chunk_rows_value(q, l), kc = chunk_rows_value(key, l),
                            vc = chunk_rows_value(v, l);
        if (component == "modality_specific")
            specific_attention_value(qc, kc, vc, l, d);
        else
            specific_linear_value(qc, kc, vc, l, d);
        return;
    }
    if (component == "modality_shared") {
        const std::size_t S = 2 * (T / C) * k;
        Tensor k_bank = bench_randn({S, d}, 31), v_bank = bench_randn({S, d}, 32);
        for (std::uint64_t mod = 0; mod < 2; ++mod) {
            Tensor q = bench_randn({T, d}, 33 + mod);
            shared_attention_value(q, k_bank, v_bank, d);
        }
        return;
    }
    if (component == "conagg_dwc") {
        dwconv_time(bench_randn({d_m, T}, 41), bench_randn({d_m, D}, 42));
        return;
    }
    if (component == "conagg_pwc") {
        matmul(bench_randn({d_m, d_m}, 51), bench_randn({d_m, T}, 52));
        return;
    }
    if (component == "projections") {
        matmul(bench_randn({T, d_m}, 61), bench_randn({d_m, 2 * d}, 62));
        matmul(bench_randn({T, d}, 63), bench_randn({d, d_m}, 64));
        return;
    }
    throw std::runtime_error("bench: unknown component " + component);
}

}  // namespace detail

struct BenchRow {
    std::size_t T = 0, C = 0, k = 0, d = 0, d_m = 0;
    std::string component;
    std::uint64_t macs_measured = 0;
    std::uint64_t macs_analytic = 0;
    std::uint64_t wall_ns = 0;
};

inline BenchRow bench_one(const std::string& component, const BenchConfig& cfg,
                          std::size_t T) {
    BenchRow row;
    row.T = T;
    row.C = cfg.chunk;
    row.k = cfg.topk;
    row.d = cfg.d;
    row.d_m = cfg.d_m;
    row.component = component;
    row.macs_analytic = analytic_macs(component, T, cfg.chunk, cfg.topk, cfg.d, cfg.d_m,
                                      cfg.kernel);

    reset_macs();
    detail::run_component(component, T, cfg.chunk, cfg.topk, cfg.d, cfg.d_m, cfg.kernel);
    row.macs_measured = macs_used();

    if (cfg.wall_clock) {
        std::vector<std::uint64_t> samples;
        for (int rep = 0; rep < 5; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            detail::run_component(component, T, cfg.chunk, cfg.topk, cfg.d, cfg.d_m,
                                  cfg.kernel);
            const auto t1 = std::chrono::steady_clock::now();
            samples.push_back(std::uint64_t(
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        }
        std::sort(samples.begin(), samples.end());
        row.wall_ns = samples[samples.size() / 2];
    }
    return row;
}

inline std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
    cfg.validate();
    struct Job {
        std::size_t T;
        std::string component;
    };
    std::vector<Job> jobs;
    for (std::size_t T : cfg.sweep_t)
        for (const std::string& comp : bench_components()) jobs.push_back({T, comp});

    std::vector<BenchRow> rows(jobs.size());
    if (cfg.threads == 1) {
        for (std::size_t j = 0; j < jobs.size(); ++j)
            rows[j] = bench_one(jobs[j].component, cfg, jobs[j].T);
        return rows;
    }
    std::vector<std::thread> pool;
    std::vector<std::string> errors(cfg.threads);
    for (std::size_t w = 0; w < cfg.threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t j = w; j < jobs.size(); j += cfg.threads)
                    rows[j] = bench_one(jobs[j].component, cfg, jobs[j].T);
            } catch (const std::exception& e) {
                errors[w] = e.what();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::string& e : errors)
        if (!e.empty()) throw std::runtime_error("bench: worker failed: " + e);
    return rows;
}

// Least squares slope of log(macs) against log(T) for one component.
inline double component_slope(const std::vector<BenchRow>& rows, const std::string& component) {
    std::vector<double> xs, ys;
    for (const BenchRow& r : rows)
        if (r.component == component) {
            xs.push_back(std::log(double(r.T)));
            ys.push_back(std::log(double(r.macs_measured)));
        }
    if (xs.size() < 2) throw std::runtime_error("slope: need at least two sweep points");
    const double n = double(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) throw std::runtime_error("slope: degenerate sweep");
    return (n * sxy - sx * sy) / denom;
}

struct RatioCheck {
    std::size_t T = 0;
    std::uint64_t tiaa = 0;      // 2 * specific + shared, both modalities
    std::uint64_t baseline = 0;
    bool within_quarter = false;  // exact integer test 4 * tiaa <= baseline
};

inline std::vector<RatioCheck> attention_ratio(const std::vector<BenchRow>& rows) {
    std::map<std::size_t, RatioCheck> by_t;
    for (const BenchRow& r : rows) {
        RatioCheck& c = by_t[r.T];
        c.T = r.T;
        if (r.component == "baseline") c.baseline = r.macs_measured;
        if (r.component == "modality_specific") c.tiaa += 2 * r.macs_measured;
        if (r.component == "modality_shared") c.tiaa += r.macs_measured;
    }
    std::vector<RatioCheck> out;
    for (auto& [t, c] : by_t) {
        if (c.baseline == 0) throw std::runtime_error("ratio: missing baseline row");
        c.within_quarter = 4 * c.tiaa <= c.baseline;
        out.push_back(c);
    }
    return out;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("csv: cannot open " + path);
    out << "T,C,k,d,dm,component,macs_measured,macs_analytic,wall_ns\n";
    for (const BenchRow& r : rows)
        out << r.T << "," << r.C << "," << r.k << "," << r.d << "," << r.d_m << ","
            << r.component << "," << r.macs_measured << "," << r.macs_analytic << ","
            << r.wall_ns << "\n";
    if (!out) throw std::runtime_error("csv: write failed on " + path);
}

}  // namespace ecofuse
