#include <gtest/gtest.h>

#include <fstream>

#include "ecofuse/bench.hpp"

using namespace ecofuse;

namespace {

BenchConfig small_bench() {
    BenchConfig cfg;
    cfg.sweep_t = {32, 64};
    cfg.chunk = 8;
    cfg.topk = 2;
    cfg.d = 16;
    cfg.d_m = 32;
    return cfg;
}

std::uint64_t row_macs(const std::vector<BenchRow>& rows, std::size_t T,
                       const std::string& component) {
    for (const BenchRow& r : rows)
        if (r.T == T && r.component == component) return r.macs_measured;
    throw std::runtime_error("row not found");
}

}  // namespace

TEST(Analytic, MatchesWorkedExamples) {
    // full attention over a single stream of length 128 costs 2 * 128^2 * 64,
    // which is the fused baseline at T = 64
    EXPECT_EQ(analytic_macs("baseline", 64, 32, 4, 64, 256, 3), 2097152ull);
    EXPECT_EQ(analytic_macs("modality_specific", 128, 32, 4, 64, 256, 3), 524288ull);
    EXPECT_EQ(analytic_macs("modality_shared", 128, 32, 4, 64, 256, 3), 1048576ull);
    EXPECT_EQ(analytic_macs("conagg_dwc", 10, 32, 4, 64, 4, 3), 120ull);
    EXPECT_EQ(analytic_macs("conagg_pwc", 10, 32, 4, 64, 4, 3), 160ull);
    EXPECT_EQ(analytic_macs("projections", 10, 32, 4, 3, 4, 3), 360ull);
    EXPECT_THROW(analytic_macs("nonsense", 128, 32, 4, 64, 256, 3), std::runtime_error);
}

TEST(Analytic, QuarterRatioIsExactAtDefaults) {
    // C/(2T) + k/C with C=32, k=4 equals exactly 1/4 at T=128 and shrinks after
    for (std::size_t T : {128u, 256u, 512u, 1024u, 2048u}) {
        const std::uint64_t base = analytic_macs("baseline", T, 32, 4, 64, 256, 3);
        const std::uint64_t tiaa =
            2 * analytic_macs("modality_specific", T, 32, 4, 64, 256, 3) +
            analytic_macs("modality_shared", T, 32, 4, 64, 256, 3);
        EXPECT_LE(4 * tiaa, base) << "T=" << T;
        if (T == 128) {
            EXPECT_EQ(4 * tiaa, base);
        }
    }
}

TEST(Measured, EqualsAnalyticForEveryRow) {
    std::vector<BenchRow> rows = run_bench(small_bench());
    ASSERT_EQ(rows.size(), 2 * bench_components().size());
    for (const BenchRow& r : rows)
        EXPECT_EQ(r.macs_measured, r.macs_analytic) << r.component << " T=" << r.T;
}

TEST(Measured, DoublingTheLengthScalesEachComponent) {
    std::vector<BenchRow> rows = run_bench(small_bench());
    EXPECT_EQ(row_macs(rows, 64, "baseline"), 4 * row_macs(rows, 32, "baseline"));
    EXPECT_EQ(row_macs(rows, 64, "modality_specific"),
              2 * row_macs(rows, 32, "modality_specific"));
    EXPECT_EQ(row_macs(rows, 64, "modality_shared"),
              4 * row_macs(rows, 32, "modality_shared"));
    EXPECT_EQ(row_macs(rows, 64, "conagg_dwc"), 2 * row_macs(rows, 32, "conagg_dwc"));
    EXPECT_EQ(row_macs(rows, 64, "projections"), 2 * row_macs(rows, 32, "projections"));
}

TEST(Measured, SlopesComeOutQuadraticAndLinear) {
    BenchConfig cfg = small_bench();
    cfg.sweep_t = {32, 64, 128, 256};
    std::vector<BenchRow> rows = run_bench(cfg);
    EXPECT_NEAR(component_slope(rows, "baseline"), 2.0, 1e-9);
    EXPECT_NEAR(component_slope(rows, "modality_specific"), 1.0, 1e-9);
    EXPECT_NEAR(component_slope(rows, "modality_shared"), 2.0, 1e-9);
    EXPECT_THROW(component_slope(rows, "nonsense"), std::runtime_error);
}

TEST(Measured, RatioCheckUsesExactIntegers) {
    BenchConfig cfg;
    cfg.sweep_t = {128, 256};
    cfg.chunk = 32;
    cfg.topk = 4;
    cfg.d = 16;  // ratio is independent of width
    cfg.d_m = 32;
    std::vector<RatioCheck> checks = attention_ratio(run_bench(cfg));
    ASSERT_EQ(checks.size(), 2u);
    for (const RatioCheck& c : checks) {
        EXPECT_TRUE(c.within_quarter) << "T=" << c.T;
        EXPECT_GT(c.tiaa, 0u);
    }
    EXPECT_EQ(4 * checks[0].tiaa, checks[0].baseline);  // equality exactly at T=128
    EXPECT_LT(4 * checks[1].tiaa, checks[1].baseline);
}

TEST(Measured, ParallelCountsMatchSerial) {
    BenchConfig serial = small_bench();
    BenchConfig parallel = small_bench();
    parallel.threads = 3;
    std::vector<BenchRow> a = run_bench(serial);
    std::vector<BenchRow> b = run_bench(parallel);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].component, b[i].component);
        EXPECT_EQ(a[i].T, b[i].T);
        EXPECT_EQ(a[i].macs_measured, b[i].macs_measured);
    }
}

TEST(Measured, WallClockPopulatesWhenAsked) {
    BenchConfig cfg = small_bench();
    cfg.sweep_t = {32};
    cfg.wall_clock = true;
    for (const BenchRow& r : run_bench(cfg)) EXPECT_GT(r.wall_ns, 0u) << r.component;
}

TEST(BenchValidation, RejectsBadConfigs) {
    BenchConfig cfg = small_bench();
    cfg.sweep_t = {33};  // not a multiple of the chunk size
    EXPECT_THROW(run_bench(cfg), std::runtime_error);
    cfg = small_bench();
    cfg.topk = 9;  // larger than chunk
    EXPECT_THROW(run_bench(cfg), std::runtime_error);
    cfg = small_bench();
    cfg.sweep_t.clear();
    EXPECT_THROW(run_bench(cfg), std::runtime_error);
    cfg = small_bench();
    cfg.kernel = 2;
    EXPECT_THROW(run_bench(cfg), std::runtime_error);
    cfg = small_bench();
    cfg.threads = 0;
    EXPECT_THROW(run_bench(cfg), std::runtime_error);
}

TEST(BenchCsv, SchemaAndRowCount) {
    const std::string path = "/tmp/ecofuse_test_bench.csv";
    BenchConfig cfg = small_bench();
    std::vector<BenchRow> rows = run_bench(cfg);
    write_bench_csv(path, rows);
    std::ifstream in(path);
    std::string line;
    ASSERT_TRUE(std::getline(in, line));
    EXPECT_EQ(line, "T,C,k,d,dm,component,macs_measured,macs_analytic,wall_ns");
    std::size_t data_lines = 0;
    while (std::getline(in, line)) ++data_lines;
    EXPECT_EQ(data_lines, rows.size());
    std::remove(path.c_str());
}
