#include <gtest/gtest.h>

#include "ecofuse/attention.hpp"

using namespace ecofuse;

namespace {

Tensor randt(std::vector<std::size_t> shape, unsigned seed, double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

// Reference psi attention written with plain loops, independent of the
// library kernels. count is the attended-token normalizer.
Tensor psi_attention_ref(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::size_t count) {
    const std::size_t tq = q.shape[0], tk = k.shape[0], d = q.shape[1];
    Tensor out({tq, v.shape[1]});
    for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = 0; j < tk; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e) s += q(i, e) * k(j, e);
            s /= std::sqrt(static_cast<double>(d));
            if (s < 0.0) s = 0.0;
            const double w = s * s / static_cast<double>(count);
            for (std::size_t e = 0; e < v.shape[1]; ++e) out(i, e) += w * v(j, e);
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST(Chunking, Counts) {
    EXPECT_EQ(make_chunk_layout(8, 4).n, 2u);
    ChunkLayout l7 = make_chunk_layout(7, 4);
    EXPECT_EQ(l7.n, 2u);
    EXPECT_EQ(l7.real_rows.back(), 3u);
    EXPECT_EQ(make_chunk_layout(96, 32).n, 3u);
    EXPECT_THROW(make_chunk_layout(8, 0), std::runtime_error);
}

TEST(Chunking, RoundTripOnRealRows) {
    Tensor x = randt({7, 3}, 21);
    ChunkLayout l = make_chunk_layout(7, 4);
    Tape t;
    Var v = t.leaf(x);
    std::vector<Var> chunks = chunk_rows(t, v, l);
    ASSERT_EQ(chunks.size(), 2u);
    EXPECT_EQ(t.val(chunks[1])(3, 0), 0.0);  // padded row
    Var back = unchunk_rows(t, chunks, l);
    EXPECT_EQ(t.val(back).data, x.data);
}

TEST(Psi, TapeComposition) {
    Tape t;
    Var s = t.leaf(Tensor::matrix({{1, 0}, {0, 0}}));
    Var w = psi(t, s, 2);
    EXPECT_DOUBLE_EQ(t.val(w)(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(t.val(w)(1, 1), 0.0);
}

TEST(SpecificAttention, HandWorkedExample) {
    // d=1, C=2: scores [[1,0],[0,0]], psi with count 2 halves the square
    ChunkLayout l = make_chunk_layout(2, 2);
    Tape t;
    std::vector<Var> q = {t.leaf(Tensor::matrix({{1}, {0}}))};
    std::vector<Var> v = {t.leaf(Tensor::matrix({{2}, {3}}))};
    SpecificAttention got = modality_specific_attention(t, q, q, v, l, 1);
    const Tensor& a = t.val(got.A[0]);
    EXPECT_DOUBLE_EQ(a(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(a(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(a(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(a(1, 1), 0.0);
    const Tensor& f = t.val(got.output);
    EXPECT_DOUBLE_EQ(f(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(f(1, 0), 0.0);
}

TEST(SpecificAttention, ZeroQueriesGiveZeroOutput) {
    ChunkLayout l = make_chunk_layout(4, 2);
    Tape t;
    std::vector<Var> z = {t.leaf(Tensor({2, 3})), t.leaf(Tensor({2, 3}))};
    std::vector<Var> v = {t.leaf(randt({2, 3}, 22)), t.leaf(randt({2, 3}, 23))};
    SpecificAttention got = modality_specific_attention(t, z, z, v, l, 3);
    for (double x : t.val(got.output).data) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(SpecificAttention, DegenerateChunkEqualsUnchunked) {
    for (unsigned seed = 0; seed < 8; ++seed) {
        const std::size_t T = 6 + seed, d = 3 + seed % 4;
        Tensor q = randt({T, d}, 100 + seed);
        Tensor k = randt({T, d}, 200 + seed);
        Tensor v = randt({T, d}, 300 + seed);
        ChunkLayout l = make_chunk_layout(T, T);
        Tape t;
        SpecificAttention got = modality_specific_attention(
            t, {t.leaf(q)}, {t.leaf(k)}, {t.leaf(v)}, l, d);
        Tensor want = psi_attention_ref(q, k, v, T);
        EXPECT_LT(max_abs_diff(t.val(got.output), want), 1e-12);
    }
}

TEST(SpecificAttention, PaddedKeysGetZeroWeight) {
    const std::size_t T = 6, C = 4, d = 3;
    ChunkLayout l = make_chunk_layout(T, C);
    Tensor x = randt({T, d}, 24);
    Tape t;
    Var xv = t.leaf(x);
    std::vector<Var> chunks = chunk_rows(t, xv, l);
    SpecificAttention got = modality_specific_attention(t, chunks, chunks, chunks, l, d);
    const Tensor& a1 = t.val(got.A[1]);
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = l.real_rows[1]; j < C; ++j) EXPECT_DOUBLE_EQ(a1(i, j), 0.0);
}

TEST(Tur, TabulatedMatrices) {
    ChunkLayout l2 = make_chunk_layout(2, 2);
    const double eps = 1e-8;

    Tensor ident = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor tur_i = compute_tur({ident}, l2, eps);
    EXPECT_NEAR(tur_i(0, 0), 0.0, 1e-12);
    EXPECT_NEAR(tur_i(0, 1), 0.0, 1e-12);

    ChunkLayout l4 = make_chunk_layout(4, 4);
    Tensor uniform({4, 4});
    for (double& w : uniform.data) w = 0.25;
    Tensor tur_u = compute_tur({uniform}, l4, eps);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(tur_u(0, j), 0.75 / (0.25 + eps), 1e-12);
        EXPECT_NEAR(tur_u(0, j), 3.0, 1e-6);
    }

    Tensor a = Tensor::matrix({{0.5, 0.2}, {0.5, 0.8}});
    Tensor tur_a = compute_tur({a}, l2, eps);
    EXPECT_NEAR(tur_a(0, 0), 0.5 / (0.5 + eps), 1e-12);
    EXPECT_NEAR(tur_a(0, 1), 0.2 / (0.8 + eps), 1e-12);
    EXPECT_NEAR(tur_a(0, 0), 1.0, 1e-6);
    EXPECT_NEAR(tur_a(0, 1), 0.25, 1e-6);

    Tensor neg = Tensor::matrix({{0.5, -0.1}, {0.5, 0.8}});
    EXPECT_THROW(compute_tur({neg}, l2, eps), std::runtime_error);
}

TEST(Tur, TopkSelection) {
    ChunkLayout l = make_chunk_layout(2, 2);
    Tensor tur({1, 2}, {1.0, 0.25});
    ChunkLayout l1 = make_chunk_layout(2, 2);
    auto sel = topk_select(tur, l1, 1);
    ASSERT_EQ(sel.size(), 1u);
    EXPECT_EQ(sel[0], (std::vector<std::size_t>{0}));

    Tensor tie({1, 2}, {0.5, 0.5});
    EXPECT_EQ(topk_select(tie, l, 1)[0], (std::vector<std::size_t>{0}));

    EXPECT_EQ(topk_select(tur, l, 2)[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(topk_select(tur, l, 9)[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_THROW(topk_select(tur, l, 0), std::runtime_error);
}

TEST(Tur, PaddedRowsNeverSelected) {
    const std::size_t T = 6, C = 4;
    ChunkLayout l = make_chunk_layout(T, C);
    Tensor x = randt({T, 3}, 25);
    Tape t;
    std::vector<Var> chunks = chunk_rows(t, t.leaf(x), l);
    SpecificAttention got = modality_specific_attention(t, chunks, chunks, chunks, l, 3);
    std::vector<Tensor> a_vals = {t.val(got.A[0]), t.val(got.A[1])};
    TurTable table = make_tur_table(a_vals, l, 4);
    EXPECT_EQ(table.selected[0].size(), 4u);
    EXPECT_EQ(table.selected[1].size(), 2u);  // only two real rows in the tail
    for (std::size_t j : table.selected[1]) EXPECT_LT(j, l.real_rows[1]);
}

TEST(Tur, SelectionOptimality) {
    ChunkLayout l = make_chunk_layout(16, 8);
    Tensor x = randt({16, 4}, 26);
    Tape t;
    std::vector<Var> chunks = chunk_rows(t, t.leaf(x), l);
    SpecificAttention got = modality_specific_attention(t, chunks, chunks, chunks, l, 4);
    TurTable table = make_tur_table({t.val(got.A[0]), t.val(got.A[1])}, l, 3);
    for (std::size_t i = 0; i < l.n; ++i) {
        double min_sel = 1e300;
        for (std::size_t j : table.selected[i]) min_sel = std::min(min_sel, table.tur(i, j));
        for (std::size_t j = 0; j < l.real_rows[i]; ++j) {
            if (std::find(table.selected[i].begin(), table.selected[i].end(), j) !=
                table.selected[i].end())
                continue;
            EXPECT_GE(min_sel, table.tur(i, j));
        }
    }
}

TEST(Cur, Distribution) {
    TurTable one;
    one.tur = Tensor({1, 4}, {0.5, 0.25, 0.0, 0.25});
    EXPECT_EQ(compute_cur(one), (std::vector<double>{1.0}));

    TurTable two;
    two.tur = Tensor({2, 2}, {1.0, 2.0, 2.0, 1.0});
    std::vector<double> cur = compute_cur(two);
    EXPECT_DOUBLE_EQ(cur[0], 0.5);
    EXPECT_DOUBLE_EQ(cur[1], 0.5);

    TurTable skew;
    skew.tur = Tensor({2, 2}, {2.0, 1.0, 0.5, 0.5});
    cur = compute_cur(skew);
    EXPECT_DOUBLE_EQ(cur[0], 0.75);
    EXPECT_DOUBLE_EQ(cur[1], 0.25);
    EXPECT_DOUBLE_EQ(cur[0] + cur[1], 1.0);

    TurTable zero;
    zero.tur = Tensor({2, 2});
    EXPECT_THROW(compute_cur(zero), std::runtime_error);
}

TEST(Fusion, LayoutAndLength) {
    const std::size_t T = 8, C = 4, d = 2;
    ChunkLayout l = make_chunk_layout(T, C);
    Tape t;
    // distinct fill values so provenance of each fused row is visible
    Tensor m0({T, d}), m1({T, d});
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            m0(i, j) = 100.0 + static_cast<double>(i);
            m1(i, j) = 200.0 + static_cast<double>(i);
        }
    std::vector<Var> k0 = chunk_rows(t, t.leaf(m0), l);
    std::vector<Var> k1 = chunk_rows(t, t.leaf(m1), l);
    std::vector<std::vector<std::size_t>> sel0 = {{1}, {0}};
    std::vector<std::vector<std::size_t>> sel1 = {{3}, {2}};
    std::vector<SelectedChunks> mods = {{&k0, &k0, &sel0}, {&k1, &k1, &sel1}};
    FusedKV fused = fuse_chunks(t, mods);
    EXPECT_EQ(fused.s, 4u);  // 2 modalities * 2 chunks * k=1
    const Tensor& kf = t.val(fused.k);
    EXPECT_DOUBLE_EQ(kf(0, 0), 101.0);  // modality 0, chunk 0, row 1
    EXPECT_DOUBLE_EQ(kf(1, 0), 203.0);  // modality 1, chunk 0, row 3
    EXPECT_DOUBLE_EQ(kf(2, 0), 104.0);  // modality 0, chunk 1, row 0
    EXPECT_DOUBLE_EQ(kf(3, 0), 206.0);  // modality 1, chunk 1, row 2
}

TEST(Fusion, FullSelectionGivesTwoT) {
    const std::size_t T = 8, C = 4;
    ChunkLayout l = make_chunk_layout(T, C);
    Tape t;
    std::vector<Var> k0 = chunk_rows(t, t.leaf(randt({T, 3}, 27)), l);
    std::vector<Var> k1 = chunk_rows(t, t.leaf(randt({T, 3}, 28)), l);
    std::vector<std::size_t> all = {0, 1, 2, 3};
    std::vector<std::vector<std::size_t>> sel = {all, all};
    std::vector<SelectedChunks> mods = {{&k0, &k0, &sel}, {&k1, &k1, &sel}};
    EXPECT_EQ(fuse_chunks(t, mods).s, 2 * T);
}

TEST(SharedAttention, ZeroQueryGivesZero) {
    Tape t;
    FusedKV fused;
    fused.k = t.leaf(randt({6, 3}, 29));
    fused.v = t.leaf(randt({6, 3}, 30));
    fused.s = 6;
    SharedAttention got = modality_shared_attention(t, t.leaf(Tensor({5, 3})), fused, 3);
    for (double x : t.val(got.output).data) EXPECT_DOUBLE_EQ(x, 0.0);
}

// Brute-force oracle: build the fused bank by explicit row copies in the
// declared chunk-major order, then run reference psi attention over it.
TEST(SharedAttention, MatchesGatherConcatOracle) {
    const std::size_t T = 32, C = 8, k = 2, d = 5;
    ChunkLayout l = make_chunk_layout(T, C);
    Tensor q = randt({T, d}, 31);
    Tensor k0 = randt({T, d}, 32), v0 = randt({T, d}, 33);
    Tensor k1 = randt({T, d}, 34), v1 = randt({T, d}, 35);

    // selections from the TUR of each modality's self attention
    Tape t;
    std::vector<Var> k0c = chunk_rows(t, t.leaf(k0), l);
    std::vector<Var> v0c = chunk_rows(t, t.leaf(v0), l);
    std::vector<Var> k1c = chunk_rows(t, t.leaf(k1), l);
    std::vector<Var> v1c = chunk_rows(t, t.leaf(v1), l);
    auto tur_of = [&](const std::vector<Var>& kc, const std::vector<Var>& vc) {
        SpecificAttention sa = modality_specific_attention(t, kc, kc, vc, l, d);
        std::vector<Tensor> a_vals;
        for (Var a : sa.A) a_vals.push_back(t.val(a));
        return make_tur_table(a_vals, l, k);
    };
    TurTable t0 = tur_of(k0c, v0c);
    TurTable t1 = tur_of(k1c, v1c);

    std::vector<SelectedChunks> mods = {{&k0c, &v0c, &t0.selected}, {&k1c, &v1c, &t1.selected}};
    FusedKV fused = fuse_chunks(t, mods);
    SharedAttention got = modality_shared_attention(t, t.leaf(q), fused, d);

    const std::size_t s = 2 * l.n * k;
    ASSERT_EQ(fused.s, s);
    Tensor kf({s, d}), vf({s, d});
    std::size_t row = 0;
    for (std::size_t i = 0; i < l.n; ++i) {
        for (std::size_t j : t0.selected[i]) {
            for (std::size_t e = 0; e < d; ++e) {
                kf(row, e) = k0(i * C + j, e);
                vf(row, e) = v0(i * C + j, e);
            }
            ++row;
        }
        for (std::size_t j : t1.selected[i]) {
            for (std::size_t e = 0; e < d; ++e) {
                kf(row, e) = k1(i * C + j, e);
                vf(row, e) = v1(i * C + j, e);
            }
            ++row;
        }
    }
    Tensor want = psi_attention_ref(q, kf, vf, s);
    EXPECT_LT(max_abs_diff(t.val(got.output), want), 1e-12);
}

TEST(SharedAttention, FullSelectionIdenticalStreams) {
    const std::size_t T = 12, C = 4, d = 3;
    ChunkLayout l = make_chunk_layout(T, C);
    Tensor x = randt({T, d}, 36);
    Tape t;
    std::vector<Var> kc = chunk_rows(t, t.leaf(x), l);
    std::vector<std::size_t> all = {0, 1, 2, 3};
    std::vector<std::vector<std::size_t>> sel(l.n, all);
    std::vector<SelectedChunks> mods = {{&kc, &kc, &sel}, {&kc, &kc, &sel}};
    FusedKV fused = fuse_chunks(t, mods);
    SharedAttention got = modality_shared_attention(t, t.leaf(x), fused, d);

    // oracle: each fused row is a row of x duplicated; psi attention over the
    // duplicated bank with count 2T
    Tensor kf({2 * T, d});
    std::size_t row = 0;
    for (std::size_t i = 0; i < l.n; ++i)
        for (int rep = 0; rep < 2; ++rep)
            for (std::size_t j = 0; j < C; ++j) {
                for (std::size_t e = 0; e < d; ++e) kf(row, e) = x(i * C + j, e);
                ++row;
            }
    Tensor want = psi_attention_ref(x, kf, kf, 2 * T);
    EXPECT_LT(max_abs_diff(t.val(got.output), want), 1e-12);
}

TEST(Merge, Addition) {
    Tape t;
    Tensor a = randt({4, 3}, 37), b = randt({4, 3}, 38);
    Var m = addition_merge(t, t.leaf(a), t.leaf(b));
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_DOUBLE_EQ(t.val(m).data[i], a.data[i] + b.data[i]);
    Var z = addition_merge(t, t.leaf(a), t.leaf(scale(a, -1.0)));
    for (double x : t.val(z).data) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(Attention, NonnegativeWeights) {
    const std::size_t T = 16, C = 4, d = 4;
    ChunkLayout l = make_chunk_layout(T, C);
    Tape t;
    std::vector<Var> q = chunk_rows(t, t.leaf(randt({T, d}, 39)), l);
    std::vector<Var> k = chunk_rows(t, t.leaf(randt({T, d}, 40)), l);
    std::vector<Var> v = chunk_rows(t, t.leaf(randt({T, d}, 41)), l);
    SpecificAttention sa = modality_specific_attention(t, q, k, v, l, d);
    for (Var a : sa.A)
        for (double w : t.val(a).data) EXPECT_GE(w, 0.0);
}

// Gradient of a composed specific -> select -> fuse -> shared -> merge loss
// with respect to the scale/offset parameters. Selection is computed once and
// held fixed, matching its constant treatment in backward.
TEST(Attention, EndToEndGradientWithFrozenSelection) {
    const std::size_t T = 8, C = 4, d = 3, k = 2;
    ChunkLayout l = make_chunk_layout(T, C);
    Tensor f_u = randt({T, d}, 42);
    Tensor gq = randt({d}, 43), bq = randt({d}, 44);
    Tensor gk = randt({d}, 45), bk = randt({d}, 46);

    auto build = [&](Tape& t, Var vgq, Var vbq, Var vgk, Var vbk,
                     const std::vector<std::vector<std::size_t>>* frozen)
        -> std::pair<Var, std::vector<std::vector<std::size_t>>> {
        Var fu = t.leaf(f_u);
        Var qf = affine_cols(t, fu, vgq, vbq);
        Var kf = affine_cols(t, fu, vgk, vbk);
        std::vector<Var> qc = chunk_rows(t, qf, l);
        std::vector<Var> kc = chunk_rows(t, kf, l);
        std::vector<Var> vc = chunk_rows(t, fu, l);
        SpecificAttention sa = modality_specific_attention(t, qc, kc, vc, l, d);
        std::vector<Tensor> a_vals;
        for (Var a : sa.A) a_vals.push_back(t.val(a));
        std::vector<std::vector<std::size_t>> sel =
            frozen ? *frozen : make_tur_table(a_vals, l, k).selected;
        std::vector<SelectedChunks> mods = {{&kc, &vc, &sel}, {&kc, &vc, &sel}};
        FusedKV fused = fuse_chunks(t, mods);
        SharedAttention sh = modality_shared_attention(t, qf, fused, d);
        Var merged = addition_merge(t, sa.output, sh.output);
        return {sum_all(t, square(t, merged)), sel};
    };

    Tape probe;
    auto frozen = build(probe, probe.leaf(gq), probe.leaf(bq), probe.leaf(gk),
                        probe.leaf(bk), nullptr).second;

    double err = finite_diff_check(
        {gq, bq, gk, bk}, [&](Tape& t, const std::vector<Var>& p) {
            return build(t, p[0], p[1], p[2], p[3], &frozen).first;
        });
    EXPECT_LT(err, 1e-6);
}
