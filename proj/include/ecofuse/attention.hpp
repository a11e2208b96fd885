#pragma once

// Token-importance-aware attention. A sequence is cut into chunks of C
// tokens; modality-specific attention runs psi-normalized dot-product
// attention inside each chunk, TUR scores rank tokens by how much the rest of
// their chunk attends to them, and the top-k tokens of every chunk of both
// modalities are fused into one shared key/value bank that each modality
// queries globally. Specific and shared outputs are merged by addition.

#include "ecofuse/autodiff.hpp"

namespace ecofuse {

struct ChunkLayout {
    std::size_t T = 0;
    std::size_t C = 0;
    std::size_t n = 0;
    std::vector<std::size_t> real_rows;  // per chunk, < C only in a padded tail

    std::size_t padded() const { return n * C; }
};

inline ChunkLayout make_chunk_layout(std::size_t T, std::size_t C) {
    if (C < 1) throw std::runtime_error("chunk: chunk size must be >= 1");
    if (T < 1) throw std::runtime_error("chunk: sequence must be nonempty");
    ChunkLayout l;
    l.T = T;
    l.C = C;
    l.n = (T + C - 1) / C;
    l.real_rows.resize(l.n, C);
    if (T % C != 0) l.real_rows.back() = T % C;
    return l;
}

// Splits a T x d map into n row chunks of C rows each, zero-padding the tail
// chunk. Padding rows stay exactly zero, which psi turns into zero attention.
inline std::vector<Var> chunk_rows(Tape& t, Var x, const ChunkLayout& l) {
    ensure_rank2(t.val(x), "chunk_rows");
    // copy extents up front: pushing nodes may reallocate the tape's storage
    const std::size_t rows = t.val(x).shape[0];
    const std::size_t cols = t.val(x).shape[1];
    if (rows != l.T) throw std::runtime_error("chunk_rows: layout length mismatch");
    std::vector<Var> chunks;
    chunks.reserve(l.n);
    for (std::size_t i = 0; i < l.n; ++i) {
        const std::size_t r0 = i * l.C;
        Var piece = slice_rows(t, x, r0, r0 + l.real_rows[i]);
        if (l.real_rows[i] < l.C) {
            Var pad = t.leaf(Tensor({l.C - l.real_rows[i], cols}));
            piece = concat_rows(t, {piece, pad});
        }
        chunks.push_back(piece);
    }
    return chunks;
}

inline Var unchunk_rows(Tape& t, const std::vector<Var>& chunks, const ChunkLayout& l) {
    Var all = concat_rows(t, chunks);
    if (l.padded() == l.T) return all;
    return slice_rows(t, all, 0, l.T);
}

inline Var psi(Tape& t, Var scores, std::size_t attended_count,
               PsiMode mode = PsiMode::squared_relu) {
    if (attended_count < 1) throw std::runtime_error("psi: attended_count must be >= 1");
    Var r = relu(t, scores);
    if (mode == PsiMode::squared_relu) r = square(t, r);
    return scale(t, r, 1.0 / static_cast<double>(attended_count));
}

struct SpecificAttention {
    Var output;           // T x d, padding removed
    std::vector<Var> A;   // per-chunk C x C psi attention maps
};

// Per-chunk attention A_c = psi(Q_c K_c^T / sqrt(d)), F_c = A_c V_c. The psi
// map is materialized because TUR reads it; see specific_linear_value for the
// reordered inference path that skips it.
inline SpecificAttention modality_specific_attention(Tape& t, const std::vector<Var>& q,
                                                     const std::vector<Var>& k,
                                                     const std::vector<Var>& v,
                                                     const ChunkLayout& l, std::size_t d,
                                                     PsiMode mode = PsiMode::squared_relu) {
    if (q.size() != l.n || k.size() != l.n || v.size() != l.n)
        throw std::runtime_error("modality_specific_attention: chunk count mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    SpecificAttention out;
    std::vector<Var> pieces;
    pieces.reserve(l.n);
    for (std::size_t i = 0; i < l.n; ++i) {
        Var scores = scale(t, matmul(t, q[i], transpose(t, k[i])), inv_sqrt_d);
        Var a = psi(t, scores, l.C, mode);
        out.A.push_back(a);
        pieces.push_back(matmul(t, a, v[i]));
    }
    out.output = unchunk_rows(t, pieces, l);
    return out;
}

struct TurTable {
    Tensor tur;                                      // n x C, zero on padding
    std::vector<std::vector<std::size_t>> selected;  // ascending real indices per chunk
    std::size_t k = 0;
    double epsilon = 0.0;
};

// TUR(i,j): how much the rest of chunk i uses token j, relative to the
// token's self-attention. Column sum excluding the diagonal over the guarded
// diagonal entry.
inline Tensor compute_tur(const std::vector<Tensor>& a_chunks, const ChunkLayout& l,
                          double epsilon = 1e-8) {
    if (a_chunks.size() != l.n) throw std::runtime_error("compute_tur: chunk count mismatch");
    Tensor tur({l.n, l.C});
    for (std::size_t i = 0; i < l.n; ++i) {
        const Tensor& a = a_chunks[i];
        if (a.rank() != 2 || a.shape[0] != l.C || a.shape[1] != l.C)
            throw std::runtime_error("compute_tur: attention chunk must be C x C");
        for (std::size_t j = 0; j < l.C; ++j) {
            double col = 0.0;
            for (std::size_t m = 0; m < l.C; ++m) {
                const double w = a(m, j);
                if (w < 0.0)
                    throw std::runtime_error("compute_tur: negative attention weight");
                if (m != j) col += w;
            }
            tur(i, j) = col / (a(j, j) + epsilon);
        }
    }
    return tur;
}

// Highest-TUR indices per chunk, ties broken toward the lower index, padded
// rows excluded, k clamped to the chunk's real row count.
inline std::vector<std::vector<std::size_t>> topk_select(const Tensor& tur,
                                                         const ChunkLayout& l,
                                                         std::size_t k) {
    if (k < 1) throw std::runtime_error("topk_select: k must be >= 1");
    std::vector<std::vector<std::size_t>> selected(l.n);
    for (std::size_t i = 0; i < l.n; ++i) {
        std::vector<std::size_t> order(l.real_rows[i]);
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return tur(i, a) > tur(i, b);
        });
        order.resize(std::min(k, l.real_rows[i]));
        std::sort(order.begin(), order.end());
        selected[i] = std::move(order);
    }
    return selected;
}

inline TurTable make_tur_table(const std::vector<Tensor>& a_chunks, const ChunkLayout& l,
                               std::size_t k, double epsilon = 1e-8) {
    TurTable table;
    table.tur = compute_tur(a_chunks, l, epsilon);
    table.selected = topk_select(table.tur, l, k);
    table.k = k;
    table.epsilon = epsilon;
    return table;
}

// Chunk share of the sequence's total TUR mass.
inline std::vector<double> compute_cur(const TurTable& table) {
    const Tensor& tur = table.tur;
    const std::size_t n = tur.shape[0], c = tur.shape[1];
    std::vector<double> mass(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            mass[i] += tur(i, j);
            total += tur(i, j);
        }
    if (total <= 0.0)
        throw std::runtime_error("compute_cur: degenerate all-zero TUR distribution");
    for (double& m : mass) m /= total;
    return mass;
}

struct SelectedChunks {
    const std::vector<Var>* k_chunks = nullptr;
    const std::vector<Var>* v_chunks = nullptr;
    const std::vector<std::vector<std::size_t>>* selected = nullptr;
};

struct FusedKV {
    Var k;
    Var v;
    std::size_t s = 0;  // fused row count, 2*n*k for two unpadded modalities
};

// Builds the shared key/value bank in chunk-major order: all modalities'
// selected tokens of chunk 0, then chunk 1, and so on. Rows are copies.
inline FusedKV fuse_chunks(Tape& t, const std::vector<SelectedChunks>& modalities) {
    if (modalities.empty()) throw std::runtime_error("fuse_chunks: no modalities");
    const std::size_t n = modalities[0].k_chunks->size();
    for (const SelectedChunks& m : modalities)
        if (m.k_chunks->size() != n || m.v_chunks->size() != n || m.selected->size() != n)
            throw std::runtime_error("fuse_chunks: modality chunk counts differ");
    std::vector<Var> k_rows, v_rows;
    std::size_t s = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (const SelectedChunks& m : modalities) {
            const std::vector<std::size_t>& sel = (*m.selected)[i];
            if (sel.empty()) continue;
            k_rows.push_back(gather_rows(t, (*m.k_chunks)[i], sel));
            v_rows.push_back(gather_rows(t, (*m.v_chunks)[i], sel));
            s += sel.size();
        }
    if (k_rows.empty()) throw std::runtime_error("fuse_chunks: empty selection");
    FusedKV fused;
    fused.k = concat_rows(t, k_rows);
    fused.v = concat_rows(t, v_rows);
    fused.s = s;
    return fused;
}

struct SharedAttention {
    Var output;  // T x d
    Var a;       // T x S psi attention map
};

// One modality's queries over the fused bank of both. attended_count is the
// bank size S.
inline SharedAttention modality_shared_attention(Tape& t, Var q, const FusedKV& fused,
                                                 std::size_t d,
                                                 PsiMode mode = PsiMode::squared_relu) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    SharedAttention out;
    Var scores = scale(t, matmul(t, q, transpose(t, fused.k)), inv_sqrt_d);
    out.a = psi(t, scores, fused.s, mode);
    out.output = matmul(t, out.a, fused.v);
    return out;
}

inline Var addition_merge(Tape& t, Var f_spe, Var f_sha) { return add(t, f_spe, f_sha); }

// ---- value-level mirrors used by the benchmark and the oracle tests ----

struct SpecificAttentionValue {
    Tensor output;
    std::vector<Tensor> a;
};

inline SpecificAttentionValue specific_attention_value(const std::vector<Tensor>& q,
                                                       const std::vector<Tensor>& k,
                                                       const std::vector<Tensor>& v,
                                                       const ChunkLayout& l, std::size_t d,
                                                       PsiMode mode = PsiMode::squared_relu) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    SpecificAttentionValue out;
    std::vector<Tensor> pieces;
    for (std::size_t i = 0; i < l.n; ++i) {
        Tensor scores = scale(matmul(q[i], transpose(k[i])), inv_sqrt_d);
        Tensor a = psi(scores, l.C, mode);
        pieces.push_back(matmul(a, v[i]));
        out.a.push_back(std::move(a));
    }
    Tensor all = concat_rows(pieces);
    out.output = l.padded() == l.T ? all : slice_rows(all, 0, l.T);
    return out;
}

// Reordered inference path Q_c (K_c^T V_c): linear in chunk size, no psi map,
// so TUR cannot be read off it. Scaling keeps parity with the psi-free
// product of the materialized path.
inline Tensor specific_linear_value(const std::vector<Tensor>& q,
                                    const std::vector<Tensor>& k,
                                    const std::vector<Tensor>& v, const ChunkLayout& l,
                                    std::size_t d) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> pieces;
    for (std::size_t i = 0; i < l.n; ++i)
        pieces.push_back(scale(matmul(q[i], matmul(transpose(k[i]), v[i])),
                               inv_sqrt_d / static_cast<double>(l.C)));
    Tensor all = concat_rows(pieces);
    return l.padded() == l.T ? all : slice_rows(all, 0, l.T);
}

inline std::pair<Tensor, Tensor> shared_attention_value(const Tensor& q, const Tensor& k_fsn,
                                                        const Tensor& v_fsn, std::size_t d,
                                                        PsiMode mode = PsiMode::squared_relu) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor scores = scale(matmul(q, transpose(k_fsn)), inv_sqrt_d);
    Tensor a = psi(scores, k_fsn.shape[0], mode);
    Tensor out = matmul(a, v_fsn);
    return {std::move(out), std::move(a)};
}

inline std::vector<Tensor> chunk_rows_value(const Tensor& x, const ChunkLayout& l) {
    std::vector<Tensor> chunks;
    for (std::size_t i = 0; i < l.n; ++i) {
        Tensor c({l.C, x.shape[1]});
        for (std::size_t r = 0; r < l.real_rows[i]; ++r)
            for (std::size_t j = 0; j < x.shape[1]; ++j)
                c(r, j) = x(i * l.C + r, j);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

}  // namespace ecofuse
