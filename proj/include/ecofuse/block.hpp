#pragma once

// One complete fusion layer: gated hidden projection in, token-importance
// attention over both modalities, gated projection out, convolution
// aggregation, residual. All trainable tensors of a layer are shared between
// the lip and hand paths; there is exactly one parameter set per layer.

#include "ecofuse/attention.hpp"

namespace ecofuse {

enum class Phi { swish, identity };

inline Var apply_phi(Tape& t, Var x, Phi phi) {
    return phi == Phi::swish ? swish(t, x) : x;
}

// Scale/offset parameter slots, one per derived stream.
enum SoSlot { SO_Q = 0, SO_K = 1, SO_VSPE = 2, SO_VSHA = 3 };

struct LayerParams {
    Tensor w_u;  // d_m x 2d, columns split into hidden and gate halves
    Tensor w_o;  // d x d_m
    Tensor so_gamma[4];
    Tensor so_beta[4];
    Tensor dw_kernel;  // d_m x D
    Tensor pw_kernel;  // d_m x d_m
    Tensor bn1_gamma, bn1_beta, bn1_mean, bn1_var;
    Tensor bn2_gamma, bn2_beta, bn2_mean, bn2_var;
};

struct LayerConfig {
    std::size_t d_m = 64;
    std::size_t d = 32;
    std::size_t chunk = 32;
    std::size_t topk = 4;
    std::size_t kernel = 3;  // depthwise taps, odd
    PsiMode psi = PsiMode::squared_relu;
    Phi phi = Phi::swish;
    bool gate_on = true;
    bool fusion_on = true;

    void validate() const {
        if (d_m < 1 || d < 1 || chunk < 1 || topk < 1)
            throw std::runtime_error("layer config: all sizes must be >= 1");
        if (d > d_m) throw std::runtime_error("layer config: d must not exceed d_m");
        if (topk > chunk) throw std::runtime_error("layer config: topk must not exceed chunk");
        if (kernel % 2 == 0) throw std::runtime_error("layer config: kernel must be odd");
    }
};

inline LayerParams init_layer_params(const LayerConfig& cfg, std::mt19937_64& rng) {
    LayerParams p;
    p.w_u = Tensor::randn({cfg.d_m, 2 * cfg.d}, rng, 1.0 / std::sqrt(double(cfg.d_m)));
    p.w_o = Tensor::randn({cfg.d, cfg.d_m}, rng, 1.0 / std::sqrt(double(cfg.d)));
    for (int s = 0; s < 4; ++s) {
        p.so_gamma[s] = Tensor({cfg.d});
        for (double& v : p.so_gamma[s].data) v = 1.0;
        p.so_beta[s] = Tensor({cfg.d});
    }
    p.dw_kernel = Tensor::randn({cfg.d_m, cfg.kernel}, rng, 1.0 / std::sqrt(double(cfg.kernel)));
    p.pw_kernel = Tensor::randn({cfg.d_m, cfg.d_m}, rng, 1.0 / std::sqrt(double(cfg.d_m)));
    auto ones = [&] {
        Tensor t({cfg.d_m});
        for (double& v : t.data) v = 1.0;
        return t;
    };
    p.bn1_gamma = ones();
    p.bn1_beta = Tensor({cfg.d_m});
    p.bn1_mean = Tensor({cfg.d_m});
    p.bn1_var = ones();
    p.bn2_gamma = ones();
    p.bn2_beta = Tensor({cfg.d_m});
    p.bn2_mean = Tensor({cfg.d_m});
    p.bn2_var = ones();
    return p;
}

struct NamedParam {
    std::string name;
    Tensor* value;
    bool trainable;
};

inline void collect_layer_params(LayerParams& p, const std::string& prefix,
                                 std::vector<NamedParam>& out) {
    static const char* so_names[4] = {"q", "k", "vspe", "vsha"};
    out.push_back({prefix + "/wu", &p.w_u, true});
    out.push_back({prefix + "/wo", &p.w_o, true});
    for (int s = 0; s < 4; ++s) {
        out.push_back({prefix + "/so_" + so_names[s] + "/gamma", &p.so_gamma[s], true});
        out.push_back({prefix + "/so_" + so_names[s] + "/beta", &p.so_beta[s], true});
    }
    out.push_back({prefix + "/conagg/dw", &p.dw_kernel, true});
    out.push_back({prefix + "/conagg/pw", &p.pw_kernel, true});
    out.push_back({prefix + "/conagg/bn1/gamma", &p.bn1_gamma, true});
    out.push_back({prefix + "/conagg/bn1/beta", &p.bn1_beta, true});
    out.push_back({prefix + "/conagg/bn1/mean", &p.bn1_mean, false});
    out.push_back({prefix + "/conagg/bn1/var", &p.bn1_var, false});
    out.push_back({prefix + "/conagg/bn2/gamma", &p.bn2_gamma, true});
    out.push_back({prefix + "/conagg/bn2/beta", &p.bn2_beta, true});
    out.push_back({prefix + "/conagg/bn2/mean", &p.bn2_mean, false});
    out.push_back({prefix + "/conagg/bn2/var", &p.bn2_var, false});
}

// Tape handles for one layer's parameters, bound once per forward pass.
struct LayerVars {
    Var w_u, w_o;
    Var so_gamma[4], so_beta[4];
    Var dw, pw;
    Var bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
};

inline LayerVars bind_layer(Tape& t, LayerParams& p) {
    LayerVars v;
    v.w_u = t.leaf(p.w_u);
    v.w_o = t.leaf(p.w_o);
    for (int s = 0; s < 4; ++s) {
        v.so_gamma[s] = t.leaf(p.so_gamma[s]);
        v.so_beta[s] = t.leaf(p.so_beta[s]);
    }
    v.dw = t.leaf(p.dw_kernel);
    v.pw = t.leaf(p.pw_kernel);
    v.bn1_gamma = t.leaf(p.bn1_gamma);
    v.bn1_beta = t.leaf(p.bn1_beta);
    v.bn2_gamma = t.leaf(p.bn2_gamma);
    v.bn2_beta = t.leaf(p.bn2_beta);
    return v;
}

struct GatedHidden {
    Var f_u;  // hidden stream, T x d
    Var g_u;  // gate stream, T x d
};

inline GatedHidden gated_input_projection(Tape& t, Var f, Var w_u, std::size_t d, Phi phi) {
    Var h = apply_phi(t, matmul(t, f, w_u), phi);
    GatedHidden out;
    out.f_u = slice_cols(t, h, 0, d);
    out.g_u = slice_cols(t, h, d, 2 * d);
    return out;
}

inline Var gated_output_projection(Tape& t, Var f_o, Var g_u, Var w_o, Phi phi) {
    return apply_phi(t, matmul(t, mul(t, f_o, g_u), w_o), phi);
}

// Gate-off ablation: plain linear projections, no activation, no gating.
inline Var plain_input_projection(Tape& t, Var f, Var w_u, std::size_t d) {
    return matmul(t, f, slice_cols(t, w_u, 0, d));
}

inline Var plain_output_projection(Tape& t, Var f_o, Var w_o) {
    return matmul(t, f_o, w_o);
}

// Depthwise temporal conv, norm, Swish, pointwise channel mix, norm, Swish,
// with a residual around the stack. Operates in channels x T orientation.
inline Var conagg(Tape& t, Var f, const LayerVars& lv, LayerParams& lp, NormMode mode) {
    Var zt = transpose(t, f);
    Var zd = dwconv_time(t, zt, lv.dw);
    zd = batchnorm_time(t, zd, lv.bn1_gamma, lv.bn1_beta, lp.bn1_mean, lp.bn1_var, mode);
    zd = swish(t, zd);
    Var zp = matmul(t, lv.pw, zd);
    zp = batchnorm_time(t, zp, lv.bn2_gamma, lv.bn2_beta, lp.bn2_mean, lp.bn2_var, mode);
    zp = swish(t, zp);
    return add(t, f, transpose(t, zp));
}

using Selections = std::vector<std::vector<std::size_t>>;

struct LayerDiagnostics {
    TurTable tur[2];                  // per modality
    std::vector<Tensor> a_spe[2];     // per-chunk psi maps
};

// Fixed token selections per modality, used by gradient tests to hold the
// hard top-k choice constant while inputs are perturbed.
struct FrozenSelections {
    Selections per_modality[2];
};

inline std::pair<Var, Var> ecolayer_forward(Tape& t, Var f_lip, Var f_hand, LayerVars& lv,
                                            LayerParams& lp, const LayerConfig& cfg,
                                            NormMode mode,
                                            LayerDiagnostics* diag = nullptr,
                                            const FrozenSelections* frozen = nullptr) {
    cfg.validate();
    const std::size_t T = t.val(f_lip).shape[0];
    if (t.val(f_hand).shape[0] != T)
        throw std::runtime_error("ecolayer_forward: modality lengths differ");
    const ChunkLayout l = make_chunk_layout(T, cfg.chunk);

    struct ModalityState {
        Var input;
        GatedHidden gh;
        Var q_full;
        std::vector<Var> q, k, v_spe, v_sha;
        SpecificAttention spe;
        Selections selected;
    };
    ModalityState ms[2];
    ms[0].input = f_lip;
    ms[1].input = f_hand;

    for (int m = 0; m < 2; ++m) {
        ModalityState& s = ms[m];
        if (cfg.gate_on) {
            s.gh = gated_input_projection(t, s.input, lv.w_u, cfg.d, cfg.phi);
        } else {
            s.gh.f_u = plain_input_projection(t, s.input, lv.w_u, cfg.d);
            s.gh.g_u = Var{};
        }
        s.q_full = affine_cols(t, s.gh.f_u, lv.so_gamma[SO_Q], lv.so_beta[SO_Q]);
        Var k_full = affine_cols(t, s.gh.f_u, lv.so_gamma[SO_K], lv.so_beta[SO_K]);
        Var vspe_full = affine_cols(t, s.gh.f_u, lv.so_gamma[SO_VSPE], lv.so_beta[SO_VSPE]);
        Var vsha_full = affine_cols(t, s.gh.f_u, lv.so_gamma[SO_VSHA], lv.so_beta[SO_VSHA]);
        s.q = chunk_rows(t, s.q_full, l);
        s.k = chunk_rows(t, k_full, l);
        s.v_spe = chunk_rows(t, vspe_full, l);
        s.v_sha = chunk_rows(t, vsha_full, l);
        s.spe = modality_specific_attention(t, s.q, s.k, s.v_spe, l, cfg.d, cfg.psi);

        std::vector<Tensor> a_vals;
        a_vals.reserve(l.n);
        for (Var a : s.spe.A) a_vals.push_back(t.val(a));
        TurTable table = make_tur_table(a_vals, l, cfg.topk);
        s.selected = frozen ? frozen->per_modality[m] : table.selected;
        if (diag) {
            diag->tur[m] = std::move(table);
            diag->a_spe[m] = std::move(a_vals);
        }
    }

    Var out[2];
    FusedKV fused_both;
    if (cfg.fusion_on) {
        std::vector<SelectedChunks> mods = {
            {&ms[0].k, &ms[0].v_sha, &ms[0].selected},
            {&ms[1].k, &ms[1].v_sha, &ms[1].selected}};
        fused_both = fuse_chunks(t, mods);
    }
    for (int m = 0; m < 2; ++m) {
        ModalityState& s = ms[m];
        FusedKV fused = fused_both;
        if (!cfg.fusion_on) {
            std::vector<SelectedChunks> self = {{&s.k, &s.v_sha, &s.selected}};
            fused = fuse_chunks(t, self);
        }
        SharedAttention sha = modality_shared_attention(t, s.q_full, fused, cfg.d, cfg.psi);
        Var f_o = addition_merge(t, s.spe.output, sha.output);
        Var projected = cfg.gate_on
                            ? gated_output_projection(t, f_o, s.gh.g_u, lv.w_o, cfg.phi)
                            : plain_output_projection(t, f_o, lv.w_o);
        Var aggregated = conagg(t, projected, lv, lp, mode);
        out[m] = add(t, s.input, aggregated);
    }
    return {out[0], out[1]};
}

}  // namespace ecofuse
