#pragma once

// Full models over the fusion layer: a stack of shared-parameter layers with
// an average-then-linear frame classifier, and a quadratic softmax MHSA
// baseline over the concatenated modality streams that serves as the
// correctness and cost anchor. Training is Adam at batch size one with a
// linear warmup followed by inverse square root decay.

#include <cstring>
#include <fstream>
#include <map>

#include "ecofuse/block.hpp"
#include "ecofuse/synthdata.hpp"

namespace ecofuse {

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t d_m = 64;
    std::size_t d = 32;
    std::size_t chunk = 32;
    std::size_t topk = 4;
    std::size_t kernel = 3;
    PsiMode psi = PsiMode::squared_relu;
    Phi phi = Phi::swish;
    bool gate_on = true;
    bool fusion_on = true;
    std::size_t phonemes = 40;
    std::uint64_t seed = 1;
    std::size_t heads = 4;  // baseline only
    bool baseline = false;

    LayerConfig layer_config() const {
        LayerConfig lc;
        lc.d_m = d_m;
        lc.d = d;
        lc.chunk = chunk;
        lc.topk = topk;
        lc.kernel = kernel;
        lc.psi = psi;
        lc.phi = phi;
        lc.gate_on = gate_on;
        lc.fusion_on = fusion_on;
        return lc;
    }

    void validate() const {
        if (layers < 1 || phonemes < 1) throw std::runtime_error("model config: counts must be >= 1");
        layer_config().validate();
        if (baseline && (heads < 1 || d_m % heads != 0))
            throw std::runtime_error("model config: heads must divide d_m");
    }
};

struct BaselineLayerParams {
    Tensor w_q, w_k, w_v, w_o;  // each d_m x d_m
};

inline void collect_baseline_params(BaselineLayerParams& p, const std::string& prefix,
                                    std::vector<NamedParam>& out) {
    out.push_back({prefix + "/wq", &p.w_q, true});
    out.push_back({prefix + "/wk", &p.w_k, true});
    out.push_back({prefix + "/wv", &p.w_v, true});
    out.push_back({prefix + "/wo", &p.w_o, true});
}

struct Model {
    ModelConfig cfg;
    std::vector<LayerParams> layers;
    std::vector<BaselineLayerParams> base_layers;
    Tensor head;  // d_m x P

    std::vector<NamedParam> named_params() {
        std::vector<NamedParam> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            collect_layer_params(layers[i], "layer" + std::to_string(i), out);
        for (std::size_t i = 0; i < base_layers.size(); ++i)
            collect_baseline_params(base_layers[i], "base" + std::to_string(i), out);
        out.push_back({"head/w", &head, true});
        return out;
    }
};

inline Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    std::mt19937_64 rng(cfg.seed);
    if (cfg.baseline) {
        for (std::size_t i = 0; i < cfg.layers; ++i) {
            BaselineLayerParams p;
            const double s = 1.0 / std::sqrt(double(cfg.d_m));
            p.w_q = Tensor::randn({cfg.d_m, cfg.d_m}, rng, s);
            p.w_k = Tensor::randn({cfg.d_m, cfg.d_m}, rng, s);
            p.w_v = Tensor::randn({cfg.d_m, cfg.d_m}, rng, s);
            p.w_o = Tensor::randn({cfg.d_m, cfg.d_m}, rng, s);
            m.base_layers.push_back(std::move(p));
        }
    } else {
        for (std::size_t i = 0; i < cfg.layers; ++i)
            m.layers.push_back(init_layer_params(cfg.layer_config(), rng));
    }
    m.head = Tensor::randn({cfg.d_m, cfg.phonemes}, rng, 1.0 / std::sqrt(double(cfg.d_m)));
    return m;
}

// Trainable vars in the exact order named_params walks them.
inline void append_trainable_layer_vars(const LayerVars& v, std::vector<Var>& out) {
    out.push_back(v.w_u);
    out.push_back(v.w_o);
    for (int s = 0; s < 4; ++s) {
        out.push_back(v.so_gamma[s]);
        out.push_back(v.so_beta[s]);
    }
    out.push_back(v.dw);
    out.push_back(v.pw);
    out.push_back(v.bn1_gamma);
    out.push_back(v.bn1_beta);
    out.push_back(v.bn2_gamma);
    out.push_back(v.bn2_beta);
}

struct ForwardOptions {
    NormMode mode = NormMode::eval;
    Modality modality = Modality::both;
    bool want_diagnostics = false;
    bool want_attention = false;                         // baseline softmax maps
    const std::vector<FrozenSelections>* frozen = nullptr;
    std::size_t topk_override = 0;                       // 0 keeps the configured k
};

struct ForwardOut {
    Var logits;
    std::vector<LayerDiagnostics> diags;  // one per layer when requested
    std::vector<Tensor> attention;        // baseline: per layer, per head
};

inline ForwardOut model_forward(Tape& t, Model& m, const SequenceRecord& rec,
                                const ForwardOptions& opt,
                                std::vector<Var>* flat_trainable = nullptr) {
    const std::size_t T = rec.labels.size();
    if (rec.lip.rank() != 2 || rec.hand.rank() != 2 || rec.lip.shape[0] != T ||
        rec.hand.shape[0] != T)
        throw std::runtime_error("model_forward: stream and label lengths differ");
    if (rec.lip.shape[1] != m.cfg.d_m || rec.hand.shape[1] != m.cfg.d_m)
        throw std::runtime_error("model_forward: feature width does not match d_m");

    Tensor lip = rec.lip, hand = rec.hand;
    bool fusion_on = m.cfg.fusion_on;
    if (opt.modality == Modality::lip) {
        hand = Tensor(hand.shape);
        fusion_on = false;
    } else if (opt.modality == Modality::hand) {
        lip = Tensor(lip.shape);
        fusion_on = false;
    }

    ForwardOut out;
    if (m.cfg.baseline) {
        std::vector<std::vector<Var>> bvars;
        for (BaselineLayerParams& p : m.base_layers) {
            std::vector<Var> v = {t.leaf(p.w_q), t.leaf(p.w_k), t.leaf(p.w_v),
                                  t.leaf(p.w_o)};
            if (flat_trainable)
                flat_trainable->insert(flat_trainable->end(), v.begin(), v.end());
            bvars.push_back(std::move(v));
        }
        Var head = t.leaf(m.head);
        if (flat_trainable) flat_trainable->push_back(head);

        Var x = concat_rows(t, {t.leaf(lip), t.leaf(hand)});
        const std::size_t dh = m.cfg.d_m / m.cfg.heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
        for (std::size_t li = 0; li < m.base_layers.size(); ++li) {
            Var q = matmul(t, x, bvars[li][0]);
            Var k = matmul(t, x, bvars[li][1]);
            Var v = matmul(t, x, bvars[li][2]);
            std::vector<Var> ctx;
            for (std::size_t h = 0; h < m.cfg.heads; ++h) {
                const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
                Var qh = slice_cols(t, q, c0, c1);
                Var kh = slice_cols(t, k, c0, c1);
                Var vh = slice_cols(t, v, c0, c1);
                Var a = softmax_rows(t, scale(t, matmul(t, qh, transpose(t, kh)), inv_sqrt_dh));
                if (opt.want_attention) out.attention.push_back(t.val(a));
                ctx.push_back(matmul(t, a, vh));
            }
            Var mixed = matmul(t, concat_cols(t, ctx), bvars[li][3]);
            x = add(t, x, mixed);
        }
        Var lip_rows = slice_rows(t, x, 0, T);
        Var hand_rows = slice_rows(t, x, T, 2 * T);
        Var avg = scale(t, add(t, lip_rows, hand_rows), 0.5);
        out.logits = matmul(t, avg, head);
        return out;
    }

    std::vector<LayerVars> lvs;
    for (LayerParams& p : m.layers) {
        LayerVars lv = bind_layer(t, p);
        if (flat_trainable) append_trainable_layer_vars(lv, *flat_trainable);
        lvs.push_back(lv);
    }
    Var head = t.leaf(m.head);
    if (flat_trainable) flat_trainable->push_back(head);

    LayerConfig lc = m.cfg.layer_config();
    lc.fusion_on = fusion_on;
    if (opt.topk_override > 0) lc.topk = std::min(opt.topk_override, lc.chunk);

    Var f_lip = t.leaf(lip);
    Var f_hand = t.leaf(hand);
    if (opt.want_diagnostics) out.diags.resize(m.layers.size());
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        LayerDiagnostics* diag = opt.want_diagnostics ? &out.diags[li] : nullptr;
        const FrozenSelections* frozen =
            opt.frozen ? &(*opt.frozen)[li] : nullptr;
        auto [nl, nh] = ecolayer_forward(t, f_lip, f_hand, lvs[li], m.layers[li], lc,
                                         opt.mode, diag, frozen);
        f_lip = nl;
        f_hand = nh;
    }
    Var avg = scale(t, add(t, f_lip, f_hand), 0.5);
    out.logits = matmul(t, avg, head);
    return out;
}

// ---- optimizer ----

inline double lr_schedule(double peak, std::size_t warmup, std::size_t step) {
    if (step < 1) throw std::runtime_error("lr_schedule: steps count from 1");
    const double s = static_cast<double>(step), w = static_cast<double>(warmup);
    return peak * std::min(s / w, std::sqrt(w / s));
}

struct TrainConfig {
    std::size_t epochs = 15;
    double lr_peak = 2e-3;
    std::size_t warmup = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t log_every = 100;
};

struct TrainLog {
    std::vector<std::pair<std::size_t, double>> losses;
    double final_loss = 0.0;
    std::size_t steps = 0;
};

// Bias-corrected Adam step. A zero gradient leaves both moments and the
// parameter untouched bitwise.
inline void adam_update(Tensor& p, const Tensor& g, Tensor& m1, Tensor& m2,
                        std::size_t step, const TrainConfig& tc) {
    ensure_same_shape(p, g, "adam_update");
    const double lr = lr_schedule(tc.lr_peak, tc.warmup, step);
    const double bc1 = 1.0 - std::pow(tc.beta1, double(step));
    const double bc2 = 1.0 - std::pow(tc.beta2, double(step));
    for (std::size_t e = 0; e < p.data.size(); ++e) {
        const double ge = g.data[e];
        m1.data[e] = tc.beta1 * m1.data[e] + (1.0 - tc.beta1) * ge;
        m2.data[e] = tc.beta2 * m2.data[e] + (1.0 - tc.beta2) * ge * ge;
        const double mhat = m1.data[e] / bc1;
        const double vhat = m2.data[e] / bc2;
        p.data[e] -= lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
    }
}

inline TrainLog train(Model& m, const std::vector<SequenceRecord>& data,
                      const TrainConfig& tc, std::ostream* progress = nullptr) {
    if (data.empty()) throw std::runtime_error("train: dataset is empty");
    std::vector<NamedParam> named = m.named_params();
    std::vector<Tensor*> params;
    for (const NamedParam& np : named)
        if (np.trainable) params.push_back(np.value);

    std::vector<Tensor> mom1, mom2;
    for (Tensor* p : params) {
        mom1.emplace_back(p->shape);
        mom2.emplace_back(p->shape);
    }

    TrainLog log;
    std::mt19937_64 shuffle_rng(tc.seed);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t idx : order) {
            ++step;
            double loss_value = 0.0;
            try {
                Tape tape;
                std::vector<Var> flat;
                ForwardOptions opt;
                opt.mode = NormMode::train;
                ForwardOut fo = model_forward(tape, m, data[idx], opt, &flat);
                Var loss = cross_entropy(tape, fo.logits, data[idx].labels);
                loss_value = tape.val(loss).data[0];
                if (!std::isfinite(loss_value))
                    throw std::runtime_error("non-finite loss");
                tape.backward(loss);

                for (std::size_t pi = 0; pi < params.size(); ++pi)
                    adam_update(*params[pi], tape.grad(flat[pi]), mom1[pi], mom2[pi],
                                step, tc);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("train: step " + std::to_string(step) + ": " +
                                         e.what());
            }
            if (tc.log_every > 0 && step % tc.log_every == 0) {
                log.losses.emplace_back(step, loss_value);
                if (progress)
                    *progress << "step " << step << " loss " << loss_value << "\n";
            }
            log.final_loss = loss_value;
        }
    }
    log.steps = step;
    return log;
}

struct EvalResult {
    double accuracy = 0.0;
    Tensor confusion;  // P x P, rows are true labels
    std::size_t frames = 0;
};

inline EvalResult evaluate(Model& m, const std::vector<SequenceRecord>& data,
                           Modality modality) {
    EvalResult res;
    res.confusion = Tensor({m.cfg.phonemes, m.cfg.phonemes});
    std::size_t correct = 0;
    for (const SequenceRecord& rec : data) {
        Tape tape;
        ForwardOptions opt;
        opt.mode = NormMode::eval;
        opt.modality = modality;
        ForwardOut fo = model_forward(tape, m, rec, opt);
        const Tensor& logits = tape.val(fo.logits);
        for (std::size_t i = 0; i < rec.labels.size(); ++i) {
            if (rec.labels[i] < 0 || std::size_t(rec.labels[i]) >= m.cfg.phonemes)
                throw std::runtime_error("evaluate: label out of range");
            std::size_t best = 0;
            for (std::size_t j = 1; j < m.cfg.phonemes; ++j)
                if (logits(i, j) > logits(i, best)) best = j;
            res.confusion(std::size_t(rec.labels[i]), best) += 1.0;
            if (best == std::size_t(rec.labels[i])) ++correct;
            ++res.frames;
        }
    }
    if (res.frames == 0) throw std::runtime_error("evaluate: dataset has no frames");
    res.accuracy = static_cast<double>(correct) / static_cast<double>(res.frames);
    return res;
}

// ---- checkpoint format ----
// "ECOF", u32 version, u64 record count, then per record: u32 name length,
// name bytes, u32 rank, u64 extents, raw little-endian f64 data. Config
// values ride along as rank-1 records under the _config/ prefix.

namespace detail {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
inline void write_pod(std::ostream& out, T v) {
    write_bytes(out, &v, sizeof(T));
}

template <typename T>
inline T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

inline void write_record(std::ostream& out, const std::string& name, const Tensor& t) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    write_bytes(out, name.data(), name.size());
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) write_pod<std::uint64_t>(out, e);
    write_bytes(out, t.data.data(), t.data.size() * sizeof(double));
}

inline std::pair<std::string, Tensor> read_record(std::istream& in) {
    const std::uint32_t name_len = read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint: truncated record name");
    const std::uint32_t rank = read_pod<std::uint32_t>(in);
    if (rank < 1 || rank > 3) throw std::runtime_error("checkpoint: bad rank");
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
        shape[i] = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated record data");
    return {std::move(name), std::move(t)};
}

inline std::vector<std::pair<std::string, double>> config_entries(const ModelConfig& c) {
    return {{"layers", double(c.layers)},
            {"d_m", double(c.d_m)},
            {"d", double(c.d)},
            {"chunk", double(c.chunk)},
            {"topk", double(c.topk)},
            {"kernel", double(c.kernel)},
            {"psi", c.psi == PsiMode::squared_relu ? 0.0 : 1.0},
            {"phi", c.phi == Phi::swish ? 0.0 : 1.0},
            {"gate_on", c.gate_on ? 1.0 : 0.0},
            {"fusion_on", c.fusion_on ? 1.0 : 0.0},
            {"phonemes", double(c.phonemes)},
            {"seed", double(c.seed)},
            {"heads", double(c.heads)},
            {"baseline", c.baseline ? 1.0 : 0.0}};
}

}  // namespace detail

inline void save_model(Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    out.write("ECOF", 4);
    detail::write_pod<std::uint32_t>(out, 1u);
    std::vector<NamedParam> named = m.named_params();
    const auto cfg_entries = detail::config_entries(m.cfg);
    detail::write_pod<std::uint64_t>(out, cfg_entries.size() + named.size());
    for (const auto& [key, value] : cfg_entries) {
        Tensor t({1}, {value});
        detail::write_record(out, "_config/" + key, t);
    }
    for (const NamedParam& np : named) detail::write_record(out, np.name, *np.value);
    if (!out) throw std::runtime_error("save_model: write failed on " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "ECOF", 4) != 0)
        throw std::runtime_error("load_model: bad magic, not a checkpoint");
    const std::uint32_t version = detail::read_pod<std::uint32_t>(in);
    if (version != 1)
        throw std::runtime_error("load_model: unsupported version " +
                                 std::to_string(version));
    const std::uint64_t count = detail::read_pod<std::uint64_t>(in);
    std::map<std::string, Tensor> records;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::read_record(in);
        if (!records.emplace(std::move(name), std::move(t)).second)
            throw std::runtime_error("load_model: duplicate record");
    }

    auto cfg_value = [&](const std::string& key) {
        auto it = records.find("_config/" + key);
        if (it == records.end())
            throw std::runtime_error("load_model: missing config key " + key);
        const double v = it->second.data.at(0);
        records.erase(it);
        return v;
    };
    ModelConfig cfg;
    cfg.layers = std::size_t(cfg_value("layers"));
    cfg.d_m = std::size_t(cfg_value("d_m"));
    cfg.d = std::size_t(cfg_value("d"));
    cfg.chunk = std::size_t(cfg_value("chunk"));
    cfg.topk = std::size_t(cfg_value("topk"));
    cfg.kernel = std::size_t(cfg_value("kernel"));
    cfg.psi = cfg_value("psi") == 0.0 ? PsiMode::squared_relu : PsiMode::plain_relu;
    cfg.phi = cfg_value("phi") == 0.0 ? Phi::swish : Phi::identity;
    cfg.gate_on = cfg_value("gate_on") != 0.0;
    cfg.fusion_on = cfg_value("fusion_on") != 0.0;
    cfg.phonemes = std::size_t(cfg_value("phonemes"));
    cfg.seed = std::uint64_t(cfg_value("seed"));
    cfg.heads = std::size_t(cfg_value("heads"));
    cfg.baseline = cfg_value("baseline") != 0.0;

    Model m = init_model(cfg);
    for (NamedParam np : m.named_params()) {
        auto it = records.find(np.name);
        if (it == records.end())
            throw std::runtime_error("load_model: missing parameter " + np.name);
        if (it->second.shape != np.value->shape)
            throw std::runtime_error("load_model: shape mismatch for " + np.name);
        *np.value = std::move(it->second);
        records.erase(it);
    }
    if (!records.empty())
        throw std::runtime_error("load_model: unknown record " + records.begin()->first);
    return m;
}

}  // namespace ecofuse
