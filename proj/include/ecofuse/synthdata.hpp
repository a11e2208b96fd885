#pragma once

// Synthetic two-modality sequence task. Frames carry a phoneme label drawn in
// segments; the lip stream only reveals the label's lip class and the hand
// stream only its hand class, shifted earlier in time, so each stream alone
// is ambiguous while the pair decodes the label exactly. A closed-form Bayes
// ceiling per modality makes the ambiguity testable.

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ecofuse/tensor.hpp"

namespace ecofuse {

enum class Modality { both, lip, hand };

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

struct TaskSpec {
    std::size_t phonemes = 40;
    std::size_t lip_classes = 10;
    std::size_t hand_classes = 8;
    std::size_t frames = 96;
    std::size_t feature_dim = 64;
    double sigma = 0.3;
    std::size_t delta = 2;  // hand leads the lips by this many frames
    std::size_t seg_min = 4;
    std::size_t seg_max = 10;
    std::uint64_t seed = 1;

    Tensor lip_embed;   // lip_classes x feature_dim, unit-norm rows
    Tensor hand_embed;  // hand_classes x feature_dim

    std::size_t lip_of(std::size_t p) const { return p % lip_classes; }
    std::size_t hand_of(std::size_t p) const { return p % hand_classes; }

    void validate() const {
        if (phonemes < 1 || lip_classes < 1 || hand_classes < 1)
            throw std::runtime_error("task spec: class counts must be >= 1");
        if (frames < 1 || feature_dim < 1)
            throw std::runtime_error("task spec: frames and feature_dim must be >= 1");
        if (seg_min < 1 || seg_min > seg_max)
            throw std::runtime_error("task spec: segment range invalid");
        if (sigma < 0.0) throw std::runtime_error("task spec: sigma must be >= 0");
        if (lip_classes * hand_classes < phonemes)
            throw std::runtime_error("task spec: lip*hand classes must cover phonemes");
        // the (lip, hand) pair must identify the phoneme
        for (std::size_t a = 0; a < phonemes; ++a)
            for (std::size_t b = a + 1; b < phonemes; ++b)
                if (lip_of(a) == lip_of(b) && hand_of(a) == hand_of(b))
                    throw std::runtime_error("task spec: phoneme map not injective");
    }

    void build_embeddings() {
        validate();
        std::mt19937_64 rng(seed);
        auto table = [&](std::size_t classes) {
            Tensor t = Tensor::randn({classes, feature_dim}, rng);
            for (std::size_t i = 0; i < classes; ++i) {
                double norm = 0.0;
                for (std::size_t j = 0; j < feature_dim; ++j)
                    norm += t(i, j) * t(i, j);
                norm = std::sqrt(norm);
                for (std::size_t j = 0; j < feature_dim; ++j) t(i, j) /= norm;
            }
            return t;
        };
        lip_embed = table(lip_classes);
        hand_embed = table(hand_classes);
    }
};

struct SequenceRecord {
    std::size_t id = 0;
    Tensor lip;   // frames x feature_dim
    Tensor hand;  // frames x feature_dim
    std::vector<int> labels;
    std::vector<std::size_t> boundaries;  // segment start frames
};

inline std::vector<SequenceRecord> generate(const TaskSpec& spec, std::size_t count,
                                            std::uint64_t seed) {
    if (spec.lip_embed.size() == 0)
        throw std::runtime_error("generate: spec embeddings not built");
    std::vector<SequenceRecord> records(count);
    const std::size_t T = spec.frames, d = spec.feature_dim;
    for (std::size_t r = 0; r < count; ++r) {
        SequenceRecord& rec = records[r];
        rec.id = r;
        rec.labels.resize(T);
        rec.lip = Tensor({T, d});
        rec.hand = Tensor({T, d});
        std::mt19937_64 rng(splitmix64(seed ^ splitmix64(r + 1)));
        std::uniform_int_distribution<std::size_t> seg_len(spec.seg_min, spec.seg_max);
        std::uniform_int_distribution<std::size_t> phoneme(0, spec.phonemes - 1);
        std::size_t t = 0;
        while (t < T) {
            const std::size_t len = seg_len(rng);
            const std::size_t p = phoneme(rng);
            rec.boundaries.push_back(t);
            for (std::size_t i = t; i < std::min(t + len, T); ++i)
                rec.labels[i] = static_cast<int>(p);
            t += len;
        }
        std::normal_distribution<double> noise(0.0, spec.sigma);
        for (std::size_t i = 0; i < T; ++i) {
            const std::size_t lc = spec.lip_of(rec.labels[i]);
            for (std::size_t j = 0; j < d; ++j)
                rec.lip(i, j) = spec.lip_embed(lc, j) + (spec.sigma > 0 ? noise(rng) : 0.0);
        }
        for (std::size_t i = 0; i < T; ++i) {
            const std::size_t ahead = std::min(i + spec.delta, T - 1);
            const std::size_t hc = spec.hand_of(rec.labels[ahead]);
            for (std::size_t j = 0; j < d; ++j)
                rec.hand(i, j) = spec.hand_embed(hc, j) + (spec.sigma > 0 ? noise(rng) : 0.0);
        }
    }
    return records;
}

// Per-frame accuracy ceiling of an ideal classifier seeing one noiseless
// modality under a uniform phoneme prior: each observed class pins the answer
// down to the phonemes sharing it, so the ceiling is (#distinct classes)/P.
// The fused pair decodes exactly.
inline double bayes_oracle_accuracy(const TaskSpec& spec, Modality m) {
    if (m == Modality::both) return 1.0;
    std::vector<bool> seen(m == Modality::lip ? spec.lip_classes : spec.hand_classes, false);
    std::size_t distinct = 0;
    for (std::size_t p = 0; p < spec.phonemes; ++p) {
        const std::size_t c = m == Modality::lip ? spec.lip_of(p) : spec.hand_of(p);
        if (!seen[c]) {
            seen[c] = true;
            ++distinct;
        }
    }
    return static_cast<double>(distinct) / static_cast<double>(spec.phonemes);
}

namespace detail {
inline nlohmann::json matrix_to_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < t.shape[0]; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < t.shape[1]; ++j) row.push_back(t(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Tensor matrix_from_json(const nlohmann::json& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows[0].size() : 0;
    Tensor t({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        if (rows[i].size() != c) throw std::runtime_error("ragged feature matrix");
        for (std::size_t j = 0; j < c; ++j) t(i, j) = rows[i][j].get<double>();
    }
    return t;
}
}  // namespace detail

inline void save_jsonl(const std::vector<SequenceRecord>& records, const TaskSpec& spec,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_jsonl: cannot open " + path);
    nlohmann::json meta = {{"count", records.size()},
                           {"phonemes", spec.phonemes},
                           {"lip_classes", spec.lip_classes},
                           {"hand_classes", spec.hand_classes},
                           {"frames", spec.frames},
                           {"feature_dim", spec.feature_dim},
                           {"sigma", spec.sigma},
                           {"delta", spec.delta},
                           {"seg_min", spec.seg_min},
                           {"seg_max", spec.seg_max},
                           {"seed", spec.seed}};
    out << nlohmann::json{{"_meta", meta}}.dump() << "\n";
    for (const SequenceRecord& rec : records) {
        nlohmann::json line = {{"id", rec.id},
                               {"lip", detail::matrix_to_json(rec.lip)},
                               {"hand", detail::matrix_to_json(rec.hand)},
                               {"labels", rec.labels},
                               {"boundaries", rec.boundaries}};
        out << line.dump() << "\n";
    }
    if (!out) throw std::runtime_error("save_jsonl: write failed on " + path);
}

struct Dataset {
    TaskSpec spec;
    std::vector<SequenceRecord> records;
};

inline Dataset load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    bool meta_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": parse error: " + e.what());
        }
        try {
            if (!meta_seen) {
                if (!j.contains("_meta"))
                    throw std::runtime_error("first line must carry _meta");
                const nlohmann::json& m = j["_meta"];
                ds.spec.phonemes = m.at("phonemes").get<std::size_t>();
                ds.spec.lip_classes = m.at("lip_classes").get<std::size_t>();
                ds.spec.hand_classes = m.at("hand_classes").get<std::size_t>();
                ds.spec.frames = m.at("frames").get<std::size_t>();
                ds.spec.feature_dim = m.at("feature_dim").get<std::size_t>();
                ds.spec.sigma = m.at("sigma").get<double>();
                ds.spec.delta = m.at("delta").get<std::size_t>();
                ds.spec.seg_min = m.at("seg_min").get<std::size_t>();
                ds.spec.seg_max = m.at("seg_max").get<std::size_t>();
                ds.spec.seed = m.at("seed").get<std::uint64_t>();
                ds.spec.build_embeddings();
                meta_seen = true;
                continue;
            }
            SequenceRecord rec;
            rec.id = j.at("id").get<std::size_t>();
            rec.lip = detail::matrix_from_json(j.at("lip"));
            rec.hand = detail::matrix_from_json(j.at("hand"));
            rec.labels = j.at("labels").get<std::vector<int>>();
            rec.boundaries = j.at("boundaries").get<std::vector<std::size_t>>();
            if (rec.lip.shape[0] != rec.labels.size() ||
                rec.hand.shape[0] != rec.labels.size())
                throw std::runtime_error("stream and label lengths differ");
            ds.records.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": malformed record: " + e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!meta_seen) throw std::runtime_error(path + ": empty dataset, no _meta line");
    return ds;
}

}  // namespace ecofuse
