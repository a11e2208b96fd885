#pragma once

// Post-hoc analysis utilities: a one-sided Jacobi SVD for attention spectrum
// studies, TUR and CUR histogram extraction from trained models, a two-sample
// z statistic, and the CSV writers the command line tool prints through.

#include <iomanip>

#include "ecofuse/model.hpp"

namespace ecofuse {

struct Svd {
    Tensor u;               // m x k, columns orthonormal where sigma > 0
    std::vector<double> s;  // k = min(m, n) values, descending, nonnegative
    Tensor v;               // n x k
};

// One-sided Jacobi on the columns of a. Rotations are accumulated into v, so
// on exit a_rotated = u * diag(s) and a = u * diag(s) * v^T.
inline Svd svd(const Tensor& a_in) {
    ensure_rank2(a_in, "svd");
    if (a_in.shape[0] < a_in.shape[1]) {
        Svd t = svd(transpose(a_in));
        return {std::move(t.v), std::move(t.s), std::move(t.u)};
    }
    const std::size_t m = a_in.shape[0], n = a_in.shape[1];
    Tensor b = a_in;
    Tensor v({n, n});
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    const double tol = 1e-13;
    const std::size_t max_sweeps = 100;
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += b(i, p) * b(i, p);
                    beta += b(i, q) * b(i, q);
                    gamma += b(i, p) * b(i, q);
                }
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = c * bp - s * bq;
                    b(i, q) = s * bp + c * bq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += b(i, j) * b(i, j);
        norms[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    Svd out;
    out.u = Tensor({m, n});
    out.v = Tensor({n, n});
    out.s.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s[j] = norms[src];
        if (norms[src] > 0.0)
            for (std::size_t i = 0; i < m; ++i) out.u(i, j) = b(i, src) / norms[src];
        for (std::size_t i = 0; i < n; ++i) out.v(i, j) = v(i, src);
    }
    return out;
}

inline Tensor svd_reconstruct(const Svd& f) {
    const std::size_t m = f.u.shape[0], n = f.u.shape[1];
    Tensor us({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) us(i, j) = f.u(i, j) * f.s[j];
    return matmul(us, transpose(f.v));
}

inline std::vector<double> singular_values(const Tensor& a) { return svd(a).s; }

// Cumulative share of spectral mass captured by the leading k values.
inline std::vector<double> normalized_cumulative_spectrum(const Tensor& a) {
    std::vector<double> s = singular_values(a);
    double total = 0.0;
    for (double x : s) total += x;
    if (total <= 0.0) throw std::runtime_error("spectrum: all singular values are zero");
    std::vector<double> curve(s.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        acc += s[i];
        curve[i] = acc / total;
    }
    return curve;
}

inline std::vector<double> average_spectrum(const std::vector<Tensor>& mats) {
    if (mats.empty()) throw std::runtime_error("average_spectrum: no matrices");
    std::vector<double> avg = normalized_cumulative_spectrum(mats[0]);
    for (std::size_t i = 1; i < mats.size(); ++i) {
        std::vector<double> c = normalized_cumulative_spectrum(mats[i]);
        if (c.size() != avg.size())
            throw std::runtime_error("average_spectrum: mixed matrix sizes");
        for (std::size_t j = 0; j < c.size(); ++j) avg[j] += c[j];
    }
    for (double& x : avg) x /= double(mats.size());
    return avg;
}

// ---- histograms ----

struct Histogram {
    std::vector<double> lo, hi;
    std::vector<std::size_t> count;
};

inline Histogram make_histogram(const std::vector<double>& values, std::size_t bins,
                                double lo, double hi) {
    if (bins < 1 || !(hi > lo)) throw std::runtime_error("histogram: bad binning");
    Histogram h;
    h.lo.resize(bins);
    h.hi.resize(bins);
    h.count.assign(bins, 0);
    const double width = (hi - lo) / double(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        h.lo[b] = lo + width * double(b);
        h.hi[b] = b + 1 == bins ? hi : lo + width * double(b + 1);
    }
    for (double v : values) {
        if (v < lo || v > hi) throw std::runtime_error("histogram: value out of range");
        std::size_t b = v >= hi ? bins - 1 : std::size_t((v - lo) / width);
        if (b >= bins) b = bins - 1;
        h.count[b] += 1;
    }
    return h;
}

enum class HistNorm { by_max, by_sum };

// Flattened TUR entries with each chunk row rescaled to [0, 1]. A chunk whose
// scores are all zero maps to zeros rather than dividing by zero.
inline std::vector<double> normalized_tur_values(const TurTable& table, HistNorm norm) {
    std::vector<double> out;
    const std::size_t rows = table.tur.shape[0], cols = table.tur.shape[1];
    for (std::size_t i = 0; i < rows; ++i) {
        double denom = 0.0;
        if (norm == HistNorm::by_max) {
            for (std::size_t j = 0; j < cols; ++j) denom = std::max(denom, table.tur(i, j));
        } else {
            for (std::size_t j = 0; j < cols; ++j) denom += table.tur(i, j);
        }
        for (std::size_t j = 0; j < cols; ++j)
            out.push_back(denom > 0.0 ? table.tur(i, j) / denom : 0.0);
    }
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw std::runtime_error("mean: empty sample");
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / double(v.size());
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw std::runtime_error("median: empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- two-sample z statistic ----

struct ZTest {
    double z = 0.0;
    double p = 1.0;
    std::size_t n_a = 0, n_b = 0;
};

inline ZTest z_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 30 || b.size() < 30)
        throw std::runtime_error("z_test: need at least 30 samples per side");
    const double ma = mean_of(a), mb = mean_of(b);
    auto unbiased_var = [](const std::vector<double>& v, double m) {
        double acc = 0.0;
        for (double x : v) acc += (x - m) * (x - m);
        return acc / double(v.size() - 1);
    };
    const double va = unbiased_var(a, ma), vb = unbiased_var(b, mb);
    ZTest out;
    out.n_a = a.size();
    out.n_b = b.size();
    const double num = ma - mb;
    const double den = std::sqrt(va / double(a.size()) + vb / double(b.size()));
    if (num == 0.0) {
        out.z = 0.0;
    } else if (den == 0.0) {
        throw std::runtime_error("z_test: zero variance with unequal means");
    } else {
        out.z = num / den;
    }
    out.p = std::erfc(std::abs(out.z) / std::sqrt(2.0));
    return out;
}

// ---- model-level collectors ----

inline std::vector<Tensor> collect_attention_matrices(Model& m,
                                                      const std::vector<SequenceRecord>& data) {
    if (!m.cfg.baseline)
        throw std::runtime_error("collect_attention_matrices: needs a baseline model");
    std::vector<Tensor> out;
    for (const SequenceRecord& rec : data) {
        Tape t;
        ForwardOptions opt;
        opt.want_attention = true;
        ForwardOut fo = model_forward(t, m, rec, opt);
        for (Tensor& a : fo.attention) out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<double> collect_normalized_tur(Model& m,
                                                  const std::vector<SequenceRecord>& data,
                                                  HistNorm norm,
                                                  std::size_t topk_override = 0) {
    if (m.cfg.baseline)
        throw std::runtime_error("collect_normalized_tur: needs a fusion model");
    std::vector<double> out;
    for (const SequenceRecord& rec : data) {
        Tape t;
        ForwardOptions opt;
        opt.want_diagnostics = true;
        opt.topk_override = topk_override;
        ForwardOut fo = model_forward(t, m, rec, opt);
        for (const LayerDiagnostics& d : fo.diags)
            for (int mod = 0; mod < 2; ++mod) {
                std::vector<double> vals = normalized_tur_values(d.tur[mod], norm);
                out.insert(out.end(), vals.begin(), vals.end());
            }
    }
    return out;
}

inline std::vector<double> collect_cur(Model& m, const std::vector<SequenceRecord>& data,
                                       std::size_t topk_override = 0) {
    if (m.cfg.baseline) throw std::runtime_error("collect_cur: needs a fusion model");
    std::vector<double> out;
    for (const SequenceRecord& rec : data) {
        Tape t;
        ForwardOptions opt;
        opt.want_diagnostics = true;
        opt.topk_override = topk_override;
        ForwardOut fo = model_forward(t, m, rec, opt);
        for (const LayerDiagnostics& d : fo.diags)
            for (int mod = 0; mod < 2; ++mod) {
                std::vector<double> cur = compute_cur(d.tur[mod]);
                out.insert(out.end(), cur.begin(), cur.end());
            }
    }
    return out;
}

// ---- CSV output ----

inline std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("csv: cannot open " + path);
    out << std::setprecision(17);
    return out;
}

inline void write_spectrum_csv(const std::string& path, const std::vector<double>& curve) {
    std::ofstream out = open_csv(path);
    out << "index,value\n";
    for (std::size_t i = 0; i < curve.size(); ++i) out << i << "," << curve[i] << "\n";
    if (!out) throw std::runtime_error("csv: write failed on " + path);
}

inline void write_histogram_csv(const std::string& path, const Histogram& h) {
    std::ofstream out = open_csv(path);
    out << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < h.count.size(); ++b)
        out << h.lo[b] << "," << h.hi[b] << "," << h.count[b] << "\n";
    if (!out) throw std::runtime_error("csv: write failed on " + path);
}

inline void write_ztest_csv(const std::string& path, const ZTest& zt) {
    std::ofstream out = open_csv(path);
    out << "z,p,n_a,n_b\n";
    out << zt.z << "," << zt.p << "," << zt.n_a << "," << zt.n_b << "\n";
    if (!out) throw std::runtime_error("csv: write failed on " + path);
}

}  // namespace ecofuse
