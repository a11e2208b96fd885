#pragma once

// Dense row-major tensors (rank 1 to 3) over 64-bit floats, plus the value
// level kernels everything else composes. The multiply-accumulate counter
// lives here so that cost accounting instruments exactly two kernels:
// matmul and the depthwise temporal convolution.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecofuse {

inline std::uint64_t& mac_counter() {
    thread_local std::uint64_t count = 0;
    return count;
}

inline void reset_macs() { mac_counter() = 0; }
inline std::uint64_t macs_used() { return mac_counter(); }

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        if (shape.empty() || shape.size() > 3)
            throw std::runtime_error("Tensor: rank must be 1 to 3");
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        data.assign(n, 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (shape.empty() || shape.size() > 3)
            throw std::runtime_error("Tensor: rank must be 1 to 3");
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        if (n != data.size())
            throw std::runtime_error("Tensor: data length does not match shape");
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        Tensor t({r, c});
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c)
                throw std::runtime_error("Tensor::matrix: ragged rows");
            for (double v : row) t.data[i++] = v;
        }
        return t;
    }

    static Tensor zeros(std::size_t r, std::size_t c) { return Tensor({r, c}); }

    static Tensor randn(std::vector<std::size_t> s, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data) v = dist(rng);
        return t;
    }

    std::size_t rank() const { return shape.size(); }
    std::size_t size() const { return data.size(); }

    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const {
        if (rank() != 2) throw std::runtime_error("Tensor::cols: rank-2 only");
        return shape[1];
    }

    double& operator()(std::size_t i) { return data[i]; }
    double operator()(std::size_t i) const { return data[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void ensure_finite(const Tensor& t, const char* op) {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
}

inline void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::runtime_error(std::string(op) + ": shape mismatch");
}

inline void ensure_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::runtime_error(std::string(op) + ": rank-2 tensor required");
}

// ---- value kernels ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    ensure_rank2(a, "matmul");
    ensure_rank2(b, "matmul");
    if (a.shape[1] != b.shape[0])
        throw std::runtime_error("matmul: inner extents " + std::to_string(a.shape[1]) +
                                 " vs " + std::to_string(b.shape[0]));
    const std::size_t m = a.shape[0], p = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &c.data[i * n];
        for (std::size_t k = 0; k < p; ++k) {
            const double aik = a.data[i * p + k];
            const double* brow = &b.data[k * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    mac_counter() += static_cast<std::uint64_t>(m) * p * n;
    return c;
}

inline Tensor transpose(const Tensor& a) {
    ensure_rank2(a, "transpose");
    Tensor t({a.shape[1], a.shape[0]});
    for (std::size_t i = 0; i < a.shape[0]; ++i)
        for (std::size_t j = 0; j < a.shape[1]; ++j)
            t.data[j * a.shape[0] + i] = a.data[i * a.shape[1] + j];
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    ensure_same_shape(a, b, "add");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    ensure_same_shape(a, b, "mul");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data) v *= s;
    return c;
}

inline Tensor relu(const Tensor& a) {
    Tensor c = a;
    for (double& v : c.data) v = v > 0.0 ? v : 0.0;
    return c;
}

inline Tensor square(const Tensor& a) {
    Tensor c = a;
    for (double& v : c.data) v *= v;
    return c;
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Tensor sigmoid(const Tensor& a) {
    Tensor c = a;
    for (double& v : c.data) v = sigmoid_scalar(v);
    return c;
}

inline Tensor swish(const Tensor& a) {
    Tensor c = a;
    for (double& v : c.data) v = v * sigmoid_scalar(v);
    return c;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: empty list");
    std::size_t cols = parts[0].shape.size() == 2 ? parts[0].shape[1] : 0;
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        ensure_rank2(p, "concat_rows");
        if (p.shape[1] != cols) throw std::runtime_error("concat_rows: column mismatch");
        rows += p.shape[0];
    }
    Tensor c({rows, cols});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data.begin(), p.data.end(), c.data.begin() + off);
        off += p.data.size();
    }
    return c;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    ensure_rank2(a, "slice_rows");
    if (r0 > r1 || r1 > a.shape[0])
        throw std::runtime_error("slice_rows: range out of bounds");
    Tensor c({r1 - r0, a.shape[1]});
    std::copy(a.data.begin() + r0 * a.shape[1], a.data.begin() + r1 * a.shape[1],
              c.data.begin());
    return c;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    ensure_rank2(a, "gather_rows");
    Tensor c({idx.size(), a.shape[1]});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= a.shape[0])
            throw std::runtime_error("gather_rows: index " + std::to_string(idx[i]) +
                                     " out of range");
        std::copy(a.data.begin() + idx[i] * a.shape[1],
                  a.data.begin() + (idx[i] + 1) * a.shape[1],
                  c.data.begin() + i * a.shape[1]);
    }
    return c;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: empty list");
    std::size_t rows = parts[0].shape.size() == 2 ? parts[0].shape[0] : 0;
    std::size_t cols = 0;
    for (const Tensor& p : parts) {
        ensure_rank2(p, "concat_cols");
        if (p.shape[0] != rows) throw std::runtime_error("concat_cols: row mismatch");
        cols += p.shape[1];
    }
    Tensor c({rows, cols});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(p.data.begin() + i * p.shape[1], p.data.begin() + (i + 1) * p.shape[1],
                      c.data.begin() + i * cols + off);
        off += p.shape[1];
    }
    return c;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    ensure_rank2(a, "slice_cols");
    if (c0 > c1 || c1 > a.shape[1])
        throw std::runtime_error("slice_cols: range out of bounds");
    Tensor c({a.shape[0], c1 - c0});
    for (std::size_t i = 0; i < a.shape[0]; ++i)
        std::copy(a.data.begin() + i * a.shape[1] + c0, a.data.begin() + i * a.shape[1] + c1,
                  c.data.begin() + i * (c1 - c0));
    return c;
}

// axis 0 collapses rows into a 1 x n result, axis 1 collapses columns into m x 1.
inline Tensor sum_axis(const Tensor& a, int axis) {
    ensure_rank2(a, "sum_axis");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (axis == 0) {
        Tensor c({1, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c.data[j] += a.data[i * n + j];
        return c;
    }
    if (axis == 1) {
        Tensor c({m, 1});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c.data[i] += a.data[i * n + j];
        return c;
    }
    throw std::runtime_error("sum_axis: axis must be 0 or 1");
}

inline Tensor affine_cols(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    ensure_rank2(x, "affine_cols");
    if (gamma.size() != x.shape[1] || beta.size() != x.shape[1])
        throw std::runtime_error("affine_cols: parameter length mismatch");
    Tensor c = x;
    for (std::size_t i = 0; i < x.shape[0]; ++i)
        for (std::size_t j = 0; j < x.shape[1]; ++j)
            c.data[i * x.shape[1] + j] = gamma.data[j] * x.data[i * x.shape[1] + j] + beta.data[j];
    return c;
}

inline Tensor softmax_rows(const Tensor& a) {
    ensure_rank2(a, "softmax_rows");
    Tensor c = a;
    const std::size_t m = a.shape[0], n = a.shape[1];
    for (std::size_t i = 0; i < m; ++i) {
        double* row = &c.data[i * n];
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    return c;
}

// Depthwise convolution along the time axis. Input is channels x T, one
// kernel row of D taps per channel, zero same-padding. Every output sample
// spends D multiply-adds, padding taps included, which keeps the counter
// aligned with the closed-form cost T*D*channels.
inline Tensor dwconv_time(const Tensor& z, const Tensor& kernels) {
    ensure_rank2(z, "dwconv_time");
    ensure_rank2(kernels, "dwconv_time");
    const std::size_t ch = z.shape[0], T = z.shape[1], D = kernels.shape[1];
    if (kernels.shape[0] != ch)
        throw std::runtime_error("dwconv_time: kernel channel mismatch");
    if (D % 2 == 0) throw std::runtime_error("dwconv_time: kernel width must be odd");
    const std::size_t h = D / 2;
    Tensor out({ch, T});
    for (std::size_t c = 0; c < ch; ++c) {
        const double* zrow = &z.data[c * T];
        const double* krow = &kernels.data[c * D];
        double* orow = &out.data[c * T];
        for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < D; ++j) {
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + j) -
                                         static_cast<std::ptrdiff_t>(h);
                if (s >= 0 && s < static_cast<std::ptrdiff_t>(T)) acc += krow[j] * zrow[s];
            }
            orow[t] = acc;
        }
    }
    mac_counter() += static_cast<std::uint64_t>(ch) * T * D;
    return out;
}

enum class PsiMode { squared_relu, plain_relu };

// The attention nonlinearity: psi(x) = relu(x)^2 / attended_count, applied to
// already 1/sqrt(d)-scaled scores. Plain relu kept as an ablation variant.
inline Tensor psi(const Tensor& scores, std::size_t attended_count,
                  PsiMode mode = PsiMode::squared_relu) {
    if (attended_count < 1) throw std::runtime_error("psi: attended_count must be >= 1");
    Tensor r = relu(scores);
    if (mode == PsiMode::squared_relu) r = square(r);
    return scale(r, 1.0 / static_cast<double>(attended_count));
}

}  // namespace ecofuse
