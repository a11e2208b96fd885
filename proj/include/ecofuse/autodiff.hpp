#pragma once

// Tape based reverse-mode differentiation over the tensor kernels. A Tape owns
// every intermediate value of one forward pass in insertion (topological)
// order; each recorded node carries a closure that scatters the node's output
// gradient back onto its inputs. Vars are plain integer handles into the tape.

#include <algorithm>
#include <functional>

#include "ecofuse/tensor.hpp"

namespace ecofuse {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value) {
        values_.push_back(std::move(value));
        backs_.emplace_back();
        grads_.emplace_back();
        return Var{static_cast<int>(values_.size()) - 1};
    }

    // Id the next pushed node will get. Backward closures capture it so they
    // can read their own output gradient.
    Var next_id() const { return Var{static_cast<int>(values_.size())}; }

    Var push(Tensor value, std::function<void(Tape&)> back, const char* op) {
        ensure_finite(value, op);
        values_.push_back(std::move(value));
        backs_.push_back(std::move(back));
        grads_.emplace_back();
        return Var{static_cast<int>(values_.size()) - 1};
    }

    const Tensor& val(Var v) const { return values_.at(v.id); }

    // Gradient buffer, allocated as zeros on first touch.
    Tensor& grad(Var v) {
        Tensor& g = grads_.at(v.id);
        if (g.data.empty()) g = Tensor(values_[v.id].shape);
        return g;
    }

    bool grad_touched(Var v) const { return !grads_.at(v.id).data.empty(); }

    void backward(Var root) {
        if (val(root).size() != 1)
            throw std::runtime_error("backward: root must be scalar");
        grad(root).data[0] = 1.0;
        for (int id = root.id; id >= 0; --id) {
            if (grads_[id].data.empty() || !backs_[id]) continue;
            backs_[id](*this);
        }
    }

    std::size_t size() const { return values_.size(); }

  private:
    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::vector<std::function<void(Tape&)>> backs_;
};

namespace detail {
inline void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}
}  // namespace detail

inline Var constant(Tape& t, Tensor value) { return t.leaf(std::move(value)); }

inline Var matmul(Tape& t, Var a, Var b) {
    Tensor out = matmul(t.val(a), t.val(b));
    Var o = t.next_id();
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        detail::accumulate(tp.grad(a), matmul(dc, transpose(tp.val(b))));
        detail::accumulate(tp.grad(b), matmul(transpose(tp.val(a)), dc));
    }, "matmul");
}

inline Var add(Tape& t, Var a, Var b) {
    Tensor out = add(t.val(a), t.val(b));
    Var o = t.next_id();
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        detail::accumulate(tp.grad(a), dc);
        detail::accumulate(tp.grad(b), dc);
    }, "add");
}

inline Var mul(Tape& t, Var a, Var b) {
    Tensor out = mul(t.val(a), t.val(b));
    Var o = t.next_id();
    return t.push(std::move(out), [a, b, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        detail::accumulate(tp.grad(a), mul(dc, tp.val(b)));
        detail::accumulate(tp.grad(b), mul(dc, tp.val(a)));
    }, "mul");
}

inline Var scale(Tape& t, Var a, double s) {
    Tensor out = scale(t.val(a), s);
    Var o = t.next_id();
    return t.push(std::move(out), [a, o, s](Tape& tp) {
        detail::accumulate(tp.grad(a), scale(tp.grad(o), s));
    }, "scale");
}

inline Var relu(Tape& t, Var a) {
    Tensor out = relu(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        const Tensor& x = tp.val(a);
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        for (std::size_t i = 0; i < da.data.size(); ++i)
            if (x.data[i] > 0.0) da.data[i] += dc.data[i];
    }, "relu");
}

inline Var square(Tape& t, Var a) {
    Tensor out = square(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        const Tensor& x = tp.val(a);
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        for (std::size_t i = 0; i < da.data.size(); ++i)
            da.data[i] += 2.0 * x.data[i] * dc.data[i];
    }, "square");
}

inline Var sigmoid(Tape& t, Var a) {
    Tensor out = sigmoid(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        const Tensor& y = tp.val(o);
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        for (std::size_t i = 0; i < da.data.size(); ++i)
            da.data[i] += y.data[i] * (1.0 - y.data[i]) * dc.data[i];
    }, "sigmoid");
}

inline Var swish(Tape& t, Var a) {
    Tensor out = swish(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        const Tensor& x = tp.val(a);
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        for (std::size_t i = 0; i < da.data.size(); ++i) {
            const double s = sigmoid_scalar(x.data[i]);
            da.data[i] += (s + x.data[i] * s * (1.0 - s)) * dc.data[i];
        }
    }, "swish");
}

inline Var transpose(Tape& t, Var a) {
    Tensor out = transpose(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        detail::accumulate(tp.grad(a), transpose(tp.grad(o)));
    }, "transpose");
}

inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    for (Var p : parts) vals.push_back(t.val(p));
    Tensor out = concat_rows(vals);
    Var o = t.next_id();
    return t.push(std::move(out), [parts, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        std::size_t r0 = 0;
        for (Var p : parts) {
            const std::size_t r = tp.val(p).shape[0];
            detail::accumulate(tp.grad(p), slice_rows(dc, r0, r0 + r));
            r0 += r;
        }
    }, "concat_rows");
}

inline Var slice_rows(Tape& t, Var a, std::size_t r0, std::size_t r1) {
    Tensor out = slice_rows(t.val(a), r0, r1);
    Var o = t.next_id();
    return t.push(std::move(out), [a, o, r0, r1](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        const std::size_t n = da.shape[1];
        for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = 0; j < n; ++j)
                da.data[i * n + j] += dc.data[(i - r0) * n + j];
    }, "slice_rows");
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    for (Var p : parts) vals.push_back(t.val(p));
    Tensor out = concat_cols(vals);
    Var o = t.next_id();
    return t.push(std::move(out), [parts, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        std::size_t c0 = 0;
        for (Var p : parts) {
            const std::size_t c = tp.val(p).shape[1];
            detail::accumulate(tp.grad(p), slice_cols(dc, c0, c0 + c));
            c0 += c;
        }
    }, "concat_cols");
}

inline Var slice_cols(Tape& t, Var a, std::size_t c0, std::size_t c1) {
    Tensor out = slice_cols(t.val(a), c0, c1);
    Var o = t.next_id();
    return t.push(std::move(out), [a, o, c0, c1](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        const std::size_t n = da.shape[1], w = c1 - c0;
        for (std::size_t i = 0; i < da.shape[0]; ++i)
            for (std::size_t j = c0; j < c1; ++j)
                da.data[i * n + j] += dc.data[i * w + (j - c0)];
    }, "slice_cols");
}

// Backward scatters gradient only onto the gathered rows; repeated indices
// accumulate, so total gradient mass is conserved.
inline Var gather_rows(Tape& t, Var a, std::vector<std::size_t> idx) {
    Tensor out = gather_rows(t.val(a), idx);
    Var o = t.next_id();
    return t.push(std::move(out), [a, o, idx = std::move(idx)](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        const std::size_t n = da.shape[1];
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                da.data[idx[i] * n + j] += dc.data[i * n + j];
    }, "gather_rows");
}

inline Var sum_axis(Tape& t, Var a, int axis) {
    Tensor out = sum_axis(t.val(a), axis);
    Var o = t.next_id();
    return t.push(std::move(out), [a, o, axis](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        const std::size_t m = da.shape[0], n = da.shape[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                da.data[i * n + j] += axis == 0 ? dc.data[j] : dc.data[i];
    }, "sum_axis");
}

inline Var sum_all(Tape& t, Var a) { return sum_axis(t, sum_axis(t, a, 0), 1); }

// Per-column affine map out[i,j] = gamma[j]*x[i,j] + beta[j]. This is the
// scale and offset step that turns the hidden embedding into Q, K and the two
// V streams; a dedicated primitive keeps it out of the matmul cost counter.
inline Var affine_cols(Tape& t, Var x, Var gamma, Var beta) {
    Tensor out = affine_cols(t.val(x), t.val(gamma), t.val(beta));
    Var o = t.next_id();
    return t.push(std::move(out), [x, gamma, beta, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        const Tensor& xv = tp.val(x);
        const Tensor& gv = tp.val(gamma);
        Tensor& dx = tp.grad(x);
        Tensor& dg = tp.grad(gamma);
        Tensor& db = tp.grad(beta);
        const std::size_t m = xv.shape[0], n = xv.shape[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double d = dc.data[i * n + j];
                dx.data[i * n + j] += gv.data[j] * d;
                dg.data[j] += xv.data[i * n + j] * d;
                db.data[j] += d;
            }
    }, "affine_cols");
}

inline Var softmax_rows(Tape& t, Var a) {
    Tensor out = softmax_rows(t.val(a));
    Var o = t.next_id();
    return t.push(std::move(out), [a, o](Tape& tp) {
        const Tensor& y = tp.val(o);
        const Tensor& dc = tp.grad(o);
        Tensor& da = tp.grad(a);
        const std::size_t m = y.shape[0], n = y.shape[1];
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dc.data[i * n + j] * y.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                da.data[i * n + j] += y.data[i * n + j] * (dc.data[i * n + j] - dot);
        }
    }, "softmax_rows");
}

// Mean cross entropy over frames: logits are T x P, labels hold one class id
// per frame. Uses a log-sum-exp form so large logits stay stable.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& labels) {
    const Tensor& lv = t.val(logits);
    ensure_rank2(lv, "cross_entropy");
    const std::size_t T = lv.shape[0], P = lv.shape[1];
    if (labels.size() != T) throw std::runtime_error("cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= P)
            throw std::runtime_error("cross_entropy: label out of range");
    double loss = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
        const double* row = &lv.data[i * P];
        double mx = row[0];
        for (std::size_t j = 1; j < P; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < P; ++j) s += std::exp(row[j] - mx);
        loss += mx + std::log(s) - row[labels[i]];
    }
    Tensor out({1}, {loss / static_cast<double>(T)});
    Var o = t.next_id();
    return t.push(std::move(out), [logits, o, labels](Tape& tp) {
        const double up = tp.grad(o).data[0];
        const Tensor& lv2 = tp.val(logits);
        Tensor sm = softmax_rows(lv2);
        Tensor& dl = tp.grad(logits);
        const std::size_t T2 = lv2.shape[0], P2 = lv2.shape[1];
        const double inv = up / static_cast<double>(T2);
        for (std::size_t i = 0; i < T2; ++i) {
            for (std::size_t j = 0; j < P2; ++j)
                dl.data[i * P2 + j] += inv * sm.data[i * P2 + j];
            dl.data[i * P2 + labels[i]] -= inv;
        }
    }, "cross_entropy");
}

inline Var dwconv_time(Tape& t, Var z, Var kernels) {
    Tensor out = dwconv_time(t.val(z), t.val(kernels));
    Var o = t.next_id();
    return t.push(std::move(out), [z, kernels, o](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        const Tensor& zv = tp.val(z);
        const Tensor& kv = tp.val(kernels);
        Tensor& dz = tp.grad(z);
        Tensor& dk = tp.grad(kernels);
        const std::size_t ch = zv.shape[0], T = zv.shape[1], D = kv.shape[1];
        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(D / 2);
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t tt = 0; tt < T; ++tt) {
                const double d = dc.data[c * T + tt];
                for (std::size_t j = 0; j < D; ++j) {
                    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(tt + j) - h;
                    if (s < 0 || s >= static_cast<std::ptrdiff_t>(T)) continue;
                    dz.data[c * T + s] += kv.data[c * D + j] * d;
                    dk.data[c * D + j] += zv.data[c * T + s] * d;
                }
            }
    }, "dwconv_time");
}

enum class NormMode { train, eval, identity };

// Per-channel normalization over the time axis of a channels x T map. With a
// mini-batch of one sequence the temporal axis is the only population to
// normalize over, so train mode uses batch statistics computed along T and
// updates the running buffers in place; eval mode reads the running buffers;
// identity mode skips the statistics entirely (unit tests).
inline Var batchnorm_time(Tape& t, Var z, Var gamma, Var beta, Tensor& run_mean,
                          Tensor& run_var, NormMode mode, double momentum = 0.9,
                          double eps = 1e-5) {
    const Tensor& zv = t.val(z);
    ensure_rank2(zv, "batchnorm_time");
    const std::size_t ch = zv.shape[0], T = zv.shape[1];
    if (t.val(gamma).size() != ch || t.val(beta).size() != ch)
        throw std::runtime_error("batchnorm_time: parameter length mismatch");
    Tensor mean({ch}), var({ch});
    if (mode == NormMode::train) {
        for (std::size_t c = 0; c < ch; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < T; ++i) m += zv.data[c * T + i];
            m /= static_cast<double>(T);
            double v = 0.0;
            for (std::size_t i = 0; i < T; ++i) {
                const double d = zv.data[c * T + i] - m;
                v += d * d;
            }
            v /= static_cast<double>(T);
            mean.data[c] = m;
            var.data[c] = v;
            run_mean.data[c] = momentum * run_mean.data[c] + (1.0 - momentum) * m;
            run_var.data[c] = momentum * run_var.data[c] + (1.0 - momentum) * v;
        }
    } else if (mode == NormMode::eval) {
        mean = run_mean;
        var = run_var;
    } else {
        for (std::size_t c = 0; c < ch; ++c) var.data[c] = 1.0 - eps;
    }
    Tensor out({ch, T});
    const Tensor& gv = t.val(gamma);
    const Tensor& bv = t.val(beta);
    for (std::size_t c = 0; c < ch; ++c) {
        const double inv = 1.0 / std::sqrt(var.data[c] + eps);
        for (std::size_t i = 0; i < T; ++i)
            out.data[c * T + i] =
                gv.data[c] * (zv.data[c * T + i] - mean.data[c]) * inv + bv.data[c];
    }
    Var o = t.next_id();
    return t.push(std::move(out), [z, gamma, beta, o, mean, var, mode, eps](Tape& tp) {
        const Tensor& dc = tp.grad(o);
        const Tensor& zv2 = tp.val(z);
        const Tensor& gv2 = tp.val(gamma);
        Tensor& dz = tp.grad(z);
        Tensor& dg = tp.grad(gamma);
        Tensor& db = tp.grad(beta);
        const std::size_t ch2 = zv2.shape[0], T2 = zv2.shape[1];
        for (std::size_t c = 0; c < ch2; ++c) {
            const double inv = 1.0 / std::sqrt(var.data[c] + eps);
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t i = 0; i < T2; ++i) {
                const double xh = (zv2.data[c * T2 + i] - mean.data[c]) * inv;
                const double d = dc.data[c * T2 + i];
                sum_d += d;
                sum_dx += d * xh;
                dg.data[c] += d * xh;
                db.data[c] += d;
            }
            const double n = static_cast<double>(T2);
            for (std::size_t i = 0; i < T2; ++i) {
                const double xh = (zv2.data[c * T2 + i] - mean.data[c]) * inv;
                const double d = dc.data[c * T2 + i];
                if (mode == NormMode::train)
                    dz.data[c * T2 + i] +=
                        gv2.data[c] * inv * (d - sum_d / n - xh * sum_dx / n);
                else
                    dz.data[c * T2 + i] += gv2.data[c] * inv * d;
            }
        }
    }, "batchnorm_time");
}

// Central-difference gradient oracle. f builds a scalar from leaves made out
// of params; returns the max over parameter entries of
// |analytic - numeric| / max(1, |numeric|).
inline double finite_diff_check(
    std::vector<Tensor> params,
    const std::function<Var(Tape&, const std::vector<Var>&)>& f, double eps = 1e-5) {
    if (eps <= 0.0) throw std::runtime_error("finite_diff_check: eps must be positive");
    auto eval = [&](const std::vector<Tensor>& ps) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(ps.size());
        for (const Tensor& p : ps) vars.push_back(tape.leaf(p));
        Var out = f(tape, vars);
        if (tape.val(out).size() != 1)
            throw std::runtime_error("finite_diff_check: f must return a scalar");
        const double v = tape.val(out).data[0];
        if (!std::isfinite(v))
            throw std::runtime_error("finite_diff_check: f evaluated non-finite");
        return v;
    };

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (Tensor& p : params) {
        p.requires_grad = true;
        vars.push_back(tape.leaf(p));
    }
    Var out = f(tape, vars);
    if (tape.val(out).size() != 1)
        throw std::runtime_error("finite_diff_check: f must return a scalar");
    tape.backward(out);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Var v : vars) analytic.push_back(tape.grad(v));

    double max_err = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t e = 0; e < params[pi].data.size(); ++e) {
            const double keep = params[pi].data[e];
            params[pi].data[e] = keep + eps;
            const double fp = eval(params);
            params[pi].data[e] = keep - eps;
            const double fm = eval(params);
            params[pi].data[e] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err = std::abs(analytic[pi].data[e] - numeric) /
                               std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace ecofuse
