#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "moecl/errors.hpp"
#include "moecl/tensor.hpp"

namespace moecl {

// Pure forward math, shared by the recording and non-recording contexts so both
// produce bit-identical values.
namespace kernels {

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_string() + " x " + b.shape_string());
    Tensor<S> c(a.rows(), b.cols());
    for (int64_t i = 0; i < a.rows(); ++i) {
        S* crow = c.row_ptr(i);
        for (int64_t k = 0; k < a.cols(); ++k) {
            const S aik = a.at(i, k);
            const S* brow = b.row_ptr(k);
            for (int64_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// a (m x k) times b^T (k x n), with b stored (n x k).
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions differ, " + a.shape_string() + " x " + b.shape_string() + "^T");
    Tensor<S> c(a.rows(), b.rows());
    for (int64_t i = 0; i < a.rows(); ++i) {
        const S* arow = a.row_ptr(i);
        for (int64_t j = 0; j < b.rows(); ++j) {
            const S* brow = b.row_ptr(j);
            S acc = S(0);
            for (int64_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
            c.at(i, j) = acc;
        }
    }
    return c;
}

// a^T (k x m) times b (m x n), with a stored (m x k).
template <typename S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: inner dimensions differ, " + a.shape_string() + "^T x " + b.shape_string());
    Tensor<S> c(a.cols(), b.cols());
    for (int64_t m = 0; m < a.rows(); ++m) {
        const S* arow = a.row_ptr(m);
        const S* brow = b.row_ptr(m);
        for (int64_t i = 0; i < a.cols(); ++i) {
            const S ami = arow[i];
            S* crow = c.row_ptr(i);
            for (int64_t j = 0; j < b.cols(); ++j) crow[j] += ami * brow[j];
        }
    }
    return c;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    Tensor<S> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] += b.data()[i];
    return c;
}

template <typename S>
Tensor<S> add_rows(const Tensor<S>& m, const Tensor<S>& row) {
    if (row.rows() != 1 || row.cols() != m.cols())
        throw ShapeError("add_rows: " + row.shape_string() + " does not broadcast over " + m.shape_string());
    Tensor<S> c = m;
    for (int64_t r = 0; r < c.rows(); ++r) {
        S* crow = c.row_ptr(r);
        for (int64_t j = 0; j < c.cols(); ++j) crow[j] += row.at(0, j);
    }
    return c;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double k) {
    Tensor<S> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] = static_cast<S>(c.data()[i] * static_cast<S>(k));
    return c;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> c = a;
    for (int64_t i = 0; i < c.numel(); ++i)
        if (c.data()[i] < S(0)) c.data()[i] = S(0);
    return c;
}

template <typename S>
Tensor<S> log_ew(const Tensor<S>& a) {
    Tensor<S> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] = std::log(c.data()[i]);
    return c;
}

// Row-wise softmax with max subtraction. Rejects non-finite inputs.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    if (x.cols() == 0) throw ShapeError("softmax_rows: empty rows " + x.shape_string());
    Tensor<S> y(x.rows(), x.cols());
    for (int64_t r = 0; r < x.rows(); ++r) {
        const S* xr = x.row_ptr(r);
        S m = xr[0];
        for (int64_t j = 0; j < x.cols(); ++j) {
            if (!std::isfinite(static_cast<double>(xr[j])))
                throw NumericError("softmax_rows: non-finite input at row " + std::to_string(r));
            if (xr[j] > m) m = xr[j];
        }
        S* yr = y.row_ptr(r);
        S sum = S(0);
        for (int64_t j = 0; j < x.cols(); ++j) {
            yr[j] = std::exp(xr[j] - m);
            sum += yr[j];
        }
        for (int64_t j = 0; j < x.cols(); ++j) yr[j] /= sum;
    }
    return y;
}

// Mean over rows of [logsumexp(row) - row[label]]. Also writes row softmax to
// *probs when given (reused by the backward rule).
template <typename S>
S cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels, Tensor<S>* probs = nullptr) {
    if (static_cast<int64_t>(labels.size()) != logits.rows())
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + logits.shape_string());
    if (logits.rows() == 0 || logits.cols() == 0)
        throw ShapeError("cross_entropy: empty logits " + logits.shape_string());
    if (probs) *probs = Tensor<S>(logits.rows(), logits.cols());
    S total = S(0);
    for (int64_t r = 0; r < logits.rows(); ++r) {
        const int label = labels[static_cast<size_t>(r)];
        if (label < 0 || label >= logits.cols())
            throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                             std::to_string(logits.cols()) + ") at row " + std::to_string(r));
        const S* xr = logits.row_ptr(r);
        S m = xr[0];
        for (int64_t j = 1; j < logits.cols(); ++j)
            if (xr[j] > m) m = xr[j];
        S sum = S(0);
        for (int64_t j = 0; j < logits.cols(); ++j) sum += std::exp(xr[j] - m);
        total += m + std::log(sum) - xr[label];
        if (probs)
            for (int64_t j = 0; j < logits.cols(); ++j) probs->at(r, j) = std::exp(xr[j] - m) / sum;
    }
    return total / static_cast<S>(logits.rows());
}

// Per-row layer norm with population variance, then elementwise gain and bias.
template <typename S>
Tensor<S> layer_norm_rows(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps) {
    if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
        throw ShapeError("layer_norm_rows: gain " + gain.shape_string() + " / bias " + bias.shape_string() +
                         " do not match " + x.shape_string());
    Tensor<S> y(x.rows(), x.cols());
    const S n = static_cast<S>(x.cols());
    for (int64_t r = 0; r < x.rows(); ++r) {
        const S* xr = x.row_ptr(r);
        S mu = S(0);
        for (int64_t j = 0; j < x.cols(); ++j) mu += xr[j];
        mu /= n;
        S var = S(0);
        for (int64_t j = 0; j < x.cols(); ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= n;
        const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
        S* yr = y.row_ptr(r);
        for (int64_t j = 0; j < x.cols(); ++j) yr[j] = (xr[j] - mu) * inv * gain.at(0, j) + bias.at(0, j);
    }
    return y;
}

template <typename S>
Tensor<S> embedding_rows(const Tensor<S>& table, const std::vector<int>& ids) {
    Tensor<S> y(static_cast<int64_t>(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows())
            throw IndexError("embedding_rows: id " + std::to_string(ids[i]) + " outside vocab of " +
                             std::to_string(table.rows()));
        std::memcpy(y.row_ptr(static_cast<int64_t>(i)), table.row_ptr(ids[i]),
                    static_cast<size_t>(table.cols()) * sizeof(S));
    }
    return y;
}

template <typename S>
Tensor<S> mean_rows(const Tensor<S>& m) {
    if (m.rows() == 0) throw ShapeError("mean_rows: no rows in " + m.shape_string());
    Tensor<S> y(1, m.cols());
    for (int64_t r = 0; r < m.rows(); ++r)
        for (int64_t j = 0; j < m.cols(); ++j) y.at(0, j) += m.at(r, j);
    for (int64_t j = 0; j < m.cols(); ++j) y.at(0, j) /= static_cast<S>(m.rows());
    return y;
}

// out[r, :] = m[r, :] * v[r], v a column vector.
template <typename S>
Tensor<S> rows_scale(const Tensor<S>& m, const Tensor<S>& v) {
    if (v.cols() != 1 || v.rows() != m.rows())
        throw ShapeError("rows_scale: scale " + v.shape_string() + " does not match " + m.shape_string());
    Tensor<S> c = m;
    for (int64_t r = 0; r < c.rows(); ++r) {
        S* crow = c.row_ptr(r);
        for (int64_t j = 0; j < c.cols(); ++j) crow[j] *= v.at(r, 0);
    }
    return c;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& m, int64_t c0, int64_t c1) {
    if (c0 < 0 || c1 > m.cols() || c0 >= c1)
        throw ShapeError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c1) + ") of " + m.shape_string());
    Tensor<S> y(m.rows(), c1 - c0);
    for (int64_t r = 0; r < m.rows(); ++r)
        std::memcpy(y.row_ptr(r), m.row_ptr(r) + c0, static_cast<size_t>(c1 - c0) * sizeof(S));
    return y;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<const Tensor<S>*>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    int64_t rows = parts[0]->rows(), cols = 0;
    for (const auto* p : parts) {
        if (p->rows() != rows)
            throw ShapeError("concat_cols: row mismatch " + parts[0]->shape_string() + " vs " + p->shape_string());
        cols += p->cols();
    }
    Tensor<S> y(rows, cols);
    for (int64_t r = 0; r < rows; ++r) {
        int64_t off = 0;
        for (const auto* p : parts) {
            std::memcpy(y.row_ptr(r) + off, p->row_ptr(r), static_cast<size_t>(p->cols()) * sizeof(S));
            off += p->cols();
        }
    }
    return y;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& m) {
    Tensor<S> y(1, 1);
    for (int64_t i = 0; i < m.numel(); ++i) y.at(0, 0) += m.data()[i];
    return y;
}

template <typename S>
Tensor<S> pick(const Tensor<S>& m, int64_t r, int64_t c) {
    if (r < 0 || r >= m.rows() || c < 0 || c >= m.cols())
        throw IndexError("pick: (" + std::to_string(r) + ", " + std::to_string(c) + ") outside " + m.shape_string());
    Tensor<S> y(1, 1);
    y.at(0, 0) = m.at(r, c);
    return y;
}

}  // namespace kernels

// Recording context. Every op appends a node holding the forward value and,
// when any input requires gradients, a backward closure. backward() seeds
// d(loss)/d(loss) = 1 and replays nodes in reverse creation order (a reverse
// topological order by construction), visiting each node exactly once.
// Gradients accumulate additively in creation-order slots, so two identical
// tapes produce bit-identical gradients.
template <typename S>
class Tape {
  public:
    struct Var {
        uint32_t i = UINT32_MAX;
        bool valid() const { return i != UINT32_MAX; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static constexpr bool recording = true;

    Var leaf(const Tensor<S>& t, bool requires_grad = false) { return push(Tensor<S>(t), requires_grad, {}); }
    Var leaf(Tensor<S>&& t, bool requires_grad = false) { return push(std::move(t), requires_grad, {}); }

    const Tensor<S>& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    size_t size() const { return nodes_.size(); }

    // Gradient of the last backward() target w.r.t. v; zeros if none reached it.
    Tensor<S> grad(Var v) const {
        const NodeRec& n = node(v);
        if (n.grad.numel() == 0) return Tensor<S>::zeros(n.value.rows(), n.value.cols());
        return n.grad;
    }
    const Tensor<S>* grad_ptr(Var v) const {
        const NodeRec& n = node(v);
        return n.grad.numel() == 0 ? nullptr : &n.grad;
    }

    void backward(Var loss) {
        NodeRec& ln = node(loss);
        if (ln.value.rows() != 1 || ln.value.cols() != 1)
            throw ContractError("backward: loss must be scalar, got " + ln.value.shape_string());
        ensure_grad(loss.i);
        ln.grad.at(0, 0) = S(1);
        for (uint32_t i = loss.i + 1; i-- > 0;) {
            NodeRec& n = nodes_[i];
            if (n.back && n.grad.numel() != 0) n.back();
        }
    }

    Var matmul(Var a, Var b) {
        Var out = push(kernels::matmul(value(a), value(b)), needs(a) || needs(b), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, b, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                if (needs(a)) accum(a, kernels::matmul_nt(g, value(b)));
                if (needs(b)) accum(b, kernels::matmul_tn(value(a), g));
            };
        return out;
    }

    // a times b^T; the weight convention for every linear layer in the model.
    Var matmul_nt(Var a, Var b) {
        Var out = push(kernels::matmul_nt(value(a), value(b)), needs(a) || needs(b), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, b, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                if (needs(a)) accum(a, kernels::matmul(g, value(b)));
                if (needs(b)) accum(b, kernels::matmul_tn(g, value(a)));
            };
        return out;
    }

    Var add(Var a, Var b) {
        Var out = push(kernels::add(value(a), value(b)), needs(a) || needs(b), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, b, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                if (needs(a)) accum(a, g);
                if (needs(b)) accum(b, g);
            };
        return out;
    }

    Var add_rows(Var m, Var row) {
        Var out = push(kernels::add_rows(value(m), value(row)), needs(m) || needs(row), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, row, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                if (needs(m)) accum(m, g);
                if (needs(row)) {
                    Tensor<S> d(1, g.cols());
                    for (int64_t r = 0; r < g.rows(); ++r)
                        for (int64_t j = 0; j < g.cols(); ++j) d.at(0, j) += g.at(r, j);
                    accum(row, std::move(d));
                }
            };
        return out;
    }

    Var scale(Var a, double k) {
        Var out = push(kernels::scale(value(a), k), needs(a), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, k, out] { accum(a, kernels::scale(nodes_[out.i].grad, k)); };
        return out;
    }

    // Subgradient 0 at the kink: inputs exactly 0 pass no gradient.
    Var relu(Var a) {
        Var out = push(kernels::relu(value(a)), needs(a), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const Tensor<S>& x = value(a);
                Tensor<S> d(g.rows(), g.cols());
                for (int64_t i = 0; i < g.numel(); ++i) d.data()[i] = x.data()[i] > S(0) ? g.data()[i] : S(0);
                accum(a, std::move(d));
            };
        return out;
    }

    Var log_ew(Var a) {
        Var out = push(kernels::log_ew(value(a)), needs(a), {});
        if (node(out).requires_grad)
            node(out).back = [this, a, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const Tensor<S>& x = value(a);
                Tensor<S> d(g.rows(), g.cols());
                for (int64_t i = 0; i < g.numel(); ++i) d.data()[i] = g.data()[i] / x.data()[i];
                accum(a, std::move(d));
            };
        return out;
    }

    Var softmax_rows(Var x) {
        Var out = push(kernels::softmax_rows(value(x)), needs(x), {});
        if (node(out).requires_grad)
            node(out).back = [this, x, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const Tensor<S>& y = nodes_[out.i].value;
                Tensor<S> d(g.rows(), g.cols());
                for (int64_t r = 0; r < g.rows(); ++r) {
                    S dot = S(0);
                    for (int64_t j = 0; j < g.cols(); ++j) dot += g.at(r, j) * y.at(r, j);
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(r, j) = y.at(r, j) * (g.at(r, j) - dot);
                }
                accum(x, std::move(d));
            };
        return out;
    }

    // Scalar mean cross-entropy from logits; fused, numerically stable.
    Var cross_entropy(Var logits, std::vector<int> labels) {
        Tensor<S> probs;
        Tensor<S> loss(1, 1);
        loss.at(0, 0) = kernels::cross_entropy(value(logits), labels, &probs);
        Var out = push(std::move(loss), needs(logits), {});
        if (node(out).requires_grad)
            node(out).back = [this, logits, labels = std::move(labels), probs = std::move(probs), out] {
                const S g = nodes_[out.i].grad.at(0, 0);
                const S inv_b = S(1) / static_cast<S>(probs.rows());
                Tensor<S> d = probs;
                for (int64_t r = 0; r < d.rows(); ++r) {
                    d.at(r, labels[static_cast<size_t>(r)]) -= S(1);
                    for (int64_t j = 0; j < d.cols(); ++j) d.at(r, j) *= g * inv_b;
                }
                accum(logits, std::move(d));
            };
        return out;
    }

    // Forward identity (bit-exact copy); backward multiplies the upstream
    // gradient by -lambda. lambda = 0 blocks the path entirely.
    Var grad_reverse(Var x, double lambda) {
        Var out = push(Tensor<S>(value(x)), needs(x), {});
        if (node(out).requires_grad)
            node(out).back = [this, x, lambda, out] { accum(x, kernels::scale(nodes_[out.i].grad, -lambda)); };
        return out;
    }

    Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
        Var out = push(kernels::layer_norm_rows(value(x), value(gain), value(bias), eps),
                       needs(x) || needs(gain) || needs(bias), {});
        if (node(out).requires_grad)
            node(out).back = [this, x, gain, bias, eps, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const Tensor<S>& xv = value(x);
                const Tensor<S>& gv = value(gain);
                const int64_t n = xv.cols();
                Tensor<S> dx(xv.rows(), n), dgain(1, n), dbias(1, n);
                for (int64_t r = 0; r < xv.rows(); ++r) {
                    const S* xr = xv.row_ptr(r);
                    S mu = S(0);
                    for (int64_t j = 0; j < n; ++j) mu += xr[j];
                    mu /= static_cast<S>(n);
                    S var = S(0);
                    for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= static_cast<S>(n);
                    const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
                    S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                    for (int64_t j = 0; j < n; ++j) {
                        const S xhat = (xr[j] - mu) * inv;
                        const S dxhat = g.at(r, j) * gv.at(0, j);
                        dgain.at(0, j) += g.at(r, j) * xhat;
                        dbias.at(0, j) += g.at(r, j);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= static_cast<S>(n);
                    mean_dxhat_xhat /= static_cast<S>(n);
                    for (int64_t j = 0; j < n; ++j) {
                        const S xhat = (xr[j] - mu) * inv;
                        const S dxhat = g.at(r, j) * gv.at(0, j);
                        dx.at(r, j) = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                if (needs(x)) accum(x, std::move(dx));
                if (needs(gain)) accum(gain, std::move(dgain));
                if (needs(bias)) accum(bias, std::move(dbias));
            };
        return out;
    }

    Var embedding_rows(Var table, std::vector<int> ids) {
        Var out = push(kernels::embedding_rows(value(table), ids), needs(table), {});
        if (node(out).requires_grad)
            node(out).back = [this, table, ids = std::move(ids), out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                Tensor<S> d(value(table).rows(), value(table).cols());
                for (size_t i = 0; i < ids.size(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(ids[i], j) += g.at(static_cast<int64_t>(i), j);
                accum(table, std::move(d));
            };
        return out;
    }

    Var mean_rows(Var m) {
        Var out = push(kernels::mean_rows(value(m)), needs(m), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const int64_t rows = value(m).rows();
                Tensor<S> d(rows, g.cols());
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(r, j) = g.at(0, j) / static_cast<S>(rows);
                accum(m, std::move(d));
            };
        return out;
    }

    Var rows_scale(Var m, Var v) {
        Var out = push(kernels::rows_scale(value(m), value(v)), needs(m) || needs(v), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, v, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                const Tensor<S>& mv = value(m);
                const Tensor<S>& vv = value(v);
                if (needs(m)) {
                    Tensor<S> dm(mv.rows(), mv.cols());
                    for (int64_t r = 0; r < mv.rows(); ++r)
                        for (int64_t j = 0; j < mv.cols(); ++j) dm.at(r, j) = g.at(r, j) * vv.at(r, 0);
                    accum(m, std::move(dm));
                }
                if (needs(v)) {
                    Tensor<S> dv(vv.rows(), 1);
                    for (int64_t r = 0; r < mv.rows(); ++r) {
                        S acc = S(0);
                        for (int64_t j = 0; j < mv.cols(); ++j) acc += g.at(r, j) * mv.at(r, j);
                        dv.at(r, 0) = acc;
                    }
                    accum(v, std::move(dv));
                }
            };
        return out;
    }

    Var slice_cols(Var m, int64_t c0, int64_t c1) {
        Var out = push(kernels::slice_cols(value(m), c0, c1), needs(m), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, c0, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                Tensor<S> d(value(m).rows(), value(m).cols());
                for (int64_t r = 0; r < g.rows(); ++r)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(r, c0 + j) = g.at(r, j);
                accum(m, std::move(d));
            };
        return out;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        std::vector<const Tensor<S>*> vs;
        bool rg = false;
        for (Var p : parts) {
            vs.push_back(&value(p));
            rg = rg || needs(p);
        }
        Var out = push(kernels::concat_cols(vs), rg, {});
        if (node(out).requires_grad)
            node(out).back = [this, parts, out] {
                const Tensor<S>& g = nodes_[out.i].grad;
                int64_t off = 0;
                for (Var p : parts) {
                    const int64_t w = value(p).cols();
                    if (needs(p)) accum(p, kernels::slice_cols(g, off, off + w));
                    off += w;
                }
            };
        return out;
    }

    Var sum_all(Var m) {
        Var out = push(kernels::sum_all(value(m)), needs(m), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, out] {
                const S g = nodes_[out.i].grad.at(0, 0);
                accum(m, Tensor<S>::full(value(m).rows(), value(m).cols(), g));
            };
        return out;
    }

    Var pick(Var m, int64_t r, int64_t c) {
        Var out = push(kernels::pick(value(m), r, c), needs(m), {});
        if (node(out).requires_grad)
            node(out).back = [this, m, r, c, out] {
                Tensor<S> d(value(m).rows(), value(m).cols());
                d.at(r, c) = nodes_[out.i].grad.at(0, 0);
                accum(m, std::move(d));
            };
        return out;
    }

  private:
    struct NodeRec {
        Tensor<S> value;
        Tensor<S> grad;
        bool requires_grad = false;
        std::function<void()> back;
    };

    std::vector<NodeRec> nodes_;

    NodeRec& node(Var v) {
        if (!v.valid() || v.i >= nodes_.size()) throw ContractError("tape: invalid variable handle");
        return nodes_[v.i];
    }
    const NodeRec& node(Var v) const {
        if (!v.valid() || v.i >= nodes_.size()) throw ContractError("tape: invalid variable handle");
        return nodes_[v.i];
    }

    bool needs(Var v) const { return node(v).requires_grad; }

    Var push(Tensor<S>&& value, bool requires_grad, std::function<void()> back) {
        nodes_.push_back(NodeRec{std::move(value), Tensor<S>(), requires_grad, std::move(back)});
        return Var{static_cast<uint32_t>(nodes_.size() - 1)};
    }

    void ensure_grad(uint32_t i) {
        NodeRec& n = nodes_[i];
        if (n.grad.numel() == 0) n.grad = Tensor<S>::zeros(n.value.rows(), n.value.cols());
    }

    // Frozen leaves (requires_grad false) silently absorb nothing: no gradient
    // is ever allocated or emitted for them.
    void accum(Var v, const Tensor<S>& delta) {
        NodeRec& n = node(v);
        if (!n.requires_grad) return;
        ensure_grad(v.i);
        for (int64_t i = 0; i < delta.numel(); ++i) n.grad.data()[i] += delta.data()[i];
    }
    void accum(Var v, Tensor<S>&& delta) {
        NodeRec& n = node(v);
        if (!n.requires_grad) return;
        if (n.grad.numel() == 0) {
            n.grad = std::move(delta);
            return;
        }
        for (int64_t i = 0; i < delta.numel(); ++i) n.grad.data()[i] += delta.data()[i];
    }
};

// Non-recording context: same op surface, plain kernel evaluation, no nodes, no
// gradient state. Forward code templated on the context runs identically here
// (grad_reverse degenerates to identity, which is exactly its forward value).
template <typename S>
class EvalCtx {
  public:
    using Var = std::shared_ptr<const Tensor<S>>;

    static constexpr bool recording = false;

    // Borrows the caller's tensor; the caller keeps it alive for the duration
    // of the forward pass (model parameters satisfy this trivially).
    Var leaf(const Tensor<S>& t, bool = false) { return Var(&t, [](const Tensor<S>*) {}); }
    Var leaf(Tensor<S>&& t, bool = false) { return std::make_shared<Tensor<S>>(std::move(t)); }

    // The reference lives exactly as long as v does: copy the tensor (or keep the
    // Var in a named variable) before v goes out of scope.
    const Tensor<S>& value(const Var& v) const { return *v; }

    Var matmul(Var a, Var b) { return own(kernels::matmul(*a, *b)); }
    Var matmul_nt(Var a, Var b) { return own(kernels::matmul_nt(*a, *b)); }
    Var add(Var a, Var b) { return own(kernels::add(*a, *b)); }
    Var add_rows(Var m, Var row) { return own(kernels::add_rows(*m, *row)); }
    Var scale(Var a, double k) { return own(kernels::scale(*a, k)); }
    Var relu(Var a) { return own(kernels::relu(*a)); }
    Var log_ew(Var a) { return own(kernels::log_ew(*a)); }
    Var softmax_rows(Var x) { return own(kernels::softmax_rows(*x)); }
    Var cross_entropy(Var logits, std::vector<int> labels) {
        Tensor<S> loss(1, 1);
        loss.at(0, 0) = kernels::cross_entropy(*logits, labels);
        return own(std::move(loss));
    }
    Var grad_reverse(Var x, double) { return x; }
    Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
        return own(kernels::layer_norm_rows(*x, *gain, *bias, eps));
    }
    Var embedding_rows(Var table, std::vector<int> ids) { return own(kernels::embedding_rows(*table, ids)); }
    Var mean_rows(Var m) { return own(kernels::mean_rows(*m)); }
    Var rows_scale(Var m, Var v) { return own(kernels::rows_scale(*m, *v)); }
    Var slice_cols(Var m, int64_t c0, int64_t c1) { return own(kernels::slice_cols(*m, c0, c1)); }
    Var concat_cols(const std::vector<Var>& parts) {
        std::vector<const Tensor<S>*> vs;
        for (const Var& p : parts) vs.push_back(p.get());
        return own(kernels::concat_cols(vs));
    }
    Var sum_all(Var m) { return own(kernels::sum_all(*m)); }
    Var pick(Var m, int64_t r, int64_t c) { return own(kernels::pick(*m, r, c)); }

  private:
    Var own(Tensor<S>&& t) { return std::make_shared<Tensor<S>>(std::move(t)); }
};

}  // namespace moecl
