#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pdit/errors.hpp"
#include "pdit/rng.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

// Boolean companion tensor for masking. A nonzero entry marks a masked
// position.
struct BoolTensor {
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> value;

    static BoolTensor zeros(std::vector<std::size_t> s) {
        BoolTensor m;
        m.value.assign(detail::numel(s), 0);
        m.shape = std::move(s);
        return m;
    }
    static BoolTensor from_data(std::vector<std::size_t> s, std::vector<std::uint8_t> v) {
        if (detail::numel(s) != v.size()) {
            throw ShapeError("mask data length does not match shape " + shape_string(s));
        }
        BoolTensor m;
        m.shape = std::move(s);
        m.value = std::move(v);
        return m;
    }
    std::size_t size() const { return value.size(); }
};

namespace detail {

// Broadcasting is restricted to leading-1 axes: `from` may prepend axes of
// extent 1 to a suffix that matches `to` exactly. Row-major layout then makes
// the broadcast a simple modulo over the flat index.
inline bool broadcasts_into(const std::vector<std::size_t>& from,
                            const std::vector<std::size_t>& to) {
    if (from.size() != to.size()) return false;
    std::size_t i = 0;
    while (i < from.size() && from[i] == 1 && to[i] != 1) ++i;
    for (; i < from.size(); ++i) {
        if (from[i] != to[i]) return false;
    }
    return true;
}

template <typename T>
bool recording(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (leading-1 broadcasting on either operand)
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_broadcast_op(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b,
                              const char* name, Fwd fwd, Bwd bwd) {
    const bool same = a.shape() == b.shape();
    const bool b_into_a = same || detail::broadcasts_into(b.shape(), a.shape());
    const bool a_into_b = same || detail::broadcasts_into(a.shape(), b.shape());
    if (!b_into_a && !a_into_b) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
    const Tensor<T>& big = b_into_a ? a : b;
    const std::size_t n = big.size();

    Tensor<T> out = Tensor<T>::zeros(big.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.value().data();
    const std::size_t an = a.size();
    const std::size_t bn = b.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i % an], pb[i % bn]);

    if (detail::recording(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, n, bwd](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            const std::size_t an2 = a.size();
            const std::size_t bn2 = b.size();
            std::vector<T>* ga = a.requires_grad() ? &adj.at_or_zero(a.node(), an2) : nullptr;
            std::vector<T>* gb = b.requires_grad() ? &adj.at_or_zero(b.node(), bn2) : nullptr;
            const T* pa2 = a.value().data();
            const T* pb2 = b.value().data();
            for (std::size_t i = 0; i < n; ++i) {
                T da, db;
                bwd(pa2[i % an2], pb2[i % bn2], (*go)[i], da, db);
                if (ga) (*ga)[i % an2] += da;
                if (gb) (*gb)[i % bn2] += db;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast_op(
        tape, a, b, "add", [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) {
            da = g;
            db = g;
        });
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast_op(
        tape, a, b, "mul", [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) {
            da = g * y;
            db = g * x;
        });
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(Tape<T>* tape, const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.size();
    const T* px = x.value().data();
    T* po = out.value().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (detail::recording(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, n, bwd](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gx = adj.at_or_zero(x.node(), n);
            const T* px2 = x.value().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += bwd(px2[i]) * (*go)[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
    return unary_op(
        tape, x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v) { return v > T(0) ? T(1) : T(0); });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    return unary_op(
        tape, x,
        [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [=](T v) {
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        });
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
    return unary_op(
        tape, x, [c](T v) { return c * v; }, [c](T) { return c; });
}

// ---------------------------------------------------------------------------
// Matrix operations (rank 2)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out = Tensor<T>::zeros({m, n});
    {
        const T* pa = a.value().data();
        const T* pb = b.value().data();
        T* po = out.value().data();
        for (std::size_t i = 0; i < m; ++i) {
            T* orow = po + i * n;
            const T* arow = pa + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T aik = arow[kk];
                const T* brow = pb + kk * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }
    if (detail::recording(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            const T* pg = go->data();
            if (a.requires_grad()) {
                // dA = dC * B^T
                auto& ga = adj.at_or_zero(a.node(), m * k);
                const T* pb = b.value().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = pg + i * n;
                    T* garow = ga.data() + i * k;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T* brow = pb + kk * n;
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[kk] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                // dB = A^T * dC
                auto& gb = adj.at_or_zero(b.node(), k * n);
                const T* pa = a.value().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* arow = pa + i * k;
                    const T* grow = pg + i * n;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T aik = arow[kk];
                        T* gbrow = gb.data() + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: expected rank-2 tensor, got " + shape_string(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    }
    if (detail::recording(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out, m, n](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& ga = adj.at_or_zero(a.node(), m * n);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (*go)[j * m + i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& a, std::vector<std::size_t> shape) {
    if (detail::numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
    }
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), a.value());
    if (detail::recording(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& ga = adj.at_or_zero(a.node(), a.size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(Tape<T>* tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw IndexError("concat: axis " + std::to_string(axis) + " out of range");
    std::vector<std::size_t> shape = parts[0].shape();
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) {
            throw ShapeError("concat: rank mismatch " + shape_string(parts[0].shape()) + " vs " +
                             shape_string(p.shape()));
        }
        for (std::size_t i = 0; i < rank; ++i) {
            if (i != axis && p.shape()[i] != shape[i]) {
                throw ShapeError("concat: non-concat axes disagree " + shape_string(shape) +
                                 " vs " + shape_string(p.shape()));
            }
        }
        total_axis += p.shape()[axis];
    }
    shape[axis] = total_axis;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < rank; ++i) inner *= shape[i];

    Tensor<T> out = Tensor<T>::zeros(shape);
    {
        T* po = out.value().data();
        const std::size_t out_block = total_axis * inner;
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const std::size_t block = p.shape()[axis] * inner;
            const T* pp = p.value().data();
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy(pp + o * block, pp + (o + 1) * block, po + o * out_block + offset);
            }
            offset += block;
        }
    }
    bool rec = false;
    if (tape) {
        for (const auto& p : parts) rec = rec || p.requires_grad();
    }
    if (rec) {
        out.set_requires_grad(true);
        tape->record([parts, out, outer, inner, total_axis](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            const std::size_t out_block = total_axis * inner;
            std::size_t offset = 0;
            for (const auto& p : parts) {
                const std::size_t block = p.size() / outer;
                if (p.requires_grad()) {
                    auto& gp = adj.at_or_zero(p.node(), p.size());
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = go->data() + o * out_block + offset;
                        T* dst = gp.data() + o * block;
                        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                offset += block;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(Tape<T>* tape, const Tensor<T>& a, std::size_t start, std::size_t stop,
                std::size_t axis) {
    if (axis >= a.rank()) throw IndexError("slice: axis " + std::to_string(axis) + " out of range");
    if (start >= stop || stop > a.shape()[axis]) {
        throw IndexError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") out of bounds for axis extent " + std::to_string(a.shape()[axis]));
    }
    std::vector<std::size_t> shape = a.shape();
    shape[axis] = stop - start;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const std::size_t in_block = a.shape()[axis] * inner;
    const std::size_t out_block = (stop - start) * inner;

    Tensor<T> out = Tensor<T>::zeros(shape);
    {
        const T* pa = a.value().data();
        T* po = out.value().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy(pa + o * in_block + start * inner, pa + o * in_block + stop * inner,
                      po + o * out_block);
        }
    }
    if (detail::recording(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out, outer, inner, in_block, out_block, start](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& ga = adj.at_or_zero(a.node(), a.size());
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = go->data() + o * out_block;
                T* dst = ga.data() + o * in_block + start * inner;
                for (std::size_t i = 0; i < out_block; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and attention support
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw IndexError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    const std::size_t len = x.shape()[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.value().data();
    T* po = out.value().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = px[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
            T sum = T(0);
            for (std::size_t l = 0; l < len; ++l) {
                const T e = std::exp(px[base + l * inner] - mx);
                po[base + l * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t l = 0; l < len; ++l) po[base + l * inner] *= inv;
        }
    }
    if (detail::recording(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, outer, inner, len](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gx = adj.at_or_zero(x.node(), x.size());
            const T* p = out.value().data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::size_t l = 0; l < len; ++l) {
                        dot += p[base + l * inner] * (*go)[base + l * inner];
                    }
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = base + l * inner;
                        gx[idx] += p[idx] * ((*go)[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Row-wise layer normalization over the last axis, with affine gain and bias
// of shape [D]. Population variance; epsilon added before the square root.
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias) {
    const std::size_t d = x.shape().back();
    if (gain.size() != d || bias.size() != d) {
        throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match last axis of " +
                         shape_string(x.shape()));
    }
    const std::size_t rows = x.size() / d;
    const T eps = T(1e-5);

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> rstd(rows), mean(rows);
    const T* px = x.value().data();
    const T* pg = gain.value().data();
    const T* pb = bias.value().data();
    T* po = out.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mu = T(0);
        for (std::size_t i = 0; i < d; ++i) mu += row[i];
        mu /= T(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            const T c = row[i] - mu;
            var += c * c;
        }
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        T* orow = po + r * d;
        for (std::size_t i = 0; i < d; ++i) orow[i] = (row[i] - mu) * rs * pg[i] + pb[i];
    }
    if (detail::recording(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape->record([x, gain, bias, out, rows, d, mean, rstd](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            std::vector<T>* gx = x.requires_grad() ? &adj.at_or_zero(x.node(), x.size()) : nullptr;
            std::vector<T>* gg =
                gain.requires_grad() ? &adj.at_or_zero(gain.node(), d) : nullptr;
            std::vector<T>* gb =
                bias.requires_grad() ? &adj.at_or_zero(bias.node(), d) : nullptr;
            const T* px2 = x.value().data();
            const T* pg2 = gain.value().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = px2 + r * d;
                const T* grow = go->data() + r * d;
                const T mu = mean[r], rs = rstd[r];
                T dnorm_mean = T(0), dnorm_xhat_mean = T(0);
                for (std::size_t i = 0; i < d; ++i) {
                    const T xhat = (row[i] - mu) * rs;
                    const T dnorm = grow[i] * pg2[i];
                    dnorm_mean += dnorm;
                    dnorm_xhat_mean += dnorm * xhat;
                    if (gg) (*gg)[i] += grow[i] * xhat;
                    if (gb) (*gb)[i] += grow[i];
                }
                if (!gx) continue;
                dnorm_mean /= T(d);
                dnorm_xhat_mean /= T(d);
                T* gxrow = gx->data() + r * d;
                for (std::size_t i = 0; i < d; ++i) {
                    const T xhat = (row[i] - mu) * rs;
                    const T dnorm = grow[i] * pg2[i];
                    gxrow[i] += (dnorm - dnorm_mean - xhat * dnorm_xhat_mean) * rs;
                }
            }
        });
    }
    return out;
}

// Sets masked positions (mask != 0) to `value`; gradient through them is zero.
// The mask may broadcast into the scores over leading-1 axes.
template <typename T>
Tensor<T> masked_fill(Tape<T>* tape, const Tensor<T>& scores, const BoolTensor& mask, T value) {
    if (!(mask.shape == scores.shape()) &&
        !detail::broadcasts_into(mask.shape, scores.shape())) {
        throw ShapeError("masked_fill: mask " + shape_string(mask.shape) +
                         " does not broadcast into scores " + shape_string(scores.shape()));
    }
    const std::size_t n = scores.size();
    const std::size_t mn = mask.size();
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    const T* ps = scores.value().data();
    T* po = out.value().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = mask.value[i % mn] ? value : ps[i];
    if (detail::recording(tape, {&scores})) {
        out.set_requires_grad(true);
        tape->record([scores, out, mask, n, mn](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gs = adj.at_or_zero(scores.node(), n);
            for (std::size_t i = 0; i < n; ++i) {
                if (!mask.value[i % mn]) gs[i] += (*go)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gather / reduce
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table,
                           const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: table must be rank 2, got " +
                         shape_string(table.shape()));
    }
    const std::size_t v = table.rows(), d = table.cols();
    if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
    for (std::size_t id : ids) {
        if (id >= v) {
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for table with " + std::to_string(v) + " rows");
        }
    }
    Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy(table.value().begin() + ids[i] * d, table.value().begin() + (ids[i] + 1) * d,
                  out.value().begin() + i * d);
    }
    if (detail::recording(tape, {&table})) {
        out.set_requires_grad(true);
        tape->record([table, out, ids, d](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gt = adj.at_or_zero(table.node(), table.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += (*go)[i * d + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.value()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::recording(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gx = adj.at_or_zero(x.node(), x.size());
            for (auto& g : gx) g += (*go)[0];
        });
    }
    return out;
}

// Inverted dropout. p == 0 is the identity; the keep mask is drawn once at
// forward time and reused by the adjoint.
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const std::size_t n = x.size();
    auto keep = std::make_shared<std::vector<std::uint8_t>>(n);
    const T scale_v = T(1.0 / (1.0 - p));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        (*keep)[i] = rng.bernoulli(p) ? 0 : 1;
        out.at(i) = (*keep)[i] ? x.at(i) * scale_v : T(0);
    }
    if (detail::recording(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, keep, scale_v, n](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            auto& gx = adj.at_or_zero(x.node(), n);
            for (std::size_t i = 0; i < n; ++i) {
                if ((*keep)[i]) gx[i] += scale_v * (*go)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses (fused for numerical stability)
// ---------------------------------------------------------------------------

// Mean cross-entropy from logits over unmasked rows.
template <typename T>
Tensor<T> cross_entropy_masked(Tape<T>* tape, const Tensor<T>& logits,
                               const std::vector<std::size_t>& targets,
                               const std::vector<std::uint8_t>& mask) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be rank 2, got " +
                         shape_string(logits.shape()));
    }
    const std::size_t b = logits.rows(), n = logits.cols();
    if (targets.size() != b || mask.size() != b) {
        throw ShapeError("cross_entropy: batch size " + std::to_string(b) +
                         " does not match targets/mask lengths");
    }
    std::size_t m = 0;
    for (auto f : mask) m += f ? 1 : 0;
    if (m == 0) throw ContractError("cross_entropy: every row is masked");
    for (std::size_t i = 0; i < b; ++i) {
        if (mask[i] && targets[i] >= n) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                             " out of range for " + std::to_string(n) + " classes");
        }
    }

    auto probs = std::make_shared<std::vector<T>>(b * n, T(0));
    T loss = T(0);
    const T* pl = logits.value().data();
    for (std::size_t i = 0; i < b; ++i) {
        if (!mask[i]) continue;
        const T* row = pl + i * n;
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T e = std::exp(row[j] - mx);
            (*probs)[i * n + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) (*probs)[i * n + j] *= inv;
        loss += std::log(sum) + mx - row[targets[i]];
    }
    loss /= T(m);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (detail::recording(tape, {&logits})) {
        out.set_requires_grad(true);
        tape->record([logits, out, probs, targets, mask, b, n, m](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            const T g = (*go)[0] / T(m);
            auto& gl = adj.at_or_zero(logits.node(), b * n);
            for (std::size_t i = 0; i < b; ++i) {
                if (!mask[i]) continue;
                for (std::size_t j = 0; j < n; ++j) {
                    const T onehot = (j == targets[i]) ? T(1) : T(0);
                    gl[i * n + j] += g * ((*probs)[i * n + j] - onehot);
                }
            }
        });
    }
    return out;
}

// Mean squared error per element over unmasked rows. `target` carries data
// only; no gradient flows into it.
template <typename T>
Tensor<T> mse_masked(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target,
                     const std::vector<std::uint8_t>& mask) {
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw ShapeError("mse: prediction " + shape_string(pred.shape()) +
                         " vs target " + shape_string(target.shape()));
    }
    const std::size_t b = pred.rows(), d = pred.cols();
    if (mask.size() != b) throw ShapeError("mse: mask length does not match batch size");
    std::size_t m = 0;
    for (auto f : mask) m += f ? 1 : 0;
    if (m == 0) throw ContractError("mse: every row is masked");

    T loss = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < d; ++j) {
            const T diff = pred.at(i, j) - target.at(i, j);
            loss += diff * diff;
        }
    }
    loss /= T(m) * T(d);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (detail::recording(tape, {&pred})) {
        out.set_requires_grad(true);
        tape->record([pred, target, out, mask, b, d, m](Adjoints<T>& adj) {
            auto* go = adj.find(out.node());
            if (!go) return;
            const T g = (*go)[0] * T(2) / (T(m) * T(d));
            auto& gp = adj.at_or_zero(pred.node(), b * d);
            for (std::size_t i = 0; i < b; ++i) {
                if (!mask[i]) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    gp[i * d + j] += g * (pred.at(i, j) - target.at(i, j));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add(tape, matmul(tape, x, w), b);
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return add(tape, a, scale(tape, b, T(-1)));
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& t, std::size_t row) {
    const std::size_t n = t.cols();
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
        if (t.at(row, j) > t.at(row, best)) best = j;
    }
    return best;
}

}  // namespace pdit
