#pragma once

// Reverse-mode differentiation over a fixed op vocabulary. Each op records
// its parents and a pull-based backward closure; backward() runs the
// closures in reverse topological order. One graph per forward pass;
// parallelism happens across graphs, never inside one.

#include "smamba/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace smamba {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;       // same shape as value once allocated
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buf() {
        if (!has_grad) {
            grad = Tensor(value.shape);
            has_grad = true;
        }
        return grad;
    }
    void zero_grad() {
        if (has_grad) grad.fill(0.0);
    }
};

// Recording can be switched off (inference, metric evaluation); ops then
// produce plain values with no graph attached.
inline bool& grad_recording() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_recording()) { grad_recording() = false; }
    ~NoGradGuard() { grad_recording() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var make_var(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Tensor value) { return make_var(std::move(value), false); }

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto out = std::make_shared<Node>();
    out->value = std::move(value);
    if (grad_recording()) {
        bool any = false;
        for (const auto& p : parents)
            if (p->requires_grad) { any = true; break; }
        if (any) {
            out->requires_grad = true;
            out->parents = std::move(parents);
            out->backward_fn = std::move(bw);
        }
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// backward

inline void backward(const Var& loss) {
    if (!loss) throw std::invalid_argument("backward: null var");
    if (loss->value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss->value.shape));
    if (!loss->requires_grad) return; // nothing reachable

    // Iterative post-order DFS over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->grad_buf().data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            const auto& bv = b->value.data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf().data;
            const auto& av = a->value.data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "div");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        const auto& av = a->value.data;
        const auto& bv = b->value.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return detail::make_op(std::move(out), {a}, [a, s](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

inline Var add_const(const Var& a, double c) {
    Tensor out = a->value;
    for (auto& v : out.data) v += c;
    return detail::make_op(std::move(out), {a}, [a](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// [R,C] + [C] row-broadcast; the bias add of every linear layer.
inline Var add_rowvec(const Var& a, const Var& v) {
    if (a->value.rank() < 1 || v->value.rank() != 1 ||
        a->value.shape.back() != v->value.shape[0])
        throw std::invalid_argument("add_rowvec: shapes " + shape_str(a->value.shape) + " vs " +
                                    shape_str(v->value.shape));
    const std::int64_t cols = v->value.shape[0];
    const std::int64_t rows = a->value.numel() / cols;
    Tensor out = a->value;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) out.data[static_cast<std::size_t>(r * cols + c)] += v->value.data[static_cast<std::size_t>(c)];
    return detail::make_op(std::move(out), {a, v}, [a, v, rows, cols](Node& self) {
        const auto& g = self.grad.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (v->requires_grad) {
            auto& gv = v->grad_buf().data;
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < cols; ++c)
                    gv[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * cols + c)];
        }
    });
}

inline Var abs_op(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::abs(v);
    return detail::make_op(std::move(out), {a}, [a](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        const auto& av = a->value.data;
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
    });
}

// Elementwise max; ties route the gradient to the first argument.
inline Var max_elem(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "max_elem");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::max(out.data[i], b->value.data[i]);
    return detail::make_op(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        const auto& av = a->value.data;
        const auto& bv = b->value.data;
        if (a->requires_grad) {
            auto& ga = a->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] >= bv[i]) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf().data;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] < bv[i]) gb[i] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// activations

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    Tensor saved = out;
    return detail::make_op(std::move(out), {a}, [a, saved = std::move(saved)](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = saved.data[i];
            ga[i] += g[i] * s * (1.0 - s);
        }
    });
}

inline Var silu(const Var& a) {
    Tensor out = a->value;
    Tensor sig(out.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-out.data[i]));
        sig.data[i] = s;
        out.data[i] *= s;
    }
    return detail::make_op(std::move(out), {a}, [a, sig = std::move(sig)](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        const auto& av = a->value.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = sig.data[i];
            ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
        }
    });
}

inline double softplus_scalar(double x) {
    if (x > 30.0) return x; // exp overflow guard; error < 1e-13 here
    return std::log1p(std::exp(x));
}

inline Var softplus(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = softplus_scalar(v);
    return detail::make_op(std::move(out), {a}, [a](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        const auto& av = a->value.data;
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] / (1.0 + std::exp(-av[i]));
    });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return detail::make_op(Tensor({1}, {s}), {a}, [a](Node& self) {
        auto& ga = a->grad_buf().data;
        const double g = self.grad.data[0];
        for (auto& v : ga) v += g;
    });
}

inline Var mean_all(const Var& a) {
    const double inv_n = 1.0 / static_cast<double>(a->value.numel());
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return detail::make_op(Tensor({1}, {s * inv_n}), {a}, [a, inv_n](Node& self) {
        auto& ga = a->grad_buf().data;
        const double g = self.grad.data[0] * inv_n;
        for (auto& v : ga) v += g;
    });
}

// ---------------------------------------------------------------------------
// shape plumbing

inline Var reshape(const Var& a, Shape new_shape) {
    if (shape_numel(new_shape) != a->value.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(a->value.shape) +
                                    " -> " + shape_str(new_shape));
    Tensor out(new_shape, a->value.data);
    return detail::make_op(std::move(out), {a}, [a](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

inline Var transpose2(const Var& a) {
    if (a->value.rank() != 2) throw std::invalid_argument("transpose2: rank-2 only");
    const std::int64_t r = a->value.shape[0], c = a->value.shape[1];
    Tensor out({c, r});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at2(j, i) = a->value.at2(i, j);
    return detail::make_op(std::move(out), {a}, [a, r, c](Node& self) {
        auto& ga = a->grad_buf();
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) ga.at2(i, j) += self.grad.at2(j, i);
    });
}

inline Var slice_cols(const Var& a, std::int64_t c0, std::int64_t c1) {
    if (a->value.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 only");
    const std::int64_t rows = a->value.shape[0], cols = a->value.shape[1];
    if (c0 < 0 || c1 > cols || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    Tensor out({rows, c1 - c0});
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = c0; c < c1; ++c) out.at2(r, c - c0) = a->value.at2(r, c);
    return detail::make_op(std::move(out), {a}, [a, rows, c0, c1](Node& self) {
        auto& ga = a->grad_buf();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = c0; c < c1; ++c) ga.at2(r, c) += self.grad.at2(r, c - c0);
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[0] != b->value.shape[0])
        throw std::invalid_argument("concat_cols: incompatible shapes " +
                                    shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    const std::int64_t rows = a->value.shape[0], ca = a->value.shape[1], cb = b->value.shape[1];
    Tensor out({rows, ca + cb});
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < ca; ++c) out.at2(r, c) = a->value.at2(r, c);
        for (std::int64_t c = 0; c < cb; ++c) out.at2(r, ca + c) = b->value.at2(r, c);
    }
    return detail::make_op(std::move(out), {a, b}, [a, b, rows, ca, cb](Node& self) {
        if (a->requires_grad) {
            auto& ga = a->grad_buf();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < ca; ++c) ga.at2(r, c) += self.grad.at2(r, c);
        }
        if (b->requires_grad) {
            auto& gb = b->grad_buf();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < cb; ++c) gb.at2(r, c) += self.grad.at2(r, ca + c);
        }
    });
}

// Fixed element rearrangement: out.data[i] = x.data[idx[i]]. Backward is
// scatter-add, so duplicate indices are fine; patch unfold/fold and axis
// permutes are all instances of this.
inline Var gather_flat(const Var& a, std::vector<std::int64_t> idx, Shape out_shape) {
    if (static_cast<std::int64_t>(idx.size()) != shape_numel(out_shape))
        throw std::invalid_argument("gather_flat: index count does not match output shape");
    Tensor out(out_shape);
    const auto& src = a->value.data;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->value.numel())
            throw std::invalid_argument("gather_flat: index out of range");
        out.data[i] = src[static_cast<std::size_t>(idx[i])];
    }
    return detail::make_op(std::move(out), {a}, [a, idx = std::move(idx)](Node& self) {
        auto& ga = a->grad_buf().data;
        const auto& g = self.grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(idx[i])] += g[i];
    });
}

// Row gather on [R,C]: out[i,:] = x[rows[i],:].
inline Var gather_rows(const Var& a, const std::vector<std::int64_t>& rows_idx) {
    if (a->value.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 only");
    const std::int64_t rows = a->value.shape[0], cols = a->value.shape[1];
    Tensor out({static_cast<std::int64_t>(rows_idx.size()), cols});
    for (std::size_t i = 0; i < rows_idx.size(); ++i) {
        const std::int64_t r = rows_idx[i];
        if (r < 0 || r >= rows) throw std::invalid_argument("gather_rows: row index out of range");
        for (std::int64_t c = 0; c < cols; ++c) out.at2(static_cast<std::int64_t>(i), c) = a->value.at2(r, c);
    }
    return detail::make_op(std::move(out), {a}, [a, rows_idx, cols](Node& self) {
        auto& ga = a->grad_buf();
        for (std::size_t i = 0; i < rows_idx.size(); ++i)
            for (std::int64_t c = 0; c < cols; ++c)
                ga.at2(rows_idx[i], c) += self.grad.at2(static_cast<std::int64_t>(i), c);
    });
}

// [C,H,W] -> [C,H-2m,W-2m]; used to restrict windowed statistics to fully
// interior positions.
inline Var crop_border(const Var& a, std::int64_t m) {
    if (a->value.rank() != 3) throw std::invalid_argument("crop_border: rank-3 only");
    const std::int64_t C = a->value.shape[0], H = a->value.shape[1], W = a->value.shape[2];
    if (2 * m >= H || 2 * m >= W) throw std::invalid_argument("crop_border: margin too large");
    Tensor out({C, H - 2 * m, W - 2 * m});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H - 2 * m; ++y)
            for (std::int64_t x = 0; x < W - 2 * m; ++x)
                out.at3(c, y, x) = a->value.at3(c, y + m, x + m);
    return detail::make_op(std::move(out), {a}, [a, C, H, W, m](Node& self) {
        auto& ga = a->grad_buf();
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < H - 2 * m; ++y)
                for (std::int64_t x = 0; x < W - 2 * m; ++x)
                    ga.at3(c, y + m, x + m) += self.grad.at3(c, y, x);
    });
}

// Sum over channels of one pixel of a [C,H,W] map; the probe scalar for
// receptive-field analysis.
inline Var pixel_channel_sum(const Var& a, std::int64_t y, std::int64_t x) {
    if (a->value.rank() != 3) throw std::invalid_argument("pixel_channel_sum: rank-3 only");
    const std::int64_t C = a->value.shape[0], H = a->value.shape[1], W = a->value.shape[2];
    if (y < 0 || y >= H || x < 0 || x >= W)
        throw std::invalid_argument("pixel_channel_sum: pixel out of range");
    double s = 0.0;
    for (std::int64_t c = 0; c < C; ++c) s += a->value.at3(c, y, x);
    return detail::make_op(Tensor({1}, {s}), {a}, [a, C, y, x](Node& self) {
        auto& ga = a->grad_buf();
        const double g = self.grad.data[0];
        for (std::int64_t c = 0; c < C; ++c) ga.at3(c, y, x) += g;
    });
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
}

// da[m,k] += g[m,n] * b^T   (b is [k,n])
inline void mm_gbt_acc(const double* g, const double* b, double* da, std::int64_t m,
                       std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const double* grow = g + i * n;
            const double* brow = b + p * n;
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            da[i * k + p] += s;
        }
}

// db[k,n] += a^T * g   (a is [m,k], g is [m,n])
inline void mm_atg_acc(const double* a, const double* g, double* db, std::int64_t m,
                       std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* grow = g + i * n;
            double* drow = db + p * n;
            for (std::int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
}

} // namespace detail

// Batched contraction [..,m,k] x [..,k,n] -> [..,m,n]. Leading batch dims
// must match, or be absent on one side (that operand is then reused per
// batch).
inline Var matmul(const Var& a, const Var& b) {
    const Shape& sa = a->value.shape;
    const Shape& sb = b->value.shape;
    if (sa.size() < 2 || sb.size() < 2)
        throw std::invalid_argument("matmul: operands must be at least rank-2, got " +
                                    shape_str(sa) + " and " + shape_str(sb));
    const std::int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::int64_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(sa) +
                                    " x " + shape_str(sb));
    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    Shape batch;
    if (batch_a == batch_b) batch = batch_a;
    else if (batch_a.empty()) batch = batch_b;
    else if (batch_b.empty()) batch = batch_a;
    else
        throw std::invalid_argument("matmul: batch dimensions disagree: " + shape_str(sa) +
                                    " x " + shape_str(sb));
    const std::int64_t nb = shape_numel(batch);
    const bool bcast_a = batch_a.empty() && !batch.empty();
    const bool bcast_b = batch_b.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (std::int64_t t = 0; t < nb; ++t)
        detail::mm_acc(a->value.data.data() + (bcast_a ? 0 : t * m * k),
                       b->value.data.data() + (bcast_b ? 0 : t * k * n),
                       out.data.data() + t * m * n, m, k, n);
    return detail::make_op(std::move(out), {a, b},
                           [a, b, m, k, n, nb, bcast_a, bcast_b](Node& self) {
        const double* g = self.grad.data.data();
        if (a->requires_grad) {
            double* ga = a->grad_buf().data.data();
            for (std::int64_t t = 0; t < nb; ++t)
                detail::mm_gbt_acc(g + t * m * n, b->value.data.data() + (bcast_b ? 0 : t * k * n),
                                   ga + (bcast_a ? 0 : t * m * k), m, k, n);
        }
        if (b->requires_grad) {
            double* gb = b->grad_buf().data.data();
            for (std::int64_t t = 0; t < nb; ++t)
                detail::mm_atg_acc(a->value.data.data() + (bcast_a ? 0 : t * m * k), g + t * m * n,
                                   gb + (bcast_b ? 0 : t * k * n), m, k, n);
        }
    });
}

inline Var linear(const Var& x, const Var& w, const Var& bias) {
    return add_rowvec(matmul(x, w), bias);
}

// ---------------------------------------------------------------------------
// layer norm over the last axis

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6) {
    if (x->value.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
    const std::int64_t d = x->value.shape.back();
    if (gain->value.shape != Shape{d} || bias->value.shape != Shape{d})
        throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::int64_t rows = x->value.numel() / d;

    Tensor out(x->value.shape);
    Tensor xhat(x->value.shape);
    Tensor inv_std({rows});
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x->value.data.data() + r * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std.data[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mean) * inv;
            xhat.data[static_cast<std::size_t>(r * d + j)] = xh;
            out.data[static_cast<std::size_t>(r * d + j)] =
                xh * gain->value.data[static_cast<std::size_t>(j)] + bias->value.data[static_cast<std::size_t>(j)];
        }
    }
    return detail::make_op(std::move(out), {x, gain, bias},
                           [x, gain, bias, rows, d, xhat = std::move(xhat),
                            inv_std = std::move(inv_std)](Node& self) {
        const auto& g = self.grad.data;
        if (gain->requires_grad) {
            auto& gg = gain->grad_buf().data;
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < d; ++j)
                    gg[static_cast<std::size_t>(j)] +=
                        g[static_cast<std::size_t>(r * d + j)] * xhat.data[static_cast<std::size_t>(r * d + j)];
        }
        if (bias->requires_grad) {
            auto& gb = bias->grad_buf().data;
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < d; ++j)
                    gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
        }
        if (x->requires_grad) {
            auto& gx = x->grad_buf().data;
            for (std::int64_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double h = g[static_cast<std::size_t>(r * d + j)] *
                                     gain->value.data[static_cast<std::size_t>(j)];
                    m1 += h;
                    m2 += h * xhat.data[static_cast<std::size_t>(r * d + j)];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                const double inv = inv_std.data[static_cast<std::size_t>(r)];
                for (std::int64_t j = 0; j < d; ++j) {
                    const double h = g[static_cast<std::size_t>(r * d + j)] *
                                     gain->value.data[static_cast<std::size_t>(j)];
                    gx[static_cast<std::size_t>(r * d + j)] +=
                        inv * (h - m1 - xhat.data[static_cast<std::size_t>(r * d + j)] * m2);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolutions (zero padding, "same" output size, stride 1)

// Per-channel convolution with no cross-channel mixing.
// x: [C,L] with kernel [C,K], or [C,H,W] with kernel [C,Kh,Kw]. Odd extents only.
inline Var depthwise_conv(const Var& x, const Var& kernel, const Var& bias = nullptr) {
    const Shape& sx = x->value.shape;
    const Shape& sk = kernel->value.shape;
    if (sx.size() != sk.size() || (sx.size() != 2 && sx.size() != 3))
        throw std::invalid_argument("depthwise_conv: expects [C,L]+[C,K] or [C,H,W]+[C,Kh,Kw], got " +
                                    shape_str(sx) + " and " + shape_str(sk));
    if (sx[0] != sk[0])
        throw std::invalid_argument("depthwise_conv: channel counts disagree: " + shape_str(sx) +
                                    " vs " + shape_str(sk));
    for (std::size_t i = 1; i < sk.size(); ++i)
        if (sk[i] % 2 == 0)
            throw std::invalid_argument("depthwise_conv: kernel extent must be odd, got " +
                                        shape_str(sk));
    if (bias && bias->value.shape != Shape{sx[0]})
        throw std::invalid_argument("depthwise_conv: bias must be [C]");

    const std::int64_t C = sx[0];
    const bool is1d = sx.size() == 2;
    const std::int64_t H = is1d ? 1 : sx[1];
    const std::int64_t W = is1d ? sx[1] : sx[2];
    const std::int64_t Kh = is1d ? 1 : sk[1];
    const std::int64_t Kw = is1d ? sk[1] : sk[2];
    const std::int64_t ry = Kh / 2, rx = Kw / 2;

    Tensor out(sx);
    for (std::int64_t c = 0; c < C; ++c) {
        const double* xin = x->value.data.data() + c * H * W;
        const double* kk = kernel->value.data.data() + c * Kh * Kw;
        double* o = out.data.data() + c * H * W;
        const double bv = bias ? bias->value.data[static_cast<std::size_t>(c)] : 0.0;
        for (std::int64_t yy = 0; yy < H; ++yy)
            for (std::int64_t xx = 0; xx < W; ++xx) {
                double s = bv;
                for (std::int64_t dy = 0; dy < Kh; ++dy) {
                    const std::int64_t sy = yy + dy - ry;
                    if (sy < 0 || sy >= H) continue;
                    for (std::int64_t dx = 0; dx < Kw; ++dx) {
                        const std::int64_t sxp = xx + dx - rx;
                        if (sxp < 0 || sxp >= W) continue;
                        s += kk[dy * Kw + dx] * xin[sy * W + sxp];
                    }
                }
                o[yy * W + xx] = s;
            }
    }
    std::vector<Var> parents = {x, kernel};
    if (bias) parents.push_back(bias);
    return detail::make_op(std::move(out), std::move(parents),
                           [x, kernel, bias, C, H, W, Kh, Kw, ry, rx](Node& self) {
        const double* g = self.grad.data.data();
        for (std::int64_t c = 0; c < C; ++c) {
            const double* gout = g + c * H * W;
            const double* xin = x->value.data.data() + c * H * W;
            const double* kk = kernel->value.data.data() + c * Kh * Kw;
            double* gx = x->requires_grad ? x->grad_buf().data.data() + c * H * W : nullptr;
            double* gk = kernel->requires_grad ? kernel->grad_buf().data.data() + c * Kh * Kw : nullptr;
            for (std::int64_t yy = 0; yy < H; ++yy)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    const double gv = gout[yy * W + xx];
                    if (gv == 0.0) continue;
                    for (std::int64_t dy = 0; dy < Kh; ++dy) {
                        const std::int64_t sy = yy + dy - ry;
                        if (sy < 0 || sy >= H) continue;
                        for (std::int64_t dx = 0; dx < Kw; ++dx) {
                            const std::int64_t sxp = xx + dx - rx;
                            if (sxp < 0 || sxp >= W) continue;
                            if (gk) gk[dy * Kw + dx] += gv * xin[sy * W + sxp];
                            if (gx) gx[sy * W + sxp] += gv * kk[dy * Kw + dx];
                        }
                    }
                }
        }
        if (bias && bias->requires_grad) {
            auto& gb = bias->grad_buf().data;
            for (std::int64_t c = 0; c < C; ++c) {
                double s = 0.0;
                const double* gout = g + c * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) s += gout[i];
                gb[static_cast<std::size_t>(c)] += s;
            }
        }
    });
}

// Full 2-D convolution x:[Cin,H,W] * w:[Cout,Cin,Kh,Kw] + b:[Cout].
inline Var conv2d(const Var& x, const Var& w, const Var& bias) {
    const Shape& sx = x->value.shape;
    const Shape& sw = w->value.shape;
    if (sx.size() != 3 || sw.size() != 4 || sx[0] != sw[1])
        throw std::invalid_argument("conv2d: expects [Cin,H,W] and [Cout,Cin,Kh,Kw], got " +
                                    shape_str(sx) + " and " + shape_str(sw));
    if (sw[2] % 2 == 0 || sw[3] % 2 == 0)
        throw std::invalid_argument("conv2d: kernel extents must be odd");
    const std::int64_t Cin = sx[0], H = sx[1], W = sx[2];
    const std::int64_t Cout = sw[0], Kh = sw[2], Kw = sw[3];
    if (bias->value.shape != Shape{Cout}) throw std::invalid_argument("conv2d: bias must be [Cout]");
    const std::int64_t ry = Kh / 2, rx = Kw / 2;

    Tensor out({Cout, H, W});
    for (std::int64_t co = 0; co < Cout; ++co) {
        double* o = out.data.data() + co * H * W;
        const double bv = bias->value.data[static_cast<std::size_t>(co)];
        for (std::int64_t i = 0; i < H * W; ++i) o[i] = bv;
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
            const double* xin = x->value.data.data() + ci * H * W;
            const double* kk = w->value.data.data() + (co * Cin + ci) * Kh * Kw;
            for (std::int64_t yy = 0; yy < H; ++yy)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    double s = 0.0;
                    for (std::int64_t dy = 0; dy < Kh; ++dy) {
                        const std::int64_t sy = yy + dy - ry;
                        if (sy < 0 || sy >= H) continue;
                        for (std::int64_t dx = 0; dx < Kw; ++dx) {
                            const std::int64_t sxp = xx + dx - rx;
                            if (sxp < 0 || sxp >= W) continue;
                            s += kk[dy * Kw + dx] * xin[sy * W + sxp];
                        }
                    }
                    o[yy * W + xx] += s;
                }
        }
    }
    return detail::make_op(std::move(out), {x, w, bias},
                           [x, w, bias, Cin, Cout, H, W, Kh, Kw, ry, rx](Node& self) {
        const double* g = self.grad.data.data();
        for (std::int64_t co = 0; co < Cout; ++co) {
            const double* gout = g + co * H * W;
            if (bias->requires_grad) {
                double s = 0.0;
                for (std::int64_t i = 0; i < H * W; ++i) s += gout[i];
                bias->grad_buf().data[static_cast<std::size_t>(co)] += s;
            }
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const double* xin = x->value.data.data() + ci * H * W;
                const double* kk = w->value.data.data() + (co * Cin + ci) * Kh * Kw;
                double* gx = x->requires_grad ? x->grad_buf().data.data() + ci * H * W : nullptr;
                double* gk = w->requires_grad
                                 ? w->grad_buf().data.data() + (co * Cin + ci) * Kh * Kw
                                 : nullptr;
                for (std::int64_t yy = 0; yy < H; ++yy)
                    for (std::int64_t xx = 0; xx < W; ++xx) {
                        const double gv = gout[yy * W + xx];
                        if (gv == 0.0) continue;
                        for (std::int64_t dy = 0; dy < Kh; ++dy) {
                            const std::int64_t sy = yy + dy - ry;
                            if (sy < 0 || sy >= H) continue;
                            for (std::int64_t dx = 0; dx < Kw; ++dx) {
                                const std::int64_t sxp = xx + dx - rx;
                                if (sxp < 0 || sxp >= W) continue;
                                if (gk) gk[dy * Kw + dx] += gv * xin[sy * W + sxp];
                                if (gx) gx[sy * W + sxp] += gv * kk[dy * Kw + dx];
                            }
                        }
                    }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// operator sugar

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

} // namespace smamba
