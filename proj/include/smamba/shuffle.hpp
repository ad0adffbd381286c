#pragma once

// Uniform random permutation of the token axis plus its exact inverse.
// The pair is information-lossless: inverse(shuffle(x)) == x bit for bit,
// and gradients route through the same index maps.

#include "smamba/autodiff.hpp"
#include "smamba/rng.hpp"
#include "smamba/tensor.hpp"

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace smamba {

struct Permutation {
    std::vector<std::int64_t> forward; // out[i] = x[forward[i]]
    std::vector<std::int64_t> inverse; // inverse[forward[i]] == i

    std::int64_t size() const { return static_cast<std::int64_t>(forward.size()); }

    static Permutation identity(std::int64_t n) {
        Permutation p;
        p.forward.resize(static_cast<std::size_t>(n));
        p.inverse.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            p.forward[static_cast<std::size_t>(i)] = i;
            p.inverse[static_cast<std::size_t>(i)] = i;
        }
        return p;
    }

    bool is_valid() const {
        const std::int64_t n = size();
        if (static_cast<std::int64_t>(inverse.size()) != n) return false;
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t f = forward[static_cast<std::size_t>(i)];
            if (f < 0 || f >= n || seen[static_cast<std::size_t>(f)]) return false;
            seen[static_cast<std::size_t>(f)] = true;
            if (inverse[static_cast<std::size_t>(f)] != i) return false;
        }
        return true;
    }
};

// Fisher-Yates over the stream's draws; uniform over all L! orderings and a
// pure function of the stream state.
inline Permutation sample_permutation(RngStream& stream, std::int64_t length) {
    if (length < 1) throw std::invalid_argument("sample_permutation: length must be >= 1");
    Permutation p;
    p.forward.resize(static_cast<std::size_t>(length));
    for (std::int64_t i = 0; i < length; ++i) p.forward[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = length - 1; i > 0; --i) {
        const std::int64_t j =
            static_cast<std::int64_t>(stream.uniform_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(p.forward[static_cast<std::size_t>(i)], p.forward[static_cast<std::size_t>(j)]);
    }
    p.inverse.resize(static_cast<std::size_t>(length));
    for (std::int64_t i = 0; i < length; ++i)
        p.inverse[static_cast<std::size_t>(p.forward[static_cast<std::size_t>(i)])] = i;
    return p;
}

inline void require_perm_length(const Permutation& p, std::int64_t rows, const char* op) {
    if (p.size() != rows)
        throw std::invalid_argument(std::string(op) + ": permutation length " +
                                    std::to_string(p.size()) + " != sequence length " +
                                    std::to_string(rows));
}

inline Tensor apply_shuffle(const Tensor& x, const Permutation& p) {
    if (x.rank() != 2) throw std::invalid_argument("apply_shuffle: expects [L,D]");
    require_perm_length(p, x.shape[0], "apply_shuffle");
    Tensor out(x.shape);
    const std::int64_t d = x.shape[1];
    for (std::int64_t i = 0; i < p.size(); ++i)
        for (std::int64_t c = 0; c < d; ++c) out.at2(i, c) = x.at2(p.forward[static_cast<std::size_t>(i)], c);
    return out;
}

inline Tensor apply_inverse_shuffle(const Tensor& y, const Permutation& p) {
    if (y.rank() != 2) throw std::invalid_argument("apply_inverse_shuffle: expects [L,D]");
    require_perm_length(p, y.shape[0], "apply_inverse_shuffle");
    Tensor out(y.shape);
    const std::int64_t d = y.shape[1];
    for (std::int64_t i = 0; i < p.size(); ++i)
        for (std::int64_t c = 0; c < d; ++c) out.at2(i, c) = y.at2(p.inverse[static_cast<std::size_t>(i)], c);
    return out;
}

inline Var apply_shuffle(const Var& x, const Permutation& p) {
    if (x->value.rank() != 2) throw std::invalid_argument("apply_shuffle: expects [L,D]");
    require_perm_length(p, x->value.shape[0], "apply_shuffle");
    return gather_rows(x, p.forward);
}

inline Var apply_inverse_shuffle(const Var& y, const Permutation& p) {
    if (y->value.rank() != 2) throw std::invalid_argument("apply_inverse_shuffle: expects [L,D]");
    require_perm_length(p, y->value.shape[0], "apply_inverse_shuffle");
    return gather_rows(y, p.inverse);
}

// Empirical check of the equal-probability adjacency claim: returns the
// [L,L] matrix of unordered-pair adjacency frequencies over n_samples
// shuffles. Under uniform permutations every off-diagonal entry tends to
// 2/L.
inline Tensor adjacency_statistics(std::int64_t length, std::int64_t n_samples,
                                   RngStream& stream) {
    if (length < 2) throw std::invalid_argument("adjacency_statistics: length must be >= 2");
    Tensor counts({length, length});
    for (std::int64_t s = 0; s < n_samples; ++s) {
        const Permutation p = sample_permutation(stream, length);
        for (std::int64_t i = 0; i + 1 < length; ++i) {
            const std::int64_t a = p.forward[static_cast<std::size_t>(i)];
            const std::int64_t b = p.forward[static_cast<std::size_t>(i + 1)];
            counts.at2(a, b) += 1.0;
            counts.at2(b, a) += 1.0;
        }
    }
    for (auto& v : counts.data) v /= static_cast<double>(n_samples);
    return counts;
}

// Newline-separated index list, forward map only; the inverse is recomputed.
inline void write_permutation(std::ostream& os, const Permutation& p) {
    for (std::int64_t i = 0; i < p.size(); ++i) os << p.forward[static_cast<std::size_t>(i)] << "\n";
}

inline Permutation read_permutation(std::istream& is) {
    Permutation p;
    std::int64_t v;
    while (is >> v) p.forward.push_back(v);
    p.inverse.resize(p.forward.size());
    for (std::size_t i = 0; i < p.forward.size(); ++i) {
        const std::int64_t f = p.forward[i];
        if (f < 0 || f >= static_cast<std::int64_t>(p.forward.size()))
            throw std::runtime_error("read_permutation: index out of range");
        p.inverse[static_cast<std::size_t>(f)] = static_cast<std::int64_t>(i);
    }
    if (!p.is_valid()) throw std::runtime_error("read_permutation: not a bijection");
    return p;
}

} // namespace smamba
