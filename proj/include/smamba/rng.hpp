#pragma once

// Counter-based pseudorandom streams. A draw is a pure function of
// (seed, stream_id, counter), so any stream can be replayed from scratch
// regardless of what other streams consumed in the meantime.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace smamba {

namespace detail {

// SplitMix64 finalizer (Stafford mix 13).
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

} // namespace detail

class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id), counter_(0) {
        key_ = detail::mix64(detail::mix64(seed + detail::kGolden) ^
                             (detail::kGolden * (stream_id + 1)));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    std::uint64_t counter() const { return counter_; }

    // Derive an independent child stream. Children with distinct tags don't
    // overlap each other or the parent.
    RngStream substream(std::uint64_t tag) const {
        return RngStream(seed_, detail::mix64(stream_id_ ^ detail::mix64(tag + detail::kGolden)));
    }

    std::uint64_t next_u64() {
        return detail::mix64(key_ + detail::kGolden * ++counter_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    std::vector<double> uniform_vec(std::size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = uniform();
        return out;
    }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
        const std::uint64_t threshold = (0 - n) % n; // 2^64 mod n
        for (;;) {
            std::uint64_t v = next_u64();
            if (v >= threshold) return v % n;
        }
    }

    // Standard normal via Box-Muller; consumes two draws per pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t counter_;
    std::uint64_t key_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Named top-level streams hanging off the single root seed. One flag
// reproduces every random decision in a run.
enum class StreamKind : std::uint64_t {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    MonteCarlo = 4,
};

inline RngStream named_stream(std::uint64_t root_seed, StreamKind kind) {
    return RngStream(root_seed, static_cast<std::uint64_t>(kind));
}

} // namespace smamba
