#pragma once

// Tensor fixture format ("SMT1"): magic, u32 rank, rank x u32 dims,
// little-endian float32 payload, row-major. A container ("SMC1") holds
// named SMT1 records back to back; checkpoints use it with one entry
// per parameter.

#include "smamba/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

namespace smamba {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor io: truncated stream");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("SMT1", 4);
    detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data) detail::write_f32(os, static_cast<float>(v));
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SMT1", 4) != 0)
        throw std::runtime_error("tensor io: bad magic (expected SMT1)");
    std::uint32_t rank = detail::read_u32(is);
    if (rank > 8) throw std::runtime_error("tensor io: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u32(is);
    Tensor t(shape);
    for (auto& v : t.data) v = static_cast<double>(detail::read_f32(is));
    return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_tensor(os, t);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return read_tensor(is);
}

// Named-entry container. std::map keeps entries sorted, so identical
// contents serialize to identical bytes.
using TensorMap = std::map<std::string, Tensor>;

inline void save_container(const std::string& path, const TensorMap& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write("SMC1", 4);
    detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, t);
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline TensorMap load_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SMC1", 4) != 0)
        throw std::runtime_error("tensor io: bad container magic (expected SMC1)");
    std::uint32_t count = detail::read_u32(is);
    TensorMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = detail::read_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw std::runtime_error("tensor io: truncated container");
        out[name] = read_tensor(is);
    }
    return out;
}

} // namespace smamba
