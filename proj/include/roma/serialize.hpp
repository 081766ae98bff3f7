#pragma once

// Binary named-tensor archive used for checkpoints and extractor weights.
//
// Layout (all integers little-endian):
//   magic            8 bytes
//   version          u32
//   meta_count       u32
//   meta entries     (key: u32 len + bytes, value: u32 len + bytes) *
//   tensor_count     u32
//   tensor entries   (name: u32 len + bytes, rank: u32, dims: i64 *, f64 data) *

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "roma/errors.hpp"
#include "roma/tensor.hpp"

namespace roma {

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_i64(std::ostream& os, std::int64_t v) {
    auto u = static_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw LoadError("archive: truncated u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::int64_t read_i64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw LoadError("archive: truncated i64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<std::int64_t>(v);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw LoadError("archive: truncated string");
    return s;
}

} // namespace io

struct TensorArchive {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw LoadError("archive: missing tensor " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }

    std::string meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw LoadError("archive: missing meta key " + key);
        return it->second;
    }

    void save(const std::filesystem::path& path, const char magic[8]) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw LoadError("archive: cannot open for writing: " + path.string());
        os.write(magic, 8);
        io::write_u32(os, 1);
        io::write_u32(os, static_cast<std::uint32_t>(meta.size()));
        for (const auto& [k, v] : meta) {
            io::write_string(os, k);
            io::write_string(os, v);
        }
        io::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            io::write_string(os, name);
            io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
            for (int d : t.shape()) io::write_i64(os, d);
            os.write(reinterpret_cast<const char*>(t.data()),
                     static_cast<std::streamsize>(t.size() * sizeof(double)));
        }
        if (!os) throw LoadError("archive: write failed: " + path.string());
    }

    static TensorArchive load(const std::filesystem::path& path, const char magic[8]) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw LoadError("archive: cannot open: " + path.string());
        char m[8];
        is.read(m, 8);
        if (!is || std::memcmp(m, magic, 8) != 0)
            throw LoadError("archive: bad magic in " + path.string());
        std::uint32_t version = io::read_u32(is);
        if (version != 1) throw LoadError("archive: unsupported version in " + path.string());
        TensorArchive a;
        std::uint32_t nmeta = io::read_u32(is);
        for (std::uint32_t i = 0; i < nmeta; ++i) {
            std::string k = io::read_string(is);
            a.meta[k] = io::read_string(is);
        }
        std::uint32_t nt = io::read_u32(is);
        for (std::uint32_t i = 0; i < nt; ++i) {
            std::string name = io::read_string(is);
            std::uint32_t rank = io::read_u32(is);
            std::vector<int> shape(rank);
            for (std::uint32_t r = 0; r < rank; ++r)
                shape[r] = static_cast<int>(io::read_i64(is));
            Tensor t(shape);
            is.read(reinterpret_cast<char*>(t.data()),
                    static_cast<std::streamsize>(t.size() * sizeof(double)));
            if (!is) throw LoadError("archive: truncated tensor data in " + path.string());
            a.tensors.emplace_back(std::move(name), std::move(t));
        }
        return a;
    }
};

// FNV-1a over a byte string; used to fingerprint configs inside checkpoints.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace roma
