#pragma once

// Tensor dump format "SADT": magic bytes, u8 rank, rank x u32 little-endian
// extents, then raw little-endian 64-bit floats. Checkpoints ("SADC") are a
// text index of <name> <offset> <length> lines followed by concatenated SADT
// blobs.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sadinet/tensor.hpp"

namespace sadi {

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64_le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f64_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace detail

inline std::string sadt_encode(const Tensor& t) {
    std::string out = "SADT";
    out.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
        detail::put_u32_le(out, static_cast<std::uint32_t>(t.dim(i)));
    for (double v : t.values()) detail::put_f64_le(out, v);
    return out;
}

inline Tensor sadt_decode(const std::string& bytes, std::size_t* consumed = nullptr) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 5 || std::memcmp(p, "SADT", 4) != 0)
        throw std::invalid_argument("sadt_decode: missing SADT magic");
    const int rank = p[4];
    std::size_t off = 5;
    if (bytes.size() < off + 4u * rank) throw std::invalid_argument("sadt_decode: truncated header");
    Shape shape;
    for (int i = 0; i < rank; ++i, off += 4)
        shape.push_back(static_cast<int>(detail::get_u32_le(p + off)));
    const std::int64_t n = numel_of(shape);
    if (bytes.size() < off + 8u * static_cast<std::size_t>(n))
        throw std::invalid_argument("sadt_decode: truncated payload for shape " + shape_str(shape));
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i, off += 8) vals[static_cast<std::size_t>(i)] = detail::get_f64_le(p + off);
    if (consumed) *consumed = off;
    return Tensor::from(std::move(shape), std::move(vals));
}

inline void sadt_save(const Tensor& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("sadt_save: cannot open " + path);
    const std::string bytes = sadt_encode(t);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor sadt_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("sadt_load: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return sadt_decode(ss.str());
}

/// Named-tensor container: "SADC1 <count>\n" then one "<name> <offset> <length>\n"
/// line per entry, a blank line, then the concatenated SADT blobs.
inline void sadc_save(const std::vector<std::pair<std::string, Tensor>>& entries,
                      const std::string& path) {
    std::string blobs;
    std::ostringstream index;
    index << "SADC1 " << entries.size() << "\n";
    for (const auto& [name, t] : entries) {
        const std::string b = sadt_encode(t);
        index << name << ' ' << blobs.size() << ' ' << b.size() << "\n";
        blobs += b;
    }
    index << "\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("sadc_save: cannot open " + path);
    const std::string head = index.str();
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    f.write(blobs.data(), static_cast<std::streamsize>(blobs.size()));
}

inline std::vector<std::pair<std::string, Tensor>> sadc_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("sadc_load: cannot open " + path);
    std::string header;
    std::getline(f, header);
    std::istringstream hs(header);
    std::string magic;
    std::size_t count = 0;
    hs >> magic >> count;
    if (magic != "SADC1") throw std::invalid_argument("sadc_load: missing SADC1 magic in " + path);
    struct Entry {
        std::string name;
        std::size_t offset, length;
    };
    std::vector<Entry> idx(count);
    for (auto& e : idx) {
        std::string line;
        std::getline(f, line);
        std::istringstream ls(line);
        if (!(ls >> e.name >> e.offset >> e.length))
            throw std::invalid_argument("sadc_load: malformed index line '" + line + "'");
    }
    std::string blank;
    std::getline(f, blank);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string blobs = ss.str();
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (const auto& e : idx) {
        if (e.offset + e.length > blobs.size())
            throw std::invalid_argument("sadc_load: blob range out of bounds for " + e.name);
        out.emplace_back(e.name, sadt_decode(blobs.substr(e.offset, e.length)));
    }
    return out;
}

}  // namespace sadi
