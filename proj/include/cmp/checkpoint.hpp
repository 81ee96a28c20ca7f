#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmp/matrix.hpp"

namespace cmp {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline const std::array<std::uint32_t, 256>& crc32_table() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

inline std::uint32_t crc32(const std::string& data) {
    std::uint32_t c = 0xffffffffu;
    for (unsigned char ch : data) c = crc32_table()[(c ^ ch) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}
inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

struct Reader {
    const std::string& data;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > data.size()) throw CheckpointError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

/// Versioned "CMPC" binary container: magic, format version, free-form
/// descriptor string, named little-endian f64 parameter blobs in
/// declaration order, optional buffer section, trailing CRC-32 over
/// everything before it.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string descriptor;  // serialized spec / strategy description
    std::vector<std::pair<std::string, std::vector<Matrix>>> sections;  // named tensor groups
    std::vector<std::uint64_t> buffer_items;  // replay buffer ids, if any
    std::uint64_t buffer_meta = 0;            // seen/pushed counter

    std::string serialize() const {
        std::string body;
        body.append("CMPC", 4);
        detail::put_u32(body, kVersion);
        detail::put_str(body, descriptor);
        detail::put_u32(body, static_cast<std::uint32_t>(sections.size()));
        for (const auto& [name, tensors] : sections) {
            detail::put_str(body, name);
            detail::put_u32(body, static_cast<std::uint32_t>(tensors.size()));
            for (const Matrix& m : tensors) {
                detail::put_u32(body, static_cast<std::uint32_t>(m.rows()));
                detail::put_u32(body, static_cast<std::uint32_t>(m.cols()));
                for (double v : m.data()) detail::put_f64(body, v);
            }
        }
        detail::put_u32(body, static_cast<std::uint32_t>(buffer_items.size()));
        for (std::uint64_t id : buffer_items) detail::put_u64(body, id);
        detail::put_u64(body, buffer_meta);
        detail::put_u32(body, detail::crc32(body));
        return body;
    }

    static Checkpoint deserialize(const std::string& blob) {
        if (blob.size() < 8) throw CheckpointError("checkpoint too small");
        std::string body = blob.substr(0, blob.size() - 4);
        detail::Reader crc_r{blob, blob.size() - 4};
        if (crc_r.u32() != detail::crc32(body))
            throw CheckpointError("checkpoint CRC mismatch");
        detail::Reader r{body};
        r.need(4);
        if (body.compare(0, 4, "CMPC") != 0) throw CheckpointError("bad checkpoint magic");
        r.pos = 4;
        if (r.u32() != kVersion) throw CheckpointError("unsupported checkpoint version");
        Checkpoint ck;
        ck.descriptor = r.str();
        std::uint32_t nsec = r.u32();
        for (std::uint32_t s = 0; s < nsec; ++s) {
            std::string name = r.str();
            std::uint32_t nt = r.u32();
            std::vector<Matrix> tensors;
            for (std::uint32_t t = 0; t < nt; ++t) {
                std::uint32_t rows = r.u32(), cols = r.u32();
                Matrix m(rows, cols);
                for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.f64();
                tensors.push_back(std::move(m));
            }
            ck.sections.emplace_back(std::move(name), std::move(tensors));
        }
        std::uint32_t nbuf = r.u32();
        for (std::uint32_t i = 0; i < nbuf; ++i) ck.buffer_items.push_back(r.u64());
        ck.buffer_meta = r.u64();
        return ck;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw CheckpointError("cannot open " + path + " for writing");
        std::string blob = serialize();
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw CheckpointError("cannot open " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return deserialize(ss.str());
    }

    const std::vector<Matrix>* find(const std::string& name) const {
        for (const auto& [n, tensors] : sections)
            if (n == name) return &tensors;
        return nullptr;
    }
};

}  // namespace cmp
