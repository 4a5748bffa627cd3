#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

/// Little-endian byte encoders. Explicit byte shifts rather than memcpy so
/// the formats are identical on any host.
namespace le {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
  public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    explicit Reader(const std::vector<std::uint8_t>& buf) : Reader(buf.data(), buf.size()) {}

    std::size_t remaining() const { return size_ - pos_; }

    std::uint8_t u8() { return take(1)[0]; }

    std::uint16_t u16() {
        const std::uint8_t* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }

    std::uint32_t u32() {
        const std::uint8_t* p = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }

    std::uint64_t u64() {
        const std::uint8_t* p = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }

    std::string bytes(std::size_t count) {
        const std::uint8_t* p = take(count);
        return std::string(reinterpret_cast<const char*>(p), count);
    }

    void expect_magic(const char (&magic)[5]) {
        if (bytes(4) != std::string(magic, 4))
            throw io_error(std::string("bad magic, expected ") + magic);
    }

  private:
    const std::uint8_t* take(std::size_t count) {
        if (pos_ + count > size_) throw io_error("truncated binary input");
        const std::uint8_t* p = data_ + pos_;
        pos_ += count;
        return p;
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace le

/// Length-prefixed f64 tensor block: u64 element count + row-major payload.
inline void put_tensor(std::vector<std::uint8_t>& out, const Matrix& m) {
    le::put_u64(out, m.size());
    for (double v : m.values()) le::put_f64(out, v);
}

inline Matrix read_tensor(le::Reader& r, std::size_t rows, std::size_t cols) {
    const std::uint64_t count = r.u64();
    if (count != rows * cols)
        throw io_error("tensor block holds " + std::to_string(count) + " values, expected " +
                       std::to_string(rows * cols));
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
    return m;
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + path.string());
}

/// Write to a sibling temp file, then rename: readers never observe a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<std::uint8_t>& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    write_file(tmp, bytes);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("rename failed: " + tmp.string() + " -> " + path.string() + ": " +
                           ec.message());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw io_error("cannot open for reading: " + path.string());
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw io_error("read failed: " + path.string());
    return bytes;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw io_error("write failed: " + path.string());
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

/// FNV-1a over a string; used to stamp configs into CSV headers.
inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace ckv
