#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsdm {

/// File-format error (bad magic, truncation, malformed payload, ...).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

namespace bytes {

inline void put_u16(std::string& out, std::uint16_t x) {
    out.push_back(static_cast<char>(x & 0xff));
    out.push_back(static_cast<char>((x >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float x) {
    put_u32(out, std::bit_cast<std::uint32_t>(x));
}

inline void put_f64(std::string& out, double x) {
    put_u64(out, std::bit_cast<std::uint64_t>(x));
}

// Bounds-checked little-endian reader over an in-memory buffer.
class Reader {
  public:
    Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

    std::uint16_t u16() {
        const char* p = take(2);
        return static_cast<std::uint16_t>(static_cast<std::uint8_t>(p[0]) |
                                          (static_cast<std::uint8_t>(p[1]) << 8));
    }

    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
        return x;
    }

    std::uint64_t u64() {
        const char* p = take(8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
        return x;
    }

    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::string str(std::size_t n) { return std::string(take(n), n); }

    std::size_t remaining() const { return buf_.size() - pos_; }

    void expect_end() const {
        if (pos_ != buf_.size()) throw FormatError(what_ + ": trailing bytes after payload");
    }

  private:
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size()) throw FormatError(what_ + ": truncated file");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace bytes

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("write failed: " + path);
}

}  // namespace tsdm
