#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvlink/errors.hpp"

namespace kvlink {

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t seed = 14695981039346656037ull) {
    std::uint64_t h = seed;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

// Little-endian byte sink for the KVLW/KVLC formats.
class ByteWriter {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void f32_span(std::span<const float> v) { raw(v.data(), v.size() * 4); }

    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& data() const { return buf_; }

  private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader; errors name what was being read.
class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t u8(const char* what) { return *take(1, what); }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        std::memcpy(&v, take(4, what), 4);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        std::memcpy(&v, take(8, what), 8);
        return v;
    }
    double f64(const char* what) {
        double v;
        std::memcpy(&v, take(8, what), 8);
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        const auto* p = take(n, what);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    void f32_into(std::span<float> out, const char* what) {
        std::memcpy(out.data(), take(out.size() * 4, what), out.size() * 4);
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

  private:
    const std::uint8_t* take(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(std::string("truncated file while reading ") + what);
        }
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace kvlink
