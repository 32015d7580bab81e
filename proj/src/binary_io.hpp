#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "cglab/errors.hpp"

namespace cglab::detail {

static_assert(std::endian::native == std::endian::little, "snapshot formats assume a little-endian host");

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void magic(std::string_view m) { raw(m.data(), m.size()); }
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        raw(&v, sizeof(T));
    }
    void doubles(const double* p, std::size_t n) { raw(p, n * sizeof(double)); }

    /// Appends the CRC32 of everything written so far and writes the file.
    void finish(const std::filesystem::path& path) {
        const std::uint32_t crc = crc32_of(buf_.data(), buf_.size());
        put(crc);
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw DataError("write failed: " + path.string());
    }

private:
    std::vector<unsigned char> buf_;
};

class ByteReader {
public:
    ByteReader(const std::filesystem::path& path, std::string_view kind) : kind_(kind) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw MissingFileError(path.string());
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        source_ = path.string();
    }

    void expect_magic(std::string_view m) {
        if (buf_.size() < m.size() || std::memcmp(buf_.data(), m.data(), m.size()) != 0)
            throw DataError(source_ + ": not a " + std::string(kind_) + " file");
        pos_ = m.size();
    }

    /// Verifies the trailing CRC32; call after the magic and version checks.
    void verify_crc() {
        if (buf_.size() < pos_ + sizeof(std::uint32_t)) truncated();
        const std::size_t body = buf_.size() - sizeof(std::uint32_t);
        std::uint32_t stored;
        std::memcpy(&stored, buf_.data() + body, sizeof(stored));
        if (stored != crc32_of(reinterpret_cast<const unsigned char*>(buf_.data()), body))
            throw DataError(source_ + ": " + std::string(kind_) + " checksum mismatch (truncated or corrupt)");
        end_ = body;
    }

    template <typename T>
    T get() {
        T v;
        if (pos_ + sizeof(T) > limit()) truncated();
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void doubles(double* out, std::size_t n) {
        if (n > (limit() - pos_) / sizeof(double)) truncated();
        std::memcpy(out, buf_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
    }

    bool at_end() const { return pos_ == limit(); }
    const std::string& source() const { return source_; }

    [[noreturn]] void truncated() const {
        throw DataError(source_ + ": truncated " + std::string(kind_) + " file");
    }

private:
    std::size_t limit() const { return end_ ? end_ : buf_.size(); }

    std::vector<char> buf_;
    std::size_t pos_ = 0;
    std::size_t end_ = 0;
    std::string source_;
    std::string_view kind_;
};

}  // namespace cglab::detail
