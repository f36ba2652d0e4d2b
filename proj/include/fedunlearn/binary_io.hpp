#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedunlearn/error.hpp"

namespace fedunlearn::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u32(std::uint32_t v) { put(v); }

    void u64(std::uint64_t v) { put(v); }

    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }

    void f64s(std::span<const double> vs) {
        for (double v : vs) f64(v);
    }

    const std::string& buffer() const { return buf_; }

private:
    template <typename U>
    void put(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }

    std::string buf_;
};

/// Bounds-checked little-endian reader; every failure reports its offset.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::uint64_t offset() const { return pos_; }

    bool at_end() const { return pos_ == data_.size(); }

    std::string_view bytes(std::size_t n, std::string_view what) {
        need(n, what);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::uint8_t u8(std::string_view what) { return static_cast<std::uint8_t>(bytes(1, what)[0]); }

    std::uint32_t u32(std::string_view what) { return get<std::uint32_t>(what); }

    std::uint64_t u64(std::string_view what) { return get<std::uint64_t>(what); }

    double f64(std::string_view what) { return std::bit_cast<double>(get<std::uint64_t>(what)); }

    void f64s(std::span<double> out, std::string_view what) {
        need(out.size() * 8, what);
        for (double& v : out) v = f64(what);
    }

private:
    void need(std::size_t n, std::string_view what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError("truncated input while reading " + std::string(what), pos_);
        }
    }

    template <typename U>
    U get(std::string_view what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temp file and renames it over the target, so readers
/// never observe a partially written artifact.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename onto " + path.string());
    }
}

}  // namespace fedunlearn::io
