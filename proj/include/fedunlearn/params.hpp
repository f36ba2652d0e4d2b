#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/error.hpp"

namespace fedunlearn {

/// One dense layer: a rows x cols weight matrix (inputs x outputs, row-major)
/// optionally followed by cols bias entries.
struct LayerShape {
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool has_bias = true;

    std::size_t size() const { return rows * cols + (has_bias ? cols : 0); }

    friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

using ShapeManifest = std::vector<LayerShape>;

inline std::size_t manifest_size(const ShapeManifest& shapes) {
    std::size_t n = 0;
    for (const auto& s : shapes) n += s.size();
    return n;
}

/// Flat model parameters (or a parameter delta) plus the layer manifest that
/// gives the flat buffer its structure. Arithmetic is elementwise and always
/// walks the buffer front to back.
class ParameterVector {
public:
    ParameterVector() = default;

    explicit ParameterVector(ShapeManifest shapes)
        : shapes_(std::move(shapes)), values_(manifest_size(shapes_), 0.0) {}

    ParameterVector(ShapeManifest shapes, std::vector<double> values)
        : shapes_(std::move(shapes)), values_(std::move(values)) {
        if (values_.size() != manifest_size(shapes_)) {
            throw ShapeError("parameter count " + std::to_string(values_.size()) +
                             " does not match manifest size " + std::to_string(manifest_size(shapes_)));
        }
    }

    static ParameterVector zeros_like(const ParameterVector& other) { return ParameterVector(other.shapes_); }

    const ShapeManifest& shapes() const { return shapes_; }
    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    /// Offset of layer `layer`'s weight block in the flat buffer.
    std::size_t layer_offset(std::size_t layer) const {
        std::size_t off = 0;
        for (std::size_t l = 0; l < layer; ++l) off += shapes_[l].size();
        return off;
    }

    void require_same_shape(const ParameterVector& other, const char* op) const {
        if (shapes_ != other.shapes_) {
            throw ShapeError(std::string(op) + ": parameter manifests differ");
        }
    }

    ParameterVector& operator+=(const ParameterVector& other) {
        require_same_shape(other, "add");
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
        return *this;
    }

    ParameterVector& operator-=(const ParameterVector& other) {
        require_same_shape(other, "subtract");
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
        return *this;
    }

    ParameterVector& operator*=(double s) {
        for (double& v : values_) v *= s;
        return *this;
    }

    friend ParameterVector operator+(ParameterVector a, const ParameterVector& b) { return a += b; }
    friend ParameterVector operator-(ParameterVector a, const ParameterVector& b) { return a -= b; }
    friend ParameterVector operator*(ParameterVector a, double s) { return a *= s; }
    friend ParameterVector operator*(double s, ParameterVector a) { return a *= s; }

    /// Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads).
    bool bit_equal(const ParameterVector& other) const {
        if (shapes_ != other.shapes_) return false;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(values_[i]) != std::bit_cast<std::uint64_t>(other.values_[i])) {
                return false;
            }
        }
        return true;
    }

    double max_abs_diff(const ParameterVector& other) const {
        require_same_shape(other, "compare");
        double m = 0.0;
        for (std::size_t i = 0; i < values_.size(); ++i) m = std::max(m, std::abs(values_[i] - other.values_[i]));
        return m;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double v : values_) s += v * v;
        return std::sqrt(s);
    }

    friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

private:
    ShapeManifest shapes_;
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   "FUPV"  magic
//   u32     version (= 1)
//   u64     config tag (hash of the producing config, 0 when none)
//   u32     layer count L
//   L x { u32 rows, u32 cols, u8 has_bias }
//   u64     value count
//   f64     values, manifest order

namespace checkpoint {

inline constexpr std::string_view kMagic = "FUPV";
inline constexpr std::uint32_t kVersion = 1;

inline void write_manifest(io::ByteWriter& w, const ShapeManifest& shapes) {
    w.u32(static_cast<std::uint32_t>(shapes.size()));
    for (const auto& s : shapes) {
        w.u32(static_cast<std::uint32_t>(s.rows));
        w.u32(static_cast<std::uint32_t>(s.cols));
        w.u8(s.has_bias ? 1 : 0);
    }
}

inline ShapeManifest read_manifest(io::ByteReader& r) {
    const auto start = r.offset();
    const std::uint32_t n = r.u32("layer count");
    if (n > 4096) throw FormatError("implausible layer count " + std::to_string(n), start);
    ShapeManifest shapes;
    shapes.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        LayerShape s;
        s.rows = r.u32("layer rows");
        s.cols = r.u32("layer cols");
        const auto at = r.offset();
        const auto bias = r.u8("layer bias flag");
        if (bias > 1) throw FormatError("bad bias flag", at);
        s.has_bias = bias == 1;
        shapes.push_back(s);
    }
    return shapes;
}

inline void write_values(io::ByteWriter& w, const ParameterVector& p) {
    w.u64(p.size());
    w.f64s(p.values());
}

inline ParameterVector read_values(io::ByteReader& r, const ShapeManifest& shapes) {
    const auto at = r.offset();
    const std::uint64_t count = r.u64("value count");
    if (count != manifest_size(shapes)) {
        throw FormatError("value count " + std::to_string(count) + " disagrees with manifest", at);
    }
    ParameterVector p(shapes);
    r.f64s(p.values(), "parameter values");
    return p;
}

inline std::string encode(const ParameterVector& p, std::uint64_t tag = 0) {
    io::ByteWriter w;
    w.bytes(kMagic);
    w.u32(kVersion);
    w.u64(tag);
    write_manifest(w, p.shapes());
    write_values(w, p);
    return w.buffer();
}

struct Decoded {
    ParameterVector params;
    std::uint64_t tag = 0;
};

inline Decoded decode(std::string_view data) {
    io::ByteReader r(data);
    if (r.bytes(4, "magic") != kMagic) throw FormatError("not a parameter checkpoint (bad magic)", 0);
    const auto version = r.u32("version");
    if (version != kVersion) throw VersionError(version, kVersion);
    Decoded d;
    d.tag = r.u64("config tag");
    const auto shapes = read_manifest(r);
    d.params = read_values(r, shapes);
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
    return d;
}

inline void save(const ParameterVector& p, const std::filesystem::path& path, std::uint64_t tag = 0) {
    io::write_file_atomic(path, encode(p, tag));
}

inline Decoded load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

}  // namespace checkpoint

}  // namespace fedunlearn
