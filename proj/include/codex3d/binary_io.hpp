#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace codex3d::io {

namespace fs = std::filesystem;

/// Appends little-endian encodings to a byte buffer.
class ByteWriter {
public:
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f32s(std::span<const float> values);
    void bytes(std::string_view data);

    const std::string& buffer() const noexcept { return buf_; }
    std::string take() noexcept { return std::move(buf_); }

private:
    std::string buf_;
};

/// Bounds-checked little-endian reader; throws SchemaError on truncation.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::uint32_t u32();
    std::uint64_t u64();
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    void f32s(std::span<float> out);
    std::string_view bytes(std::size_t n);

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    void need(std::size_t n) const;

    std::string_view data_;
    std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path);

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view contents);

/// Standalone float array file: magic, rank, extents, then little-endian f32
/// values in C row-major order.
void write_array(const fs::path& path, std::span<const std::int64_t> shape, std::span<const float> values);
std::vector<float> read_array(const fs::path& path, std::vector<std::int64_t>& shape);

/// 8-bit binary PGM (P5). Values are clamped to [0,1] before scaling.
void write_pgm(const fs::path& path, std::int64_t height, std::int64_t width, std::span<const float> values);
/// Reads P5 PGM with maxval up to 65535; returns values scaled to [0,1].
std::vector<float> read_pgm(const fs::path& path, std::int64_t& height, std::int64_t& width);

} // namespace codex3d::io
