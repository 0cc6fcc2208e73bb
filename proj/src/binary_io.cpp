#include "codex3d/binary_io.hpp"

#include "codex3d/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace codex3d::io {

namespace {

constexpr std::string_view kArrayMagic = "CX3DARR1";

template <typename T>
T to_little(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return v;
    }
}

} // namespace

void ByteWriter::u32(std::uint32_t v)
{
    v = to_little(v);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void ByteWriter::u64(std::uint64_t v)
{
    v = to_little(v);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f32s(std::span<const float> values)
{
    if constexpr (std::endian::native == std::endian::little) {
        buf_.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
    } else {
        for (float v : values) f32(v);
    }
}

void ByteWriter::bytes(std::string_view data) { buf_.append(data); }

void ByteReader::need(std::size_t n) const
{
    if (remaining() < n) {
        throw SchemaError("truncated data: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_)
                          + ", have " + std::to_string(remaining()));
    }
}

std::uint32_t ByteReader::u32()
{
    need(4);
    std::uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return to_little(v);
}

std::uint64_t ByteReader::u64()
{
    need(8);
    std::uint64_t v;
    std::memcpy(&v, data_.data() + pos_, 8);
    pos_ += 8;
    return to_little(v);
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

void ByteReader::f32s(std::span<float> out)
{
    need(out.size_bytes());
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    } else {
        for (float& v : out) v = f32();
    }
}

std::string_view ByteReader::bytes(std::size_t n)
{
    need(n);
    auto view = data_.substr(pos_, n);
    pos_ += n;
    return view;
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) {
            throw IoError("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void write_array(const fs::path& path, std::span<const std::int64_t> shape, std::span<const float> values)
{
    std::int64_t count = 1;
    for (auto e : shape) count *= e;
    if (count != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("write_array: shape does not match value count");
    }
    ByteWriter w;
    w.bytes(kArrayMagic);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) w.u64(static_cast<std::uint64_t>(e));
    w.f32s(values);
    write_file_atomic(path, w.buffer());
}

std::vector<float> read_array(const fs::path& path, std::vector<std::int64_t>& shape)
{
    const std::string data = read_file(path);
    ByteReader r(data);
    if (data.size() < kArrayMagic.size() || r.bytes(kArrayMagic.size()) != kArrayMagic) {
        throw SchemaError(path.string() + ": not a codex3d array file");
    }
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) {
        throw SchemaError(path.string() + ": bad array rank");
    }
    shape.assign(rank, 0);
    std::int64_t count = 1;
    for (auto& e : shape) {
        e = static_cast<std::int64_t>(r.u64());
        if (e <= 0 || e > (1 << 20)) {
            throw SchemaError(path.string() + ": bad array extent");
        }
        count *= e;
    }
    std::vector<float> values(static_cast<std::size_t>(count));
    r.f32s(values);
    return values;
}

void write_pgm(const fs::path& path, std::int64_t height, std::int64_t width, std::span<const float> values)
{
    if (height * width != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("write_pgm: shape does not match value count");
    }
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.reserve(out.size() + values.size());
    for (float v : values) {
        const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
    }
    write_file_atomic(path, out);
}

std::vector<float> read_pgm(const fs::path& path, std::int64_t& height, std::int64_t& width)
{
    const std::string data = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < data.size()) {
            if (data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
        return data.substr(start, pos - start);
    };
    if (next_token() != "P5") {
        throw SchemaError(path.string() + ": only binary PGM (P5) is supported");
    }
    try {
        width = std::stoll(next_token());
        height = std::stoll(next_token());
        const long maxval = std::stol(next_token());
        if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
            throw SchemaError(path.string() + ": bad PGM header");
        }
        ++pos; // single whitespace after maxval
        const std::size_t bpp = maxval > 255 ? 2 : 1;
        const std::size_t n = static_cast<std::size_t>(width * height);
        if (data.size() < pos + n * bpp) {
            throw SchemaError(path.string() + ": truncated PGM");
        }
        std::vector<float> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            unsigned v = static_cast<unsigned char>(data[pos + i * bpp]);
            if (bpp == 2) {
                v = (v << 8) | static_cast<unsigned char>(data[pos + i * bpp + 1]); // PGM is big-endian
            }
            values[i] = static_cast<float>(v) / static_cast<float>(maxval);
        }
        return values;
    } catch (const std::invalid_argument&) {
        throw SchemaError(path.string() + ": bad PGM header");
    }
}

} // namespace codex3d::io
