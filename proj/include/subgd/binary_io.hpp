#pragma once

// Little-endian binary helpers and the "framed" container used for
// subspaces, direction matrices and RLC datasets:
//
//   8 bytes   magic
//   u64 LE    header length in bytes
//   ...       header (UTF-8 JSON)
//   ...       raw little-endian f64 blocks, sizes given by the header
//
// All writers go through write_file_atomic (write to a temp file, then rename).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "subgd/error.hpp"

namespace subgd {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void append_f64_le(std::string& out, std::span<const double> values) {
    out.reserve(out.size() + values.size() * 8);
    for (double x : values) append_u64_le(out, std::bit_cast<std::uint64_t>(x));
}

/// Sequential reader over an in-memory byte buffer; every read is bounds-checked.
class ByteReader {
public:
    ByteReader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    std::string take(std::size_t n) {
        require(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::uint64_t u64() {
        require(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::uint32_t u32() {
        require(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::vector<double> f64(std::size_t count) {
        if (count > remaining() / 8) fail("truncated f64 block");
        std::vector<double> out(count);
        for (auto& x : out) x = std::bit_cast<double>(u64());
        return out;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

    [[noreturn]] void fail(const std::string& msg) const { throw CorruptFileError(what_ + ": " + msg); }

private:
    void require(std::size_t n) const {
        if (n > remaining()) fail("unexpected end of file");
    }

    std::string bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline void write_json_atomic(const fs::path& path, const json& doc) { write_file_atomic(path, doc.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw CorruptFileError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

struct FramedFile {
    json header;
    std::string payload; // raw f64 blocks
};

inline std::string encode_framed(const char (&magic)[9], const json& header, std::span<const std::span<const double>> blocks) {
    std::string out(magic, 8);
    const std::string h = header.dump();
    append_u64_le(out, h.size());
    out += h;
    for (const auto& b : blocks) append_f64_le(out, b);
    return out;
}

/// Reads magic + header; leaves the reader positioned at the first f64 block.
inline json decode_framed_header(ByteReader& reader, const char (&magic)[9]) {
    if (reader.take(8) != std::string(magic, 8)) reader.fail("bad magic (expected " + std::string(magic, 8) + ")");
    const auto len = reader.u64();
    if (len > reader.remaining()) reader.fail("header length exceeds file size");
    try {
        return json::parse(reader.take(static_cast<std::size_t>(len)));
    } catch (const json::parse_error& e) {
        reader.fail(std::string("header is not valid JSON: ") + e.what());
    }
}

} // namespace subgd
