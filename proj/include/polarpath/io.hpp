#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "polarpath/core.hpp"

namespace polarpath::io {

// Little-endian binary primitives shared by all PL?? container formats.

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw TruncationError("truncated while reading " + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32_array(std::ostream& os, const float* data, std::size_t count) {
    // Assumes little-endian IEEE754 host; fine for the supported platforms.
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
}

inline void read_f32_array(std::istream& is, float* data, std::size_t count, const std::string& what) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 4));
    if (static_cast<std::size_t>(is.gcount()) != count * 4)
        throw TruncationError("truncated payload in " + what);
}

inline void expect_magic(std::istream& is, const char magic[4], const std::string& what) {
    char got[4] = {0, 0, 0, 0};
    is.read(got, 4);
    if (!is || std::memcmp(got, magic, 4) != 0)
        throw FormatError("bad magic in " + what + " (expected " + std::string(magic, 4) + ")");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open for reading: " + path.string());
    return is;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open for writing: " + path.string());
    os << text;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace polarpath::io
