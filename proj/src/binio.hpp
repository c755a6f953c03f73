#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"

// Little-endian binary file helpers shared by the weight/UAP/DIMG formats.

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace duap {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw Error(ErrorCode::Format, "write failed");
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline void write_f32(std::ostream& out, float v) { write_bytes(out, &v, 4); }

inline void write_f32_array(std::ostream& out, const std::vector<double>& v) {
    std::vector<float> tmp(v.begin(), v.end());
    if (!tmp.empty()) write_bytes(out, tmp.data(), tmp.size() * 4);
}

inline void read_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw Error(ErrorCode::Format, std::string("truncated file while reading ") + what);
    }
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
    std::uint32_t v;
    read_bytes(in, &v, 4, what);
    return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
    std::uint64_t v;
    read_bytes(in, &v, 8, what);
    return v;
}

inline float read_f32(std::istream& in, const char* what) {
    float v;
    read_bytes(in, &v, 4, what);
    return v;
}

inline std::vector<double> read_f32_array(std::istream& in, std::size_t n, const char* what) {
    std::vector<float> tmp(n);
    if (n) read_bytes(in, tmp.data(), n * 4, what);
    return std::vector<double>(tmp.begin(), tmp.end());
}

inline void expect_magic(std::istream& in, const char* magic, const char* what) {
    char buf[4];
    read_bytes(in, buf, 4, what);
    if (std::string(buf, 4) != magic) {
        throw Error(ErrorCode::Format, std::string("bad magic for ") + what);
    }
}

}  // namespace duap
