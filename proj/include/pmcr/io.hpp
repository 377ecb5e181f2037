#pragma once

// .pmt tensor file format and plain-PGM heatmap dumps.
//
// .pmt layout: magic "PMT1" | 1 byte dtype (0 = f32 LE, 1 = u8) |
// 1 byte rank | rank x u32 LE dims | row-major payload.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr {

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xFF));
    out.push_back(char((v >> 8) & 0xFF));
    out.push_back(char((v >> 16) & 0xFF));
    out.push_back(char((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

inline std::uint32_t f32_bits(float f) { return std::bit_cast<std::uint32_t>(f); }
inline float bits_f32(std::uint32_t b) { return std::bit_cast<float>(b); }

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TruncatedPayload("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw TruncatedPayload("cannot open for write: " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw TruncatedPayload("short write: " + path);
}

}  // namespace detail

inline constexpr std::uint8_t kPmtF32 = 0;
inline constexpr std::uint8_t kPmtU8 = 1;

inline std::string encode_pmt(const Tensor& t) {
    std::string out = "PMT1";
    out.push_back(char(kPmtF32));
    out.push_back(char(t.rank()));
    for (std::size_t d : t.dims()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw DimOverflow("dim exceeds u32");
        detail::put_u32_le(out, std::uint32_t(d));
    }
    for (double v : t.data()) detail::put_u32_le(out, detail::f32_bits(float(v)));
    return out;
}

inline std::string encode_pmt(const Mask& m) {
    std::string out = "PMT1";
    out.push_back(char(kPmtU8));
    out.push_back(char(2));
    detail::put_u32_le(out, std::uint32_t(m.height()));
    detail::put_u32_le(out, std::uint32_t(m.width()));
    for (std::uint8_t v : m.data()) out.push_back(char(v));
    return out;
}

struct PmtHeader {
    std::uint8_t dtype;
    Dims dims;
    std::size_t payload_offset;
};

inline PmtHeader decode_pmt_header(const std::string& bytes) {
    if (bytes.size() < 6) throw MalformedHeader("file shorter than header");
    if (bytes.compare(0, 4, "PMT1") != 0) throw MalformedHeader("bad magic");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint8_t dtype = p[4];
    if (dtype != kPmtF32 && dtype != kPmtU8) throw MalformedHeader("unknown dtype");
    std::size_t rank = p[5];
    if (rank > 8) throw MalformedHeader("rank > 8");
    if (bytes.size() < 6 + 4 * rank) throw TruncatedPayload("header cut short");
    Dims dims(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        dims[i] = detail::get_u32_le(p + 6 + 4 * i);
        if (dims[i] == 0) throw DimOverflow("zero dim");
    }
    dims_numel(dims);  // throws DimOverflow on absurd sizes
    return {dtype, std::move(dims), 6 + 4 * rank};
}

inline Tensor decode_pmt_tensor(const std::string& bytes) {
    PmtHeader h = decode_pmt_header(bytes);
    if (h.dtype != kPmtF32) throw MalformedHeader("expected f32 tensor");
    std::size_t n = dims_numel(h.dims);
    if (bytes.size() != h.payload_offset + 4 * n) throw TruncatedPayload("payload size mismatch");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = double(detail::bits_f32(detail::get_u32_le(p + 4 * i)));
    return Tensor(h.dims, std::move(data));
}

inline Mask decode_pmt_mask(const std::string& bytes) {
    PmtHeader h = decode_pmt_header(bytes);
    if (h.dtype != kPmtU8 || h.dims.size() != 2) throw MalformedHeader("expected rank-2 u8 mask");
    std::size_t n = dims_numel(h.dims);
    if (bytes.size() != h.payload_offset + n) throw TruncatedPayload("payload size mismatch");
    std::vector<std::uint8_t> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::uint8_t(bytes[h.payload_offset + i]);
    return Mask(h.dims[0], h.dims[1], std::move(data));
}

inline void write_tensor(const std::string& path, const Tensor& t) {
    detail::write_file_bytes(path, encode_pmt(t));
}
inline Tensor read_tensor(const std::string& path) {
    return decode_pmt_tensor(detail::read_file_bytes(path));
}
inline void write_mask(const std::string& path, const Mask& m) {
    detail::write_file_bytes(path, encode_pmt(m));
}
inline Mask read_mask(const std::string& path) {
    return decode_pmt_mask(detail::read_file_bytes(path));
}

// Plain (P2) PGM dump of a rank-2 tensor, min-max normalized to 0..255.
inline void write_pgm(const std::string& path, const Tensor& t) {
    if (t.rank() != 2) throw DimMismatch("write_pgm expects rank-2");
    double lo = t[0], hi = t[0];
    for (double v : t.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = (hi > lo) ? (hi - lo) : 1.0;
    std::string out = "P2\n" + std::to_string(t.cols()) + " " + std::to_string(t.rows()) + "\n255\n";
    for (std::size_t i = 0; i < t.rows(); ++i) {
        for (std::size_t j = 0; j < t.cols(); ++j) {
            int g = int(255.0 * (t(i, j) - lo) / span + 0.5);
            out += std::to_string(g);
            out.push_back(j + 1 == t.cols() ? '\n' : ' ');
        }
    }
    detail::write_file_bytes(path, out);
}

}  // namespace pmcr
