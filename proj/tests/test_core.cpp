#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "pmcr/io.hpp"
#include "pmcr/rng.hpp"
#include "pmcr/tensor.hpp"

using namespace pmcr;

namespace {

// Straight-line byte builder, independent of encode_pmt. Written first; the
// serializer has to match these bytes, not the other way around.
std::string oracle_pmt_bytes_f32(const std::vector<std::uint32_t>& dims,
                                 const std::vector<float>& payload) {
    std::string b;
    b += "PMT1";
    b.push_back('\x00');  // dtype f32
    b.push_back(char(dims.size()));
    auto le32 = [&](std::uint32_t v) {
        b.push_back(char(v & 0xFF));
        b.push_back(char((v >> 8) & 0xFF));
        b.push_back(char((v >> 16) & 0xFF));
        b.push_back(char((v >> 24) & 0xFF));
    };
    for (auto d : dims) le32(d);
    for (float f : payload) {
        std::uint32_t u;
        static_assert(sizeof u == sizeof f);
        std::memcpy(&u, &f, 4);
        le32(u);
    }
    return b;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

Tensor quantize32(const Tensor& t) {
    Tensor out = t;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = double(float(out[i]));
    return out;
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    REQUIRE(t.numel() == 6);
    t(1, 2) = 5.0;
    REQUIRE(t[5] == 5.0);
    REQUIRE_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), DimMismatch);
    REQUIRE_THROWS_AS(Tensor({0, 3}), DimOverflow);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {5, 6, 7, 8});
    REQUIRE(matmul(a, b)(0, 0) == 19.0);
    REQUIRE(matmul(a, b)(1, 1) == 50.0);
    REQUIRE(transpose(a)(0, 1) == 3.0);
}

TEST_CASE("pmt roundtrip matches byte-builder oracle") {
    Rng rng(7);
    Tensor t({4, 4, 4});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-10.0, 10.0);

    std::vector<float> payload;
    for (double v : t.data()) payload.push_back(float(v));
    std::string expected = oracle_pmt_bytes_f32({4, 4, 4}, payload);
    REQUIRE(encode_pmt(t) == expected);

    auto path = tmp_path("pmcr_roundtrip.pmt");
    write_tensor(path, t);
    Tensor back = read_tensor(path);
    REQUIRE(back.dims() == t.dims());
    REQUIRE(max_abs_diff(back, quantize32(t)) == 0.0);
}

TEST_CASE("pmt rank-0 scalar and zero tensor") {
    auto path = tmp_path("pmcr_scalar.pmt");
    write_tensor(path, Tensor::scalar(3.0));
    Tensor s = read_tensor(path);
    REQUIRE(s.rank() == 0);
    REQUIRE(s[0] == 3.0);

    write_tensor(path, Tensor::zeros({2, 3}));
    Tensor z = read_tensor(path);
    REQUIRE(z.dims() == Dims{2, 3});
    for (double v : z.data()) REQUIRE(v == 0.0);
}

TEST_CASE("pmt roundtrip property over random dims up to rank 4") {
    Rng rng(123);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t rank = rng.uniform_int(5);
        Dims dims;
        for (std::size_t r = 0; r < rank; ++r) dims.push_back(1 + rng.uniform_int(5));
        Tensor t(dims);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1e6, 1e6);
        Tensor back = decode_pmt_tensor(encode_pmt(t));
        REQUIRE(back.dims() == t.dims());
        REQUIRE(max_abs_diff(back, quantize32(t)) == 0.0);
    }
}

TEST_CASE("pmt malformed inputs") {
    Tensor t({2, 2}, {1, 2, 3, 4});
    std::string good = encode_pmt(t);

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    REQUIRE_THROWS_AS(decode_pmt_tensor(bad_magic), MalformedHeader);

    std::string truncated = good.substr(0, good.size() - 3);
    REQUIRE_THROWS_AS(decode_pmt_tensor(truncated), TruncatedPayload);

    // absurd dim: claim a 2^31 x 2^31 tensor with no payload
    std::string overflow = good.substr(0, 6);
    for (int i = 0; i < 2; ++i) {
        overflow.push_back('\x00');
        overflow.push_back('\x00');
        overflow.push_back('\x00');
        overflow.push_back('\x80');
    }
    REQUIRE_THROWS_AS(decode_pmt_tensor(overflow), DimOverflow);
}

TEST_CASE("mask io uses dtype u8") {
    Mask m(2, 3, {0, 1, 2, 0, 1, 2});
    std::string bytes = encode_pmt(m);
    REQUIRE(bytes[4] == '\x01');
    Mask back = decode_pmt_mask(bytes);
    REQUIRE(back == m);
}

TEST_CASE("rng reproducibility: equal seeds give equal first 1e4 draws") {
    Rng a(42), b(42);
    for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(43);
    REQUIRE(Rng(42).next_u64() != c.next_u64());
}

TEST_CASE("rng state restore resumes the stream") {
    Rng a(9);
    a.uniform();
    a.uniform();
    Rng b(0);
    b.restore(a.seed(), a.state());
    REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("downsample_mask nearest-neighbor cases") {
    // constant 2x2 -> 1x1
    Mask ones(2, 2, {1, 1, 1, 1});
    Mask d = downsample_mask(ones, 1, 1);
    REQUIRE(d(0, 0) == 1);

    // 4x4 with top-left 2x2 foreground -> [[1,0],[0,0]] by hand enumeration:
    // target pixel (i,j) samples source (2i+1, 2j+1)
    Mask m(4, 4);
    m(0, 0) = m(0, 1) = m(1, 0) = m(1, 1) = 1;
    Mask d2 = downsample_mask(m, 2, 2);
    REQUIRE(d2(0, 0) == 1);
    REQUIRE(d2(0, 1) == 0);
    REQUIRE(d2(1, 0) == 0);
    REQUIRE(d2(1, 1) == 0);

    // identity at equal dims, and idempotence
    Mask same = downsample_mask(m, 4, 4);
    REQUIRE(same == m);
    REQUIRE(downsample_mask(same, 4, 4) == same);

    REQUIRE_THROWS_AS(downsample_mask(m, 0, 2), ZeroTargetDim);
}

TEST_CASE("pgm dump is plain ascii") {
    Tensor t({2, 2}, {0.0, 1.0, 0.5, 0.25});
    auto path = tmp_path("pmcr_dump.pgm");
    write_pgm(path, t);
    std::ifstream in(path);
    std::string magic;
    in >> magic;
    REQUIRE(magic == "P2");
}
