#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "pmcr/encoder.hpp"
#include "pmcr/grad_check.hpp"
#include "pmcr/rng.hpp"

using namespace pmcr;
using encoder::EncoderParams;

TEST_CASE("zero image with zero biases maps to zero features") {
    Rng rng(601);
    EncoderParams p = encoder::init_encoder(8, rng);
    Tensor img = Tensor::zeros({16, 16, 3});
    Tensor feat = encoder::encode(img, p);
    REQUIRE(feat.dims() == Dims{8, 4, 4});
    for (double v : feat.data()) REQUIRE(v == 0.0);
}

TEST_CASE("stride product 4 on 64x64 gives 16x16 output") {
    Rng rng(607);
    EncoderParams p = encoder::init_encoder(32, rng);
    REQUIRE(p.total_stride() == 4);
    Tensor img({64, 64, 3});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0, 1);
    Tensor feat = encoder::encode(img, p);
    REQUIRE(feat.dims() == Dims{32, 16, 16});

    Tensor odd({62, 62, 3});
    REQUIRE_THROWS_AS(encoder::encode(odd, p), IndivisibleDims);
}

TEST_CASE("two-layer toy config matches nested-loop convolution oracle") {
    Rng rng(613);
    // strides 2,1 so an 8x8 image maps to 4x4
    EncoderParams p;
    {
        encoder::ConvLayer l1, l2;
        l1.kernel = Tensor({2, 3, 3, 3});
        l1.bias = Tensor({2});
        l1.stride = 2;
        l2.kernel = Tensor({3, 2, 3, 3});
        l2.bias = Tensor({3});
        l2.stride = 1;
        for (std::size_t i = 0; i < l1.kernel.numel(); ++i) l1.kernel[i] = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < l2.kernel.numel(); ++i) l2.kernel[i] = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < 2; ++i) l1.bias[i] = rng.uniform(-0.1, 0.1);
        for (std::size_t i = 0; i < 3; ++i) l2.bias[i] = rng.uniform(-0.1, 0.1);
        p.layers = {l1, l2};
        p.leaky_slope = 0.1;
    }
    Tensor img({8, 8, 3});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(-1, 1);
    Tensor got = encoder::encode(img, p);

    // oracle
    Tensor x = encoder::image_to_chw(img);
    auto conv = [](const Tensor& in, const Tensor& k, const Tensor& b, std::size_t stride) {
        const std::size_t Cin = in.dim(0), H = in.dim(1), W = in.dim(2);
        const std::size_t Cout = k.dim(0), kh = k.dim(2);
        const std::size_t pad = (kh - 1) / 2;
        const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kh) / stride + 1;
        Tensor out({Cout, Ho, Wo});
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kh; ++v) {
                                long ih = long(oh * stride + u) - long(pad);
                                long iw = long(ow * stride + v) - long(pad);
                                if (ih < 0 || ih >= long(H) || iw < 0 || iw >= long(W)) continue;
                                acc += in(ci, ih, iw) * k(co, ci, u, v);
                            }
                    out(co, oh, ow) = acc;
                }
        return out;
    };
    Tensor h = conv(x, p.layers[0].kernel, p.layers[0].bias, 2);
    for (std::size_t i = 0; i < h.numel(); ++i)
        if (h[i] < 0) h[i] *= 0.1;
    Tensor want = conv(h, p.layers[1].kernel, p.layers[1].bias, 1);
    REQUIRE(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("translation covariance on interior pixels") {
    Rng rng(617);
    EncoderParams p = encoder::init_encoder(6, rng, 4, 5);
    const std::size_t H = 32, W = 32, shift = p.total_stride();
    Tensor img({H, W, 3});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(-1, 1);

    Tensor shifted({H, W, 3});
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t c = 0; c < 3; ++c)
                shifted(i, j, c) = (i >= shift && j >= shift) ? img(i - shift, j - shift, c) : 0.0;

    Tensor a = encoder::encode(img, p);
    Tensor b = encoder::encode(shifted, p);
    // interior: stay away from borders by the receptive-field footprint
    const std::size_t margin = 3;
    for (std::size_t c = 0; c < a.dim(0); ++c)
        for (std::size_t i = margin; i + margin < a.dim(1) - 1; ++i)
            for (std::size_t j = margin; j + margin < a.dim(2) - 1; ++j)
                REQUIRE(std::abs(b(c, i + 1, j + 1) - a(c, i, j)) < 1e-9);
}

TEST_CASE("grad_check over all encoder parameters") {
    Rng rng(619);
    for (int trial = 0; trial < 5; ++trial) {
        EncoderParams p = encoder::init_encoder(3, rng, 2, 2);
        Tensor img({8, 8, 3});
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(-1, 1);
        Tensor chw = encoder::image_to_chw(img);
        NamedTensors in = {{"k0", p.layers[0].kernel}, {"b0", p.layers[0].bias},
                           {"k1", p.layers[1].kernel}, {"b1", p.layers[1].bias},
                           {"k2", p.layers[2].kernel}, {"b2", p.layers[2].bias},
                           {"img", chw}};
        auto r = grad_check(
            [&](ad::Graph& g, const std::vector<ad::Var>& v) {
                encoder::EncoderVars ev;
                ev.leaky_slope = p.leaky_slope;
                ev.layers = {{v[0], v[1], 2}, {v[2], v[3], 2}, {v[4], v[5], 1}};
                return ad::sum_sq(encoder::encode(v[6], ev));
            },
            in);
        REQUIRE(r.max_rel_error <= 1e-3);
    }
}
