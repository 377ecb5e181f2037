#pragma once

// Small trainable convolutional feature extractor: three layers with
// strides 2, 2, 1, leaky rectifier after the first two, linear output.

#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/errors.hpp"
#include "pmcr/rng.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::encoder {

struct ConvLayer {
    Tensor kernel;  // Cout x Cin x k x k
    Tensor bias;    // Cout
    std::size_t stride = 1;
};

struct EncoderParams {
    std::vector<ConvLayer> layers;
    double leaky_slope = 0.1;

    std::size_t total_stride() const {
        std::size_t s = 1;
        for (const auto& l : layers) s *= l.stride;
        return s;
    }
    std::size_t out_channels() const { return layers.back().kernel.dim(0); }
};

// Seeded uniform fan-in init, zero biases. Channels 3 -> mid1 -> mid2 -> D_l.
inline EncoderParams init_encoder(std::size_t D_l, Rng& rng, std::size_t mid1 = 12,
                                  std::size_t mid2 = 16) {
    auto make = [&](std::size_t cout, std::size_t cin, std::size_t stride) {
        ConvLayer l;
        l.kernel = Tensor({cout, cin, 3, 3});
        const double bound = 1.0 / std::sqrt(double(cin * 9));
        for (std::size_t i = 0; i < l.kernel.numel(); ++i) l.kernel[i] = rng.uniform(-bound, bound);
        l.bias = Tensor({cout});
        l.stride = stride;
        return l;
    };
    EncoderParams p;
    p.layers.push_back(make(mid1, 3, 2));
    p.layers.push_back(make(mid2, mid1, 2));
    p.layers.push_back(make(D_l, mid2, 1));
    return p;
}

struct EncoderVars {
    struct Layer {
        ad::Var kernel, bias;
        std::size_t stride;
    };
    std::vector<Layer> layers;
    double leaky_slope = 0.1;
};

inline EncoderVars bind(ad::Graph& g, const EncoderParams& p, bool trainable) {
    EncoderVars v;
    v.leaky_slope = p.leaky_slope;
    for (const auto& l : p.layers)
        v.layers.push_back({g.leaf(l.kernel, trainable), g.leaf(l.bias, trainable), l.stride});
    return v;
}

// image arrives channel-first (3 x H x W)
inline ad::Var encode(ad::Var image_chw, const EncoderVars& p) {
    const Tensor& X = image_chw.val();
    if (X.rank() != 3) throw DimMismatch("encode expects 3 x H x W");
    std::size_t stride_total = 1;
    for (const auto& l : p.layers) stride_total *= l.stride;
    if (X.dim(1) % stride_total != 0 || X.dim(2) % stride_total != 0)
        throw IndivisibleDims("image dims must be divisible by total stride " +
                              std::to_string(stride_total));
    ad::Var h = image_chw;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const auto& l = p.layers[i];
        const std::size_t k = l.kernel.val().dim(2);
        h = ad::bias_add(ad::conv2d(h, l.kernel, l.stride, (k - 1) / 2), l.bias);
        if (i + 1 < p.layers.size()) h = ad::leaky_relu(h, p.leaky_slope);
    }
    return h;
}

inline Tensor image_to_chw(const Tensor& image_hwc) {
    if (image_hwc.rank() != 3 || image_hwc.dim(2) != 3)
        throw DimMismatch("image must be H x W x 3");
    Tensor chw({3, image_hwc.dim(0), image_hwc.dim(1)});
    for (std::size_t i = 0; i < image_hwc.dim(0); ++i)
        for (std::size_t j = 0; j < image_hwc.dim(1); ++j)
            for (std::size_t c = 0; c < 3; ++c) chw(c, i, j) = image_hwc(i, j, c);
    return chw;
}

inline Tensor encode(const Tensor& image_hwc, const EncoderParams& p) {
    ad::Graph g;
    return encode(g.constant(image_to_chw(image_hwc)), bind(g, p, false)).val();
}

}  // namespace pmcr::encoder
