#pragma once

// Episode data model and the hyperparameter block shared by all modules.

#include <cstdint>
#include <optional>
#include <vector>

#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr {

struct SupportPair {
    Tensor image;  // H x W x 3
    Mask mask;     // H x W
};

struct Episode {
    std::vector<SupportPair> support;
    Tensor query_image;
    std::optional<Mask> query_mask;  // present during training
    int novel_class_id = 0;

    void validate() const {
        if (support.empty()) throw InvalidSpec("episode needs K >= 1 support pairs");
        if (query_image.rank() != 3 || query_image.dim(2) != 3)
            throw DimMismatch("query image must be H x W x 3");
        const std::size_t H = query_image.dim(0), W = query_image.dim(1);
        for (const auto& s : support) {
            if (s.image.rank() != 3 || s.image.dim(0) != H || s.image.dim(1) != W ||
                s.image.dim(2) != 3)
                throw DimMismatch("support image dims disagree with query");
            if (s.mask.height() != H || s.mask.width() != W)
                throw DimMismatch("support mask dims disagree");
        }
        if (query_mask && (query_mask->height() != H || query_mask->width() != W))
            throw DimMismatch("query mask dims disagree");
    }
};

struct Hyperparams {
    std::size_t S = 16;         // prototype count
    double mu = 0.1;            // entropy weight
    double lambda1 = 0.5;       // enhancement loss weight
    double lambda2 = 1.0;       // dice loss weight
    std::size_t H_heads = 1;
    std::size_t D_l = 32;       // latent feature channels
    std::size_t d = 32;         // per-head dim, d * H_heads == D_l
    std::size_t D_u = 32;       // refined query channels
    std::size_t D_s = 64;       // relation-edge projection dim
    std::size_t G = 80;         // pixels per superpixel
    std::size_t N_s_max = 10;   // superpixel centroid cap
    std::size_t nu = 5;         // class memory capacity
    std::size_t N_q = 16;       // query bag descriptors
    std::size_t n1 = 3, n2 = 3; // refinement kernel size
    int slic_iters = 5;
    int sinkhorn_iters = 500;
    double sinkhorn_tol = 1e-7;
    double lr = 0.001;
    double lr_decay = 0.95;     // applied per 1000 iterations
    std::size_t P_chunks = 3;

    void validate() const {
        if (S == 0 || H_heads == 0 || D_l == 0 || d == 0 || D_u == 0 || D_s == 0 || G == 0 ||
            N_s_max == 0 || nu == 0 || N_q == 0 || n1 == 0 || n2 == 0 || P_chunks == 0)
            throw InvalidSpec("hyperparameters must be positive");
        if (mu <= 0.0) throw InvalidSpec("mu must be > 0");
        if (lambda1 < 0.0 || lambda2 < 0.0) throw InvalidSpec("lambda weights must be >= 0");
        if (slic_iters <= 0 || sinkhorn_iters <= 0 || sinkhorn_tol <= 0.0 || lr <= 0.0 ||
            lr_decay <= 0.0)
            throw InvalidSpec("iteration/step parameters must be positive");
        if (d * H_heads != D_l) throw InvalidSpec("d * H_heads must equal D_l");
    }
};

}  // namespace pmcr
