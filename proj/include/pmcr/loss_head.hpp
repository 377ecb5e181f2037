#pragma once

// Prototype-based pixel classifier (local window pooling + cosine scores)
// and the three training losses.

#include <cmath>
#include <optional>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::loss_head {

struct ProbabilityMap {
    Tensor P;  // H x W x C, rows sum to 1 per pixel

    void validate() const {
        if (P.rank() != 3) throw DimMismatch("ProbabilityMap must be H x W x C");
        const std::size_t C = P.dim(2);
        for (std::size_t i = 0; i < P.dim(0); ++i)
            for (std::size_t j = 0; j < P.dim(1); ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    const double v = P(i, j, c);
                    if (v < -1e-12 || v > 1.0 + 1e-12) throw InvalidSpec("probability out of [0,1]");
                    s += v;
                }
                if (std::abs(s - 1.0) > 1e-6) throw InvalidSpec("pixel probabilities must sum to 1");
            }
    }
};

struct OneHotLabels {
    Tensor G;  // H x W x C of {0,1}, exactly one 1 per pixel
};

// Mask labels -> one-hot planes in the order of `classes`.
inline OneHotLabels one_hot(const Mask& m, const std::vector<int>& classes) {
    Tensor G({m.height(), m.width(), classes.size()});
    for (std::size_t i = 0; i < m.height(); ++i)
        for (std::size_t j = 0; j < m.width(); ++j) {
            bool hit = false;
            for (std::size_t c = 0; c < classes.size(); ++c)
                if (int(m(i, j)) == classes[c]) {
                    G(i, j, c) = 1.0;
                    hit = true;
                    break;
                }
            if (!hit) throw InvalidSpec("mask label " + std::to_string(m(i, j)) +
                                        " not in the class list");
        }
    return {G};
}

struct ClassifierConfig {
    std::size_t window = 4;     // local pooling window at feature resolution
    double alpha = 20.0;        // cosine score multiplier
    ad::Upsample upsample = ad::Upsample::Nearest;
};

namespace detail {

// Averaging matrix whose columns pool one local prototype each: windows of
// the class mask plus one global masked average. Empty when the class is
// absent from this support.
inline Tensor pooling_matrix(const Mask& m, int cls, std::size_t window) {
    const std::size_t H = m.height(), W = m.width();
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t wi = 0; wi < H; wi += window)
        for (std::size_t wj = 0; wj < W; wj += window) {
            std::vector<std::size_t> members;
            for (std::size_t i = wi; i < std::min(H, wi + window); ++i)
                for (std::size_t j = wj; j < std::min(W, wj + window); ++j)
                    if (int(m(i, j)) == cls) members.push_back(i * W + j);
            if (!members.empty()) groups.push_back(std::move(members));
        }
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i < H * W; ++i)
        if (int(m.data()[i]) == cls) all.push_back(i);
    if (all.empty()) return Tensor({1, 1});  // sentinel, caller checks count below
    groups.push_back(std::move(all));

    Tensor A({H * W, groups.size()});
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t idx : groups[g]) A(idx, g) = 1.0 / double(groups[g].size());
    return A;
}

inline bool class_present(const Mask& m, int cls) {
    for (std::uint8_t v : m.data())
        if (int(v) == cls) return true;
    return false;
}

}  // namespace detail

// Per-pixel class probabilities at feature resolution (C x H_l W_l).
// Score of class c = alpha * max over c's pooled prototypes of the cosine
// similarity; classes absent from every support are pinned to a -1e30
// logit, which removes them from the softmax.
inline ad::Var prototype_classifier_logits(ad::Var query_features,
                                           const std::vector<ad::Var>& support_features,
                                           const std::vector<Mask>& support_masks,
                                           const std::vector<int>& classes,
                                           const ClassifierConfig& cfg) {
    if (support_features.empty() || support_features.size() != support_masks.size())
        throw InvalidSpec("classifier needs matching support features and masks");
    if (cfg.alpha <= 0.0) throw InvalidSpec("classifier alpha must be > 0");
    const Tensor& Q = query_features.val();
    if (Q.rank() != 3) throw DimMismatch("query features must be D x H x W");
    const std::size_t HW = Q.dim(1) * Q.dim(2);
    ad::Graph& g = *query_features.graph();
    ad::Var queryN = ad::l2_normalize_cols(ad::reshape(query_features, {Q.dim(0), HW}));

    std::vector<ad::Var> class_rows;
    bool any_present = false;
    for (int cls : classes) {
        std::vector<ad::Var> proto_parts;
        for (std::size_t s = 0; s < support_features.size(); ++s) {
            const Tensor& F = support_features[s].val();
            if (F.rank() != 3 || F.dim(1) != support_masks[s].height() ||
                F.dim(2) != support_masks[s].width())
                throw DimMismatch("support features and mask resolutions disagree");
            if (!detail::class_present(support_masks[s], cls)) continue;
            Tensor pool = detail::pooling_matrix(support_masks[s], cls, cfg.window);
            ad::Var flat = ad::reshape(support_features[s], {F.dim(0), F.dim(1) * F.dim(2)});
            proto_parts.push_back(ad::matmul(flat, g.constant(pool)));
        }
        if (proto_parts.empty()) {
            class_rows.push_back(g.constant(Tensor::full({HW}, -1e30)));
            continue;
        }
        any_present = true;
        ad::Var protos = ad::l2_normalize_cols(ad::concat_cols(proto_parts));
        ad::Var sims = ad::matmul(ad::transpose(protos), queryN);  // P x HW
        class_rows.push_back(ad::scale(ad::colwise_max(sims), cfg.alpha));
    }
    if (!any_present) throw EmptyForeground("no class present in any support mask");
    return ad::stack_rows(class_rows);  // C x HW
}

inline ad::Var prototype_classifier_probs(ad::Var query_features,
                                          const std::vector<ad::Var>& support_features,
                                          const std::vector<Mask>& support_masks,
                                          const std::vector<int>& classes,
                                          const ClassifierConfig& cfg, std::size_t out_h,
                                          std::size_t out_w) {
    ad::Var logits = prototype_classifier_logits(query_features, support_features, support_masks,
                                                 classes, cfg);
    ad::Var probs = ad::softmax_cols(logits);  // C x HW
    const Tensor& Q = query_features.val();
    ad::Var maps = ad::reshape(probs, {classes.size(), Q.dim(1), Q.dim(2)});
    return ad::upsample2d(maps, out_h, out_w, cfg.upsample);  // C x H x W
}

// Value-level classifier: masks arrive at image resolution and are aligned
// to the feature grid by nearest-neighbor downsampling.
inline ProbabilityMap prototype_classifier(const Tensor& query_features,
                                           const std::vector<Tensor>& support_features,
                                           const std::vector<Mask>& support_masks_fullres,
                                           const std::vector<int>& classes, double alpha,
                                           std::size_t out_h, std::size_t out_w,
                                           const ClassifierConfig& base = {}) {
    ClassifierConfig cfg = base;
    cfg.alpha = alpha;
    ad::Graph g;
    std::vector<ad::Var> sf;
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < support_features.size(); ++i) {
        sf.push_back(g.constant(support_features[i]));
        masks.push_back(downsample_mask(support_masks_fullres[i], support_features[i].dim(1),
                                        support_features[i].dim(2)));
    }
    Tensor chw = prototype_classifier_probs(g.constant(query_features), sf, masks, classes, cfg,
                                            out_h, out_w)
                     .val();
    Tensor hwc({out_h, out_w, classes.size()});
    for (std::size_t c = 0; c < classes.size(); ++c)
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) hwc(i, j, c) = chw(c, i, j);
    return {hwc};
}

// ---- losses ----

inline constexpr double kProbClamp = 1e-12;

// L_se = -(1 / numel) sum G log max(P, clamp)
inline ad::Var ce_loss(ad::Var P, ad::Var G) {
    if (P.val().dims() != G.val().dims()) throw DimMismatch("ce_loss shapes");
    ad::Var ll = ad::mul(G, ad::log_clamp(P, kProbClamp));
    return ad::scale(ad::sum_all(ll), -1.0 / double(P.val().numel()));
}

inline double ce_loss(const ProbabilityMap& P, const OneHotLabels& G) {
    ad::Graph g;
    return ce_loss(g.constant(P.P), g.constant(G.G)).val()[0];
}

// L_dc = 1 - 2 sum(P . G) / (sum P + sum G)
inline ad::Var dice_loss(ad::Var P, ad::Var G) {
    if (P.val().dims() != G.val().dims()) throw DimMismatch("dice_loss shapes");
    double denom_val = 0.0;
    for (double v : P.val().data()) denom_val += v;
    for (double v : G.val().data()) denom_val += v;
    if (denom_val <= 0.0) throw EmptyUnion("dice_loss: P and G both sum to zero");
    ad::Graph& g = *P.graph();
    ad::Var overlap = ad::scale(ad::sum_all(ad::mul(P, G)), 2.0);
    ad::Var denom = ad::add(ad::sum_all(P), ad::sum_all(G));
    return ad::sub(g.constant(Tensor::scalar(1.0)), ad::s_div(overlap, denom));
}

inline double dice_loss(const ProbabilityMap& P, const OneHotLabels& G) {
    ad::Graph g;
    return dice_loss(g.constant(P.P), g.constant(G.G)).val()[0];
}

// L_all = L_se + lambda1 L_be + lambda2 L_dc
inline ad::Var total_loss(ad::Var se, ad::Var be, ad::Var dc, double lambda1, double lambda2) {
    for (const ad::Var& v : {se, be, dc})
        if (!v.val().all_finite()) throw NonFiniteComponent("total_loss");
    return ad::add(se, ad::add(ad::scale(be, lambda1), ad::scale(dc, lambda2)));
}

inline double total_loss(double se, double be, double dc, double lambda1, double lambda2) {
    ad::Graph g;
    return total_loss(g.constant(Tensor::scalar(se)), g.constant(Tensor::scalar(be)),
                      g.constant(Tensor::scalar(dc)), lambda1, lambda2)
        .val()[0];
}

}  // namespace pmcr::loss_head
