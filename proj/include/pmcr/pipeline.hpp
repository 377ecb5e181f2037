#pragma once

// One episode through the full pipeline: encode, prototype correlation
// matching, class-relation reasoning, prototype classifier, losses.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/config.hpp"
#include "pmcr/crr.hpp"
#include "pmcr/encoder.hpp"
#include "pmcr/episode.hpp"
#include "pmcr/loss_head.hpp"
#include "pmcr/metrics.hpp"
#include "pmcr/model.hpp"
#include "pmcr/pcm.hpp"

namespace pmcr {

struct RunFlags {
    bool pcm_on = true;
    bool crr_on = true;
    bool dcl_on = true;
    bool training = true;  // binds parameters as differentiable leaves
    ad::Upsample upsample = ad::Upsample::Nearest;
};

struct CrrVars {
    ad::Var W_q, W_s1, W_s2, W_g, W_c, W_c1, W_c2, Q_k;
};

struct ModelVars {
    encoder::EncoderVars enc;
    pcm::PcmParamVars pcm;
    CrrVars crr;
    std::vector<ad::Var> ordered;  // aligned with parameters(model)
};

inline ModelVars bind_model(ad::Graph& g, Model& m, bool trainable) {
    ModelVars v;
    v.enc = encoder::bind(g, m.enc, trainable);
    for (const auto& l : v.enc.layers) {
        v.ordered.push_back(l.kernel);
        v.ordered.push_back(l.bias);
    }
    v.pcm = pcm::bind(g, m.pcm_params, trainable);
    for (const auto* bank : {&v.pcm.support_bank, &v.pcm.query_bank, &v.pcm.joint_bank})
        for (const auto& w : *bank) {
            v.ordered.push_back(w.W_q);
            v.ordered.push_back(w.W_k);
            v.ordered.push_back(w.W_v);
        }
    v.crr = CrrVars{g.leaf(m.crr_params.W_q, trainable),  g.leaf(m.crr_params.W_s1, trainable),
                    g.leaf(m.crr_params.W_s2, trainable), g.leaf(m.crr_params.W_g, trainable),
                    g.leaf(m.crr_params.W_c, trainable),  g.leaf(m.crr_params.W_c1, trainable),
                    g.leaf(m.crr_params.W_c2, trainable), g.leaf(m.crr_params.Q_k, trainable)};
    for (const ad::Var& t : {v.crr.W_q, v.crr.W_s1, v.crr.W_s2, v.crr.W_g, v.crr.W_c, v.crr.W_c1,
                             v.crr.W_c2, v.crr.Q_k})
        v.ordered.push_back(t);
    return v;
}

struct EpisodeResult {
    loss_head::ProbabilityMap prob;  // H x W x 2, classes [background, novel]
    Mask predicted;                  // labels {0, class_id}
    double loss_se = 0.0, loss_be = 0.0, loss_dc = 0.0, loss_all = 0.0;
    double dice = std::nan(""), miou = std::nan("");
    bool has_loss = false;
    ad::Var loss_var;  // valid when has_loss
    std::vector<crr::SuperpixelCentroids> new_centroids;
    EpisodeLog log;
};

// Feature-resolution foreground of one support slice. Throws
// EmptyForeground when the mask vanishes at feature resolution; callers
// skip the episode.
inline std::vector<std::size_t> support_fg_indices(const Mask& mask_feat) {
    auto idx = pcm::foreground_indices(mask_feat);
    if (idx.empty()) throw EmptyForeground("support mask empty at feature resolution");
    return idx;
}

inline EpisodeResult run_episode(ad::Graph& g, const Episode& e, Model& model, ModelVars& vars,
                                 const RunFlags& flags) {
    e.validate();
    const Hyperparams& hp = model.hp;
    const std::size_t H = e.query_image.dim(0), W = e.query_image.dim(1);
    const std::size_t K = e.support.size();
    EpisodeResult out;

    // ---- encode ----
    ad::Var query_feat = encoder::encode(g.constant(encoder::image_to_chw(e.query_image)), vars.enc);
    const std::size_t h_l = query_feat.val().dim(1), w_l = query_feat.val().dim(2);
    const std::size_t hw = h_l * w_l;
    ad::Var query2d = ad::reshape(query_feat, {hp.D_l, hw});

    std::vector<ad::Var> support_feats, support_fg;
    std::vector<Mask> support_masks_feat;
    std::vector<std::vector<std::size_t>> fg_indices;
    for (const auto& s : e.support) {
        ad::Var f = encoder::encode(g.constant(encoder::image_to_chw(s.image)), vars.enc);
        support_feats.push_back(f);
        Mask mf = downsample_mask(s.mask, h_l, w_l);
        fg_indices.push_back(support_fg_indices(mf));
        support_masks_feat.push_back(std::move(mf));
        support_fg.push_back(
            pcm::foreground_extract(ad::reshape(f, {hp.D_l, hw}), fg_indices.back()));
    }

    // ---- prototype correlation matching ----
    ad::Var loss_be = g.constant(Tensor::scalar(0.0));
    if (flags.pcm_on) {
        std::vector<ad::Var> matched, proto_s_list, proto_q_list;
        for (std::size_t i = 0; i < K; ++i) {
            Tensor W_i = matmul(transpose(query2d.val()), support_fg[i].val());
            pcm::ProtoVars protos =
                pcm::init_prototypes(g.constant(W_i), query2d, support_fg[i], hp.S, &out.log);
            pcm::PropagatedVars prop =
                pcm::propagate_task_info(protos.query, protos.support, query2d, support_fg[i],
                                         vars.pcm);
            ad::Var M_b = ad::matmul(prop.support, ad::transpose(prop.query));
            std::vector<double> u =
                pcm::marginals_from_similarity(protos.support.val(), support_fg[i].val());
            std::vector<double> v =
                pcm::marginals_from_similarity(protos.query.val(), query2d.val());
            pcm::SinkhornOptions opt;
            opt.mu = hp.mu;
            opt.max_iters = hp.sinkhorn_iters;
            opt.tol = hp.sinkhorn_tol;
            pcm::TransportPlan plan = pcm::sinkhorn(M_b.val(), u, v, opt);
            matched.push_back(pcm::prototype_match(M_b, plan));
            proto_s_list.push_back(protos.support);
            proto_q_list.push_back(protos.query);
        }
        loss_be = pcm::prototype_enhancement_loss(matched, proto_s_list, proto_q_list);
    }

    // ---- class-relation reasoning / query re-encoding ----
    ad::Var query_final = query_feat;
    if (flags.crr_on) {
        std::vector<ad::Var> centroid_vars;
        std::vector<int> centroid_classes;
        for (std::size_t i = 0; i < K; ++i) {
            const std::size_t n_s =
                crr::superpixel_count(fg_indices[i].size(), hp.G, hp.N_s_max);
            crr::SlicVars slic = crr::masked_slic(support_fg[i], n_s, hp.slic_iters, &out.log);
            centroid_vars.push_back(slic.centroids);
            centroid_classes.push_back(e.novel_class_id);
            out.new_centroids.push_back({slic.centroids.val(), e.novel_class_id});
        }
        std::vector<int> all_classes(model.base_classes.begin(), model.base_classes.end());
        if (!model.base_classes.contains(e.novel_class_id))
            all_classes.push_back(e.novel_class_id);
        crr::BagVars bags = crr::build_bags(centroid_vars, centroid_classes, model.memory,
                                            all_classes, query2d, vars.crr.W_q, &out.log);
        ad::Var edges = crr::relation_edges(bags.nodes, vars.crr.W_s1, vars.crr.W_s2);
        ad::Var propagated = crr::graph_propagate(bags.nodes, edges, vars.crr.W_g);
        ad::Var attention = crr::kernel_attention(propagated, vars.crr.W_c, vars.crr.W_c1,
                                                  vars.crr.W_c2, hp.n1, hp.n2);
        query_final = crr::refine_and_encode(query_feat, vars.crr.Q_k, attention);
    } else {
        query_final = ad::conv2d(query_feat, vars.crr.Q_k, 1, (hp.n1 - 1) / 2);
    }

    // ---- classifier ----
    const std::vector<int> classes{0, e.novel_class_id};
    loss_head::ClassifierConfig ccfg;
    ccfg.upsample = flags.upsample;
    ad::Var prob_chw = loss_head::prototype_classifier_probs(query_final, support_feats,
                                                             support_masks_feat, classes, ccfg, H,
                                                             W);

    // value outputs
    const Tensor& P = prob_chw.val();
    Tensor hwc({H, W, classes.size()});
    Mask predicted(H, W);
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            std::size_t best = 0;
            for (std::size_t c = 0; c < classes.size(); ++c) {
                hwc(i, j, c) = P(c, i, j);
                if (P(c, i, j) > P(best, i, j)) best = c;
            }
            predicted(i, j) = std::uint8_t(classes[best]);
        }
    out.prob = {hwc};
    out.predicted = predicted;

    // ---- losses and mask metrics ----
    if (e.query_mask) {
        Mask gt_binary(H, W);
        for (std::size_t i = 0; i < gt_binary.numel(); ++i)
            gt_binary.data()[i] =
                int(e.query_mask->data()[i]) == e.novel_class_id ? e.query_mask->data()[i] : 0;
        Tensor G_hwc = loss_head::one_hot(gt_binary, classes).G;
        Tensor G_chw({classes.size(), H, W});
        for (std::size_t c = 0; c < classes.size(); ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) G_chw(c, i, j) = G_hwc(i, j, c);
        ad::Var G = g.constant(G_chw);

        ad::Var se = loss_head::ce_loss(prob_chw, G);
        ad::Var dc = loss_head::dice_loss(prob_chw, G);
        ad::Var be_term = flags.pcm_on ? loss_be : g.constant(Tensor::scalar(0.0));
        ad::Var dc_term = flags.dcl_on ? dc : g.constant(Tensor::scalar(0.0));
        out.loss_var = loss_head::total_loss(se, be_term, dc_term, hp.lambda1, hp.lambda2);
        out.has_loss = true;
        out.loss_se = se.val()[0];
        out.loss_be = loss_be.val()[0];
        out.loss_dc = dc.val()[0];
        out.loss_all = out.loss_var.val()[0];
        out.dice = dice_overlap(predicted, gt_binary, e.novel_class_id);
        out.miou = miou(predicted, gt_binary, std::size_t(e.novel_class_id) + 1);
    }
    return out;
}

// Inference wrapper used by the volumetric protocol: one support slice, no
// query mask. An empty support foreground yields an all-background mask.
inline Mask predict_mask(Model& model, const SupportPair& support, const Tensor& query_image,
                         int class_id, const RunFlags& base_flags) {
    Episode e;
    e.support = {support};
    e.query_image = query_image;
    e.novel_class_id = class_id;
    RunFlags flags = base_flags;
    flags.training = false;
    try {
        ad::Graph g;
        ModelVars vars = bind_model(g, model, false);
        return run_episode(g, e, model, vars, flags).predicted;
    } catch (const EmptyForeground&) {
        return Mask(query_image.dim(0), query_image.dim(1));
    }
}

}  // namespace pmcr
