#pragma once

// Prototype correlation matching: SVD-initialized prototypes, task
// propagation through sigmoid attention, entropic optimal transport over
// prototype similarities, and the enhancement loss.
//
// Gradient boundaries: the SVD factors and the transport plan are constants
// on the tape; everything else differentiates through to features and
// attention banks.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/episode.hpp"
#include "pmcr/errors.hpp"
#include "pmcr/linalg.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::pcm {

enum class Side { Query, Support };

struct PrototypeSet {
    Tensor protos;  // S x D_l
    Side side = Side::Query;
    std::optional<std::size_t> support_index;
};

// Attention banks of Eq. 3 (support), Eq. 4 (query) and Eq. 5 (joint),
// one AttentionWeights per head.
struct PcmParams {
    std::vector<AttentionWeights> support_bank, query_bank, joint_bank;
};

struct PcmParamVars {
    std::vector<AttentionVars> support_bank, query_bank, joint_bank;
};

// ---- foreground extraction ----

inline std::vector<std::size_t> foreground_indices(const Mask& m) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.numel(); ++i)
        if (m.data()[i] != 0) idx.push_back(i);
    return idx;
}

inline ad::Var foreground_extract(ad::Var features2d, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw EmptyForeground("support slice has no foreground at feature resolution");
    return ad::gather_cols(features2d, idx);
}

// features: D_l x H_l x W_l, mask at the same resolution
inline Tensor foreground_extract(const Tensor& features, const Mask& m) {
    if (features.rank() != 3) throw DimMismatch("foreground_extract expects D x H x W");
    if (features.dim(1) != m.height() || features.dim(2) != m.width())
        throw DimMismatch("mask resolution disagrees with features");
    ad::Graph g;
    auto flat = g.constant(features.reshaped({features.dim(0), m.numel()}));
    return foreground_extract(flat, foreground_indices(m)).val();
}

// ---- pixel similarity and SVD prototypes ----

inline ad::Var similarity_matrix(ad::Var query2d, ad::Var support_fg) {
    if (query2d.val().rows() != support_fg.val().rows())
        throw DimMismatch("similarity_matrix feature dims disagree");
    return ad::matmul(ad::transpose(query2d), support_fg);  // (H W) x N_i
}

inline Tensor similarity_matrix(const Tensor& query2d, const Tensor& support_fg) {
    ad::Graph g;
    return similarity_matrix(g.constant(query2d), g.constant(support_fg)).val();
}

struct ProtoVars {
    ad::Var query;    // S x D_l
    ad::Var support;  // S x D_l
    SvdFactors factors;
    std::size_t S_used = 0;
};

// F^bq = U^T (F^q)^T, F^bs = V (F^s)^T with (U, sigma, V) from the SVD of the
// similarity matrix. Requests for S beyond min(HW, N_i) degrade to the
// largest feasible rank and log the clamp.
inline ProtoVars init_prototypes(ad::Var similarity_const, ad::Var query2d, ad::Var support_fg,
                                 std::size_t S, EpisodeLog* log = nullptr) {
    const Tensor& W = similarity_const.val();
    std::size_t feasible = std::min(W.rows(), W.cols());
    std::size_t S_used = S;
    if (S > feasible) {
        S_used = feasible;
        if (log)
            log->note("init_prototypes: clamped S from " + std::to_string(S) + " to " +
                      std::to_string(S_used));
    }
    ProtoVars out;
    out.S_used = S_used;
    out.factors = truncated_svd(W, S_used);
    ad::Graph& g = *query2d.graph();
    ad::Var Ut = g.constant(transpose(out.factors.U));  // S x HW
    ad::Var V = g.constant(out.factors.V);              // S x N_i
    out.query = ad::matmul(Ut, ad::transpose(query2d));
    out.support = ad::matmul(V, ad::transpose(support_fg));
    return out;
}

inline std::pair<PrototypeSet, PrototypeSet> init_prototypes(const Tensor& W, const Tensor& query2d,
                                                             const Tensor& support_fg, std::size_t S,
                                                             EpisodeLog* log = nullptr) {
    ad::Graph g;
    ProtoVars v = init_prototypes(g.constant(W), g.constant(query2d), g.constant(support_fg), S, log);
    return {PrototypeSet{v.query.val(), Side::Query, std::nullopt},
            PrototypeSet{v.support.val(), Side::Support, std::nullopt}};
}

// ---- task information propagation (Eq. 3-5) ----

struct PropagatedVars {
    ad::Var support;  // S x D_l
    ad::Var query;    // S x D_l
};

inline PropagatedVars propagate_task_info(ad::Var proto_q, ad::Var proto_s, ad::Var query2d,
                                          ad::Var support_fg, const PcmParamVars& params) {
    const std::size_t S = proto_q.val().rows();
    if (proto_s.val().rows() != S) throw DimMismatch("prototype counts disagree");
    ad::Var query_pixels = ad::transpose(query2d);   // HW x D_l
    ad::Var support_pixels = ad::transpose(support_fg);  // N_i x D_l

    std::vector<ad::Var> heads_s, heads_q;
    for (const auto& w : params.support_bank) heads_s.push_back(sigmoid_attention(proto_s, support_pixels, w));
    for (const auto& w : params.query_bank) heads_q.push_back(sigmoid_attention(proto_q, query_pixels, w));
    ad::Var A_s = multi_head_concat(heads_s);
    ad::Var A_q = multi_head_concat(heads_q);

    ad::Var joint = ad::concat_rows(A_s, A_q);  // 2S x D_l, support rows first
    std::vector<ad::Var> heads_b;
    for (const auto& w : params.joint_bank) heads_b.push_back(sigmoid_attention(joint, joint, w));
    ad::Var mixed = multi_head_concat(heads_b);

    return {ad::slice_rows(mixed, 0, S), ad::slice_rows(mixed, S, 2 * S)};
}

inline PcmParamVars bind(ad::Graph& g, const PcmParams& p, bool trainable) {
    auto bind_bank = [&](const std::vector<AttentionWeights>& bank) {
        std::vector<AttentionVars> out;
        for (const auto& w : bank)
            out.push_back(AttentionVars{g.leaf(w.W_q, trainable), g.leaf(w.W_k, trainable),
                                        g.leaf(w.W_v, trainable)});
        return out;
    };
    return {bind_bank(p.support_bank), bind_bank(p.query_bank), bind_bank(p.joint_bank)};
}

inline std::pair<PrototypeSet, PrototypeSet> propagate_task_info(const PrototypeSet& proto_q,
                                                                 const PrototypeSet& proto_s,
                                                                 const Tensor& query2d,
                                                                 const Tensor& support_fg,
                                                                 const PcmParams& params) {
    ad::Graph g;
    PropagatedVars v = propagate_task_info(g.constant(proto_q.protos), g.constant(proto_s.protos),
                                           g.constant(query2d), g.constant(support_fg),
                                           bind(g, params, false));
    return {PrototypeSet{v.query.val(), Side::Query, proto_q.support_index},
            PrototypeSet{v.support.val(), Side::Support, proto_s.support_index}};
}

// ---- normalized similarity marginals (Eq. 7) ----

// Raw score per prototype is the summed dot product against all features;
// the normalization N is a softmax so every marginal entry stays positive.
inline ad::Var marginals_from_similarity(ad::Var protos, ad::Var features) {
    ad::Var scores = ad::rowsum_vec(ad::matmul(protos, features));  // length S
    if (!scores.val().all_finite()) throw DegenerateScores("non-finite prototype scores");
    return ad::softmax_vec(scores);
}

inline std::vector<double> marginals_from_similarity(const Tensor& protos, const Tensor& features) {
    ad::Graph g;
    Tensor t = marginals_from_similarity(g.constant(protos), g.constant(features)).val();
    return {t.data().begin(), t.data().end()};
}

// ---- entropic optimal transport ----

struct TransportPlan {
    Tensor T;  // S x S, nonnegative
    std::vector<double> u, v;

    double marginal_violation() const {
        const std::size_t S = T.rows();
        double worst = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < S; ++j) rs += T(i, j);
            worst = std::max(worst, std::abs(rs - u[i]));
        }
        for (std::size_t j = 0; j < S; ++j) {
            double cs = 0.0;
            for (std::size_t i = 0; i < S; ++i) cs += T(i, j);
            worst = std::max(worst, std::abs(cs - v[j]));
        }
        return worst;
    }
};

struct SinkhornOptions {
    double mu = 0.1;
    int max_iters = 500;
    double tol = 1e-7;
    bool force_log_domain = false;
    std::vector<double>* violation_trace = nullptr;  // one entry per sweep
};

// The convex entropic objective <T, cost> + mu * sum T log T that the
// Sinkhorn fixed point minimizes over the transport polytope.
inline double entropic_objective(const Tensor& T, const Tensor& cost, double mu) {
    double obj = 0.0;
    for (std::size_t i = 0; i < T.numel(); ++i) {
        obj += T[i] * cost[i];
        if (T[i] > 0.0) obj += mu * T[i] * std::log(T[i]);
    }
    return obj;
}

namespace detail {

inline double logsumexp(const std::vector<double>& terms) {
    double mx = terms[0];
    for (double t : terms) mx = std::max(mx, t);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
}

}  // namespace detail

// Alternating Sinkhorn scalings for cost = 1 - M_b. Runs in the plain
// domain when exp(-cost/mu) is representable, otherwise in the log domain;
// both paths converge to the same plan (see tests).
inline TransportPlan sinkhorn(const Tensor& M_b, const std::vector<double>& u,
                              const std::vector<double>& v, const SinkhornOptions& opt) {
    if (M_b.rank() != 2 || M_b.rows() != M_b.cols()) throw DimMismatch("sinkhorn expects square M_b");
    const std::size_t S = M_b.rows();
    if (u.size() != S || v.size() != S) throw DimMismatch("marginal lengths disagree with M_b");
    if (!M_b.all_finite()) throw NonFiniteInput("sinkhorn cost");
    double su = 0.0, sv = 0.0;
    for (double x : u) {
        if (!(x > 0.0)) throw DegenerateMarginal("u has a non-positive entry");
        su += x;
    }
    for (double x : v) {
        if (!(x > 0.0)) throw DegenerateMarginal("v has a non-positive entry");
        sv += x;
    }
    if (std::abs(su - 1.0) > 1e-9 || std::abs(sv - 1.0) > 1e-9)
        throw DegenerateMarginal("marginals must each sum to 1");
    if (opt.mu <= 0.0) throw InvalidSpec("sinkhorn mu must be > 0");

    Tensor cost({S, S});
    double max_ratio = 0.0;
    for (std::size_t i = 0; i < S * S; ++i) {
        cost[i] = 1.0 - M_b[i];
        max_ratio = std::max(max_ratio, std::abs(cost[i]) / opt.mu);
    }
    for (double x : u) max_ratio = std::max(max_ratio, -std::log(x));
    for (double x : v) max_ratio = std::max(max_ratio, -std::log(x));
    const bool log_domain = opt.force_log_domain || opt.mu <= 0.01 || max_ratio > 600.0;

    TransportPlan plan;
    plan.u = u;
    plan.v = v;
    plan.T = Tensor({S, S});

    auto record = [&](double viol) {
        if (opt.violation_trace) opt.violation_trace->push_back(viol);
    };

    if (!log_domain) {
        Tensor K({S, S});
        for (std::size_t i = 0; i < S * S; ++i) K[i] = std::exp(-cost[i] / opt.mu);
        std::vector<double> a(S, 1.0), b(S, 1.0);
        double viol = std::numeric_limits<double>::infinity();
        for (int it = 0; it < opt.max_iters; ++it) {
            for (std::size_t i = 0; i < S; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < S; ++j) s += K(i, j) * b[j];
                a[i] = u[i] / s;
            }
            for (std::size_t j = 0; j < S; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < S; ++i) s += K(i, j) * a[i];
                b[j] = v[j] / s;
            }
            viol = 0.0;
            for (std::size_t i = 0; i < S; ++i) {
                double rs = 0.0;
                for (std::size_t j = 0; j < S; ++j) rs += a[i] * K(i, j) * b[j];
                viol = std::max(viol, std::abs(rs - u[i]));
            }
            record(viol);
            if (viol <= opt.tol) break;
        }
        if (viol > opt.tol)
            throw NonConvergence("sinkhorn violation " + std::to_string(viol) + " after " +
                                 std::to_string(opt.max_iters) + " sweeps");
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = 0; j < S; ++j) plan.T(i, j) = a[i] * K(i, j) * b[j];
        return plan;
    }

    // log domain: potentials f, g with T = exp(logK + f_i + g_j)
    std::vector<double> f(S, 0.0), g(S, 0.0), terms(S);
    auto logK = [&](std::size_t i, std::size_t j) { return -cost(i, j) / opt.mu; };
    double viol = std::numeric_limits<double>::infinity();
    for (int it = 0; it < opt.max_iters; ++it) {
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < S; ++j) terms[j] = logK(i, j) + g[j];
            f[i] = std::log(u[i]) - detail::logsumexp(terms);
        }
        for (std::size_t j = 0; j < S; ++j) {
            for (std::size_t i = 0; i < S; ++i) terms[i] = logK(i, j) + f[i];
            g[j] = std::log(v[j]) - detail::logsumexp(terms);
        }
        viol = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < S; ++j) rs += std::exp(logK(i, j) + f[i] + g[j]);
            viol = std::max(viol, std::abs(rs - u[i]));
        }
        record(viol);
        if (viol <= opt.tol) break;
    }
    if (viol > opt.tol)
        throw NonConvergence("sinkhorn (log) violation " + std::to_string(viol) + " after " +
                             std::to_string(opt.max_iters) + " sweeps");
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) plan.T(i, j) = std::exp(logK(i, j) + f[i] + g[j]);
    return plan;
}

// ---- prototype-level match (Eq. 8) and enhancement loss (Eq. 9) ----

inline ad::Var prototype_match(ad::Var M_b, const TransportPlan& plan) {
    if (M_b.val().dims() != plan.T.dims()) throw DimMismatch("prototype_match shapes");
    return ad::mul(M_b, M_b.graph()->constant(plan.T));  // T* is a constant
}

inline Tensor prototype_match(const Tensor& M_b, const TransportPlan& plan) {
    ad::Graph g;
    return prototype_match(g.constant(M_b), plan).val();
}

// L_be = sum_i || W*_i - F_i^bs (F_i^bq)^T ||_F^2
inline ad::Var prototype_enhancement_loss(const std::vector<ad::Var>& matched,
                                          const std::vector<ad::Var>& proto_s,
                                          const std::vector<ad::Var>& proto_q) {
    if (matched.empty() || matched.size() != proto_s.size() || matched.size() != proto_q.size())
        throw DimMismatch("prototype_enhancement_loss needs K matched triples");
    ad::Var total = matched[0].graph()->constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < matched.size(); ++i) {
        ad::Var ref = ad::matmul(proto_s[i], ad::transpose(proto_q[i]));
        total = ad::add(total, ad::sum_sq(ad::sub(matched[i], ref)));
    }
    return total;
}

inline double prototype_enhancement_loss(const std::vector<Tensor>& matched,
                                         const std::vector<Tensor>& proto_s,
                                         const std::vector<Tensor>& proto_q) {
    ad::Graph g;
    std::vector<ad::Var> m, s, q;
    for (const auto& t : matched) m.push_back(g.constant(t));
    for (const auto& t : proto_s) s.push_back(g.constant(t));
    for (const auto& t : proto_q) q.push_back(g.constant(t));
    return prototype_enhancement_loss(m, s, q).val()[0];
}

}  // namespace pmcr::pcm
