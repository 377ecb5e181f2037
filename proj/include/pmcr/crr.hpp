#pragma once

// Class-relation reasoning: masked superpixel centroids, a per-class
// centroid memory, relation-graph propagation over the support/query bags,
// and dynamic refinement of the query encoding kernel.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/errors.hpp"
#include "pmcr/rng.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::crr {

struct SuperpixelCentroids {
    Tensor S_i;  // D_l x N_s
    int class_id = 0;
};

// N_s = max(1, min(floor(N_i / G), N_s_max)); the floor of one keeps tiny
// foregrounds usable.
inline std::size_t superpixel_count(std::size_t N_i, std::size_t G, std::size_t N_s_max) {
    if (N_i == 0) throw EmptyForeground("superpixel_count: N_i must be >= 1");
    return std::max<std::size_t>(1, std::min(N_i / G, N_s_max));
}

// Evenly spaced picks from the row-major foreground scan.
inline std::vector<std::size_t> slic_seed_indices(std::size_t N, std::size_t F) {
    std::vector<std::size_t> idx(F);
    for (std::size_t f = 0; f < F; ++f)
        idx[f] = std::min(N - 1, std::size_t((double(f) + 0.5) * double(N) / double(F)));
    return idx;
}

struct SlicVars {
    ad::Var centroids;  // D_l x N_s
    std::size_t N_s_used = 0;
};

// One clustering update: Z[p,f] = exp(-||x_p - s_f||^2), then
// s_f <- sum_p Z[p,f] x_p / sum_p Z[p,f].
inline ad::Var slic_update(ad::Var fg, ad::Var seeds) {
    ad::Var Z = ad::exp(ad::scale(ad::sqdist_cols(fg, seeds), -1.0));  // N x F
    return ad::div_colbroadcast(ad::matmul(fg, Z), ad::colsum_vec(Z));
}

// Iterative affinity clustering over foreground features. Only the last
// update runs on the tape; earlier iterations are stop-gradient, with the
// incoming centroids treated as constants.
inline SlicVars masked_slic(ad::Var fg, std::size_t N_s, int iters, EpisodeLog* log = nullptr) {
    const Tensor& X = fg.val();  // D x N
    if (X.rank() != 2) throw DimMismatch("masked_slic expects D x N features");
    const std::size_t N = X.cols();
    if (N == 0) throw EmptyForeground("masked_slic: no foreground pixels");
    std::size_t F = N_s;
    if (F > N) {
        F = N;
        if (log)
            log->note("masked_slic: reduced N_s from " + std::to_string(N_s) + " to " +
                      std::to_string(F));
    }
    if (F == 0) throw InvalidSpec("masked_slic: N_s must be >= 1");
    if (iters < 1) throw InvalidSpec("masked_slic: iters must be >= 1");

    Tensor seeds({X.rows(), F});
    auto picks = slic_seed_indices(N, F);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t d = 0; d < X.rows(); ++d) seeds(d, f) = X(d, picks[f]);

    // value-only iterations
    for (int t = 0; t + 1 < iters; ++t) {
        Tensor Z({N, F});
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t f = 0; f < F; ++f) {
                double dist = 0.0;
                for (std::size_t d = 0; d < X.rows(); ++d) {
                    const double diff = X(d, p) - seeds(d, f);
                    dist += diff * diff;
                }
                Z(p, f) = std::exp(-dist);
            }
        Tensor next({X.rows(), F});
        for (std::size_t f = 0; f < F; ++f) {
            double G = 0.0;
            for (std::size_t p = 0; p < N; ++p) G += Z(p, f);
            for (std::size_t d = 0; d < X.rows(); ++d) {
                double acc = 0.0;
                for (std::size_t p = 0; p < N; ++p) acc += Z(p, f) * X(d, p);
                next(d, f) = acc / G;
            }
        }
        seeds = next;
    }

    // final iteration on the tape, seeds held constant
    ad::Graph& g = *fg.graph();
    return {slic_update(fg, g.constant(seeds)), F};
}

inline SuperpixelCentroids masked_slic(const Tensor& fg, int class_id, std::size_t N_s, int iters,
                                       EpisodeLog* log = nullptr) {
    ad::Graph g;
    SlicVars v = masked_slic(g.constant(fg), N_s, iters, log);
    return {v.centroids.val(), class_id};
}

// ---- class memory ----

// Per-class buffer of up to nu centroids. Replacement rule, which the
// frequency tests pin down: each update draws a uniformly random
// min(nu, batch) subset of the newly generated centroids; picks fill empty
// slots first and then overwrite uniformly random occupied slots. New
// centroids therefore always enter, displacing old ones uniformly.
class ClassMemory {
public:
    struct Buffer {
        std::vector<std::vector<double>> entries;  // each of length D_l
        std::uint64_t seen = 0;
    };

    ClassMemory() : capacity_(5), rng_(0) {}
    ClassMemory(std::size_t nu, Rng rng) : capacity_(nu), rng_(rng) {}

    std::size_t capacity() const { return capacity_; }
    Rng& rng() { return rng_; }

    void update(int class_id, const SuperpixelCentroids& centroids) {
        if (centroids.class_id != class_id) throw InvalidSpec("memory_update: class mismatch");
        Buffer& buf = buffers_[class_id];
        const Tensor& S = centroids.S_i;
        const std::size_t batch = S.cols();
        std::vector<std::size_t> order(batch);
        for (std::size_t j = 0; j < batch; ++j) order[j] = j;
        for (std::size_t j = 0; j < batch; ++j) {  // Fisher-Yates
            std::size_t k = j + std::size_t(rng_.uniform_int(batch - j));
            std::swap(order[j], order[k]);
        }
        const std::size_t take = std::min(capacity_, batch);
        for (std::size_t t = 0; t < take; ++t) {
            std::vector<double> col(S.rows());
            for (std::size_t d = 0; d < S.rows(); ++d) col[d] = S(d, order[t]);
            buf.seen += 1;
            if (buf.entries.size() < capacity_)
                buf.entries.push_back(std::move(col));
            else
                buf.entries[std::size_t(rng_.uniform_int(capacity_))] = std::move(col);
        }
    }

    std::size_t count(int class_id) const {
        auto it = buffers_.find(class_id);
        return it == buffers_.end() ? 0 : it->second.entries.size();
    }

    // All stored centroids for a class as a D x count matrix.
    Tensor stored(int class_id) const {
        auto it = buffers_.find(class_id);
        if (it == buffers_.end() || it->second.entries.empty())
            throw InvalidSpec("no stored centroids for class " + std::to_string(class_id));
        const auto& e = it->second.entries;
        Tensor out({e[0].size(), e.size()});
        for (std::size_t j = 0; j < e.size(); ++j)
            for (std::size_t d = 0; d < e[j].size(); ++d) out(d, j) = e[j][d];
        return out;
    }

    const std::map<int, Buffer>& buffers() const { return buffers_; }
    std::map<int, Buffer>& buffers_mutable() { return buffers_; }

private:
    std::size_t capacity_;
    Rng rng_;
    std::map<int, Buffer> buffers_;
};

inline void memory_update(ClassMemory& mem, int class_id, const SuperpixelCentroids& centroids) {
    mem.update(class_id, centroids);
}

// ---- bags and relation graph ----

struct BagVars {
    ad::Var nodes;        // D_l x N_a
    std::size_t N_a = 0;
    std::size_t V = 0;    // memory-repair centroid count
};

// B^s = [S_1 .. S_K, S_M], B^q = reshape(F^q) W^q, B^a = [B^s, B^q].
// Classes in all_class_ids missing from the support centroids are repaired
// with stored memory centroids; an empty buffer skips that class and logs.
inline BagVars build_bags(const std::vector<ad::Var>& support_centroids,
                          const std::vector<int>& centroid_classes, const ClassMemory& mem,
                          const std::vector<int>& all_class_ids, ad::Var query2d, ad::Var W_q,
                          EpisodeLog* log = nullptr) {
    if (support_centroids.empty()) throw InvalidSpec("build_bags: no support centroids");
    if (support_centroids.size() != centroid_classes.size())
        throw InvalidSpec("build_bags: class list length mismatch");
    ad::Graph& g = *support_centroids[0].graph();
    if (query2d.val().cols() != W_q.val().rows())
        throw DimMismatch("build_bags: W^q rows must equal H_l*W_l");

    std::vector<ad::Var> parts = support_centroids;
    std::size_t V = 0;
    for (int cls : all_class_ids) {
        bool present = false;
        for (int have : centroid_classes)
            if (have == cls) present = true;
        if (present) continue;
        if (mem.count(cls) == 0) {
            if (log)
                log->note("MissingMemoryClass: class " + std::to_string(cls) +
                          " absent from support and memory; skipping repair");
            continue;
        }
        Tensor stored = mem.stored(cls);
        parts.push_back(g.constant(stored));
        V += stored.cols();
    }
    parts.push_back(ad::matmul(query2d, W_q));  // B^q, D_l x N_q

    BagVars out;
    out.nodes = ad::concat_cols(parts);
    out.N_a = out.nodes.val().cols();
    out.V = V;
    return out;
}

// E = (W_s^1 B^a)^T (W_s^2 B^a)
inline ad::Var relation_edges(ad::Var nodes, ad::Var W_s1, ad::Var W_s2) {
    if (W_s1.val().cols() != nodes.val().rows() || W_s2.val().cols() != nodes.val().rows())
        throw DimMismatch("relation_edges: projection dims");
    return ad::matmul(ad::transpose(ad::matmul(W_s1, nodes)), ad::matmul(W_s2, nodes));
}

inline Tensor relation_edges(const Tensor& nodes, const Tensor& W_s1, const Tensor& W_s2) {
    ad::Graph g;
    return relation_edges(g.constant(nodes), g.constant(W_s1), g.constant(W_s2)).val();
}

// B~ = B^a + softmax((E (B^a)^T W_g)^T) (x) B^a, softmax taken along the
// node axis independently per feature channel.
inline ad::Var graph_propagate(ad::Var nodes, ad::Var edges, ad::Var W_g) {
    const std::size_t N_a = nodes.val().cols();
    if (edges.val().rank() != 2 || edges.val().rows() != N_a || edges.val().cols() != N_a)
        throw DimMismatch("graph_propagate: edge matrix must be N_a x N_a");
    if (W_g.val().rows() != nodes.val().rows() || W_g.val().cols() != nodes.val().rows())
        throw DimMismatch("graph_propagate: W_g must be D_l x D_l");
    ad::Var logits = ad::transpose(ad::matmul(ad::matmul(edges, ad::transpose(nodes)), W_g));
    ad::Var gate = ad::softmax_rows(logits);  // D_l x N_a, rows sum to 1
    return ad::add(nodes, ad::mul(gate, nodes));
}

inline Tensor graph_propagate(const Tensor& nodes, const Tensor& edges, const Tensor& W_g) {
    ad::Graph g;
    return graph_propagate(g.constant(nodes), g.constant(edges), g.constant(W_g)).val();
}

// A_k[a,b,c,d] = softmax_b(M1[a,c,d] + M2[b,c,d]); the softmax runs over the
// input-channel axis so the refined kernel is a convex reweighting across
// input channels.
inline ad::Var kernel_attention_softmax(ad::Var M1, ad::Var M2, std::size_t n1, std::size_t n2) {
    const Tensor& A = M1.val();  // D_u x (n1*n2)
    const Tensor& B = M2.val();  // D_l x (n1*n2)
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols() || A.cols() != n1 * n2)
        throw DimMismatch("kernel_attention_softmax inputs");
    const std::size_t Du = A.rows(), Dl = B.rows(), K = A.cols();
    Tensor out({Du, Dl, n1, n2});
    for (std::size_t a = 0; a < Du; ++a)
        for (std::size_t t = 0; t < K; ++t) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t b = 0; b < Dl; ++b) mx = std::max(mx, A(a, t) + B(b, t));
            double sum = 0.0;
            for (std::size_t b = 0; b < Dl; ++b) sum += std::exp(A(a, t) + B(b, t) - mx);
            for (std::size_t b = 0; b < Dl; ++b)
                out[(a * Dl + b) * K + t] = std::exp(A(a, t) + B(b, t) - mx) / sum;
        }
    ad::Graph& g = *M1.graph();
    const bool rg = M1.requires_grad() || M2.requires_grad();
    auto m1i = M1.index(), m2i = M2.index();
    ad::Var r = g.emit(std::move(out), rg, nullptr);
    if (rg) {
        auto ri = r.index();
        g.node_backward(ri) = [m1i, m2i, ri, Du, Dl, K](ad::Graph& gg, const Tensor& gr) {
            const Tensor& s = gg.value(ri);
            Tensor d1({Du, K}), d2({Dl, K});
            for (std::size_t a = 0; a < Du; ++a)
                for (std::size_t t = 0; t < K; ++t) {
                    double dot = 0.0;
                    for (std::size_t b = 0; b < Dl; ++b)
                        dot += s[(a * Dl + b) * K + t] * gr[(a * Dl + b) * K + t];
                    for (std::size_t b = 0; b < Dl; ++b) {
                        const double dlogit =
                            s[(a * Dl + b) * K + t] * (gr[(a * Dl + b) * K + t] - dot);
                        d1(a, t) += dlogit;
                        d2(b, t) += dlogit;
                    }
                }
            gg.accumulate(m1i, d1);
            gg.accumulate(m2i, d2);
        };
    }
    return r;
}

// F^n = W_c B~; M1 = F^n W_c1; M2 = B~ W_c2; A_k = softmax_b(M1 + M2).
// W_c1/W_c2 rows beyond the episode's N_a are unused (parameters are stored
// at bag capacity because N_a varies per episode).
inline ad::Var kernel_attention(ad::Var propagated, ad::Var W_c, ad::Var W_c1, ad::Var W_c2,
                                std::size_t n1, std::size_t n2) {
    const std::size_t N_a = propagated.val().cols();
    if (W_c.val().cols() != propagated.val().rows()) throw DimMismatch("kernel_attention: W_c");
    if (W_c1.val().rows() < N_a || W_c2.val().rows() < N_a)
        throw DimMismatch("kernel_attention: bag exceeds parameter capacity " +
                          std::to_string(W_c1.val().rows()) + " < " + std::to_string(N_a));
    ad::Var W_c1_act = N_a == W_c1.val().rows() ? W_c1 : ad::slice_rows(W_c1, 0, N_a);
    ad::Var W_c2_act = N_a == W_c2.val().rows() ? W_c2 : ad::slice_rows(W_c2, 0, N_a);
    ad::Var F_n = ad::matmul(W_c, propagated);          // D_u x N_a
    ad::Var M1 = ad::matmul(F_n, W_c1_act);             // D_u x (n1 n2)
    ad::Var M2 = ad::matmul(propagated, W_c2_act);      // D_l x (n1 n2)
    return kernel_attention_softmax(M1, M2, n1, n2);
}

inline Tensor kernel_attention(const Tensor& propagated, const Tensor& W_c, const Tensor& W_c1,
                               const Tensor& W_c2, std::size_t n1, std::size_t n2) {
    ad::Graph g;
    return kernel_attention(g.constant(propagated), g.constant(W_c), g.constant(W_c1),
                            g.constant(W_c2), n1, n2)
        .val();
}

// F~^q = F^q (x) (A_k . Q_k), zero-padded so spatial dims are preserved.
inline ad::Var refine_and_encode(ad::Var query_features, ad::Var Q_k, ad::Var A_k) {
    const Tensor& K = Q_k.val();
    if (K.rank() != 4) throw DimMismatch("refine_and_encode: kernel rank");
    if (K.dim(2) % 2 == 0 || K.dim(3) % 2 == 0)
        throw EvenKernel("refinement kernel must be odd-sized");
    if (K.dim(2) != K.dim(3)) throw DimMismatch("refine_and_encode: kernel must be square");
    ad::Var refined = ad::mul(A_k, Q_k);
    return ad::conv2d(query_features, refined, 1, (K.dim(2) - 1) / 2);
}

inline Tensor refine_and_encode(const Tensor& query_features, const Tensor& Q_k, const Tensor& A_k) {
    ad::Graph g;
    return refine_and_encode(g.constant(query_features), g.constant(Q_k), g.constant(A_k)).val();
}

}  // namespace pmcr::crr
