#pragma once

// Truncated SVD (one-sided Jacobi, deterministic) and the sigmoid-gated
// attention primitive. Attention is written once on the tape; the Tensor
// overloads evaluate through a scratch graph.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr {

struct SvdFactors {
    Tensor U;                   // M x S, orthonormal columns
    std::vector<double> sigma;  // length S, descending
    Tensor V;                   // S x N, orthonormal rows
};

namespace detail {

// Orthogonalizes the columns of A in place, accumulating rotations into R
// (A_out = A_in * R). Plain cyclic one-sided Jacobi.
inline void one_sided_jacobi(Tensor& A, Tensor& R) {
    const std::size_t M = A.rows(), N = A.cols();
    const double tol = 1e-13;
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < N; ++p)
            for (std::size_t q = p + 1; q < N; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < M; ++i) {
                    alpha += A(i, p) * A(i, p);
                    beta += A(i, q) * A(i, q);
                    gamma += A(i, p) * A(i, q);
                }
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                for (std::size_t i = 0; i < M; ++i) {
                    const double ap = A(i, p), aq = A(i, q);
                    A(i, p) = c * ap - s * aq;
                    A(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < N; ++i) {
                    const double rp = R(i, p), rq = R(i, q);
                    R(i, p) = c * rp - s * rq;
                    R(i, q) = s * rp + c * rq;
                }
            }
        if (!rotated) break;
    }
}

// Fills column k of U with a unit vector orthogonal to columns [0, k).
inline void complete_column(Tensor& U, std::size_t k) {
    const std::size_t M = U.rows();
    for (std::size_t cand = 0; cand < M; ++cand) {
        std::vector<double> v(M, 0.0);
        v[cand] = 1.0;
        for (std::size_t j = 0; j < k; ++j) {
            double dot = 0.0;
            for (std::size_t i = 0; i < M; ++i) dot += v[i] * U(i, j);
            for (std::size_t i = 0; i < M; ++i) v[i] -= dot * U(i, j);
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.5) {
            for (std::size_t i = 0; i < M; ++i) U(i, k) = v[i] / norm;
            return;
        }
    }
}

}  // namespace detail

inline SvdFactors truncated_svd(const Tensor& W, std::size_t S) {
    if (W.rank() != 2) throw DimMismatch("truncated_svd expects rank-2");
    if (!W.all_finite()) throw NonFiniteInput("truncated_svd");
    const std::size_t M = W.rows(), N = W.cols();
    if (S == 0 || S > std::min(M, N))
        throw RankTooLarge("S=" + std::to_string(S) + " for " + dims_str(W.dims()));

    // Jacobi works on the side with fewer columns.
    const bool transposed = M < N;
    Tensor A = transposed ? transpose(W) : W;  // rows >= cols
    const std::size_t n = A.cols();
    Tensor R = Tensor::identity(n);
    detail::one_sided_jacobi(A, R);

    std::vector<double> sig(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < A.rows(); ++i) s += A(i, j) * A(i, j);
        sig[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sig[a] > sig[b]; });

    // left factor of A: normalized columns; right factor: columns of R
    Tensor left({A.rows(), S}), right({n, S});
    std::vector<double> sigma(S);
    const double tiny = (sig.empty() ? 0.0 : sig[order[0]]) * 1e-300 + 1e-300;
    for (std::size_t k = 0; k < S; ++k) {
        const std::size_t j = order[k];
        sigma[k] = sig[j];
        if (sig[j] > tiny) {
            for (std::size_t i = 0; i < A.rows(); ++i) left(i, k) = A(i, j) / sig[j];
        } else {
            detail::complete_column(left, k);
            sigma[k] = 0.0;
        }
        for (std::size_t i = 0; i < n; ++i) right(i, k) = R(i, j);
    }

    SvdFactors f;
    if (!transposed) {
        f.U = std::move(left);            // M x S
        f.V = transpose(right);           // S x N
    } else {
        f.U = std::move(right);           // M x S (columns of R)
        f.V = transpose(left);            // S x N
    }
    f.sigma = std::move(sigma);

    // sign convention: first entry of each U column with |.| > 1e-12 is >= 0
    for (std::size_t k = 0; k < S; ++k) {
        double lead = 0.0;
        for (std::size_t i = 0; i < M; ++i)
            if (std::abs(f.U(i, k)) > 1e-12) {
                lead = f.U(i, k);
                break;
            }
        if (lead < 0.0) {
            for (std::size_t i = 0; i < M; ++i) f.U(i, k) = -f.U(i, k);
            for (std::size_t j = 0; j < N; ++j) f.V(k, j) = -f.V(k, j);
        }
    }
    return f;
}

inline Tensor svd_reconstruct(const SvdFactors& f) {
    Tensor sv = f.V;
    for (std::size_t k = 0; k < sv.rows(); ++k)
        for (std::size_t j = 0; j < sv.cols(); ++j) sv(k, j) *= f.sigma[k];
    return matmul(f.U, sv);
}

// ---- sigmoid attention (Eq. 3-5 primitive) ----

struct AttentionWeights {
    Tensor W_q, W_k, W_v;  // each D_l x d
};

struct AttentionVars {
    ad::Var W_q, W_k, W_v;
};

inline ad::Var sigmoid_attention(ad::Var queries, ad::Var keys_values, const AttentionVars& w) {
    const std::size_t D = queries.val().cols();
    if (keys_values.val().cols() != D || w.W_q.val().rows() != D || w.W_k.val().rows() != D ||
        w.W_v.val().rows() != D)
        throw DimMismatch("sigmoid_attention: feature dims disagree");
    const std::size_t d = w.W_q.val().cols();
    if (w.W_k.val().cols() != d || w.W_v.val().cols() != d)
        throw DimMismatch("sigmoid_attention: head dims disagree");
    ad::Var q = ad::matmul(queries, w.W_q);                        // A x d
    ad::Var k = ad::matmul(keys_values, w.W_k);                    // B x d
    ad::Var v = ad::matmul(keys_values, w.W_v);                    // B x d
    ad::Var logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(double(d)));
    // element-wise sigmoid gate, deliberately not a row softmax
    return ad::matmul(ad::sigmoid(logits), v);
}

inline Tensor sigmoid_attention(const Tensor& queries, const Tensor& keys_values,
                                const AttentionWeights& w) {
    ad::Graph g;
    AttentionVars wv{g.constant(w.W_q), g.constant(w.W_k), g.constant(w.W_v)};
    return sigmoid_attention(g.constant(queries), g.constant(keys_values), wv).val();
}

inline ad::Var multi_head_concat(const std::vector<ad::Var>& heads) {
    return ad::concat_cols(heads);
}

inline Tensor multi_head_concat(const std::vector<Tensor>& heads) {
    ad::Graph g;
    std::vector<ad::Var> vars;
    vars.reserve(heads.size());
    for (const Tensor& h : heads) vars.push_back(g.constant(h));
    return multi_head_concat(vars).val();
}

}  // namespace pmcr
