#pragma once

// Test-only oracles. Each one is a deliberately naive straight-line
// implementation, kept independent of the library code paths it checks.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pmcr/rng.hpp"
#include "pmcr/tensor.hpp"

namespace oracle {

using pmcr::Tensor;

// Full SVD spectrum via classic two-sided Jacobi eigendecomposition of the
// Gram matrix W^T W. Returns all singular values, descending.
inline std::vector<double> full_singular_values(const Tensor& W) {
    const std::size_t M = W.rows(), N = W.cols();
    // gram = W^T W (N x N)
    std::vector<std::vector<double>> gram(N, std::vector<double>(N, 0.0));
    for (std::size_t a = 0; a < N; ++a)
        for (std::size_t b = 0; b < N; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < M; ++i) s += W(i, a) * W(i, b);
            gram[a][b] = s;
        }
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t q = p + 1; q < N; ++q) off += gram[p][q] * gram[p][q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p + 1 < N; ++p)
            for (std::size_t q = p + 1; q < N; ++q) {
                if (std::abs(gram[p][q]) < 1e-300) continue;
                const double theta = 0.5 * std::atan2(2.0 * gram[p][q], gram[q][q] - gram[p][p]);
                const double c = std::cos(theta), s = std::sin(theta);
                for (std::size_t i = 0; i < N; ++i) {
                    const double gp = gram[i][p], gq = gram[i][q];
                    gram[i][p] = c * gp - s * gq;
                    gram[i][q] = s * gp + c * gq;
                }
                for (std::size_t i = 0; i < N; ++i) {
                    const double gp = gram[p][i], gq = gram[q][i];
                    gram[p][i] = c * gp - s * gq;
                    gram[q][i] = s * gp + c * gq;
                }
            }
    }
    std::vector<double> sv(N);
    for (std::size_t i = 0; i < N; ++i) sv[i] = std::sqrt(std::max(0.0, gram[i][i]));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

// Optimal rank-S Frobenius reconstruction error: sqrt(sum of trailing
// squared singular values).
inline double optimal_rank_error(const Tensor& W, std::size_t S) {
    auto sv = full_singular_values(W.rows() >= W.cols() ? W : pmcr::transpose(W));
    double acc = 0.0;
    for (std::size_t k = S; k < sv.size(); ++k) acc += sv[k] * sv[k];
    return std::sqrt(acc);
}

// Straight-line sigmoid attention: out = sigmoid(Q Wq (K Wk)^T / sqrt(d)) K Wv
inline Tensor loop_sigmoid_attention(const Tensor& Q, const Tensor& K, const Tensor& Wq,
                                     const Tensor& Wk, const Tensor& Wv) {
    const std::size_t A = Q.rows(), B = K.rows(), D = Q.cols(), d = Wq.cols();
    auto project = [&](const Tensor& X, const Tensor& Wt) {
        Tensor out({X.rows(), d});
        for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < D; ++k) s += X(i, k) * Wt(k, j);
                out(i, j) = s;
            }
        return out;
    };
    Tensor q = project(Q, Wq), k = project(K, Wk), v = project(K, Wv);
    Tensor out({A, d});
    for (std::size_t i = 0; i < A; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                double logit = 0.0;
                for (std::size_t t = 0; t < d; ++t) logit += q(i, t) * k(b, t);
                logit /= std::sqrt(double(d));
                acc += 1.0 / (1.0 + std::exp(-logit)) * v(b, j);
            }
            out(i, j) = acc;
        }
    return out;
}

// Long-run Sinkhorn at extended precision: 1e5 alternating scalings.
inline Tensor longdouble_sinkhorn(const Tensor& cost, const std::vector<double>& u,
                                  const std::vector<double>& v, double mu) {
    const std::size_t S = cost.rows();
    std::vector<long double> K(S * S), a(S, 1.0L), b(S, 1.0L);
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) K[i * S + j] = expl(-(long double)(cost(i, j)) / (long double)mu);
    for (int it = 0; it < 100000; ++it) {
        for (std::size_t i = 0; i < S; ++i) {
            long double s = 0.0L;
            for (std::size_t j = 0; j < S; ++j) s += K[i * S + j] * b[j];
            a[i] = (long double)u[i] / s;
        }
        for (std::size_t j = 0; j < S; ++j) {
            long double s = 0.0L;
            for (std::size_t i = 0; i < S; ++i) s += K[i * S + j] * a[i];
            b[j] = (long double)v[j] / s;
        }
    }
    Tensor T({S, S});
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) T(i, j) = double(a[i] * K[i * S + j] * b[j]);
    return T;
}

// Verbatim masked-SLIC loop: affinity exp(-||x_p - s_f||^2), then
// affinity-weighted mean, repeated `iters` times from the given seeds.
inline Tensor verbatim_slic(const Tensor& fg /*D x N*/, Tensor seeds /*D x F*/, int iters) {
    const std::size_t D = fg.rows(), N = fg.cols(), F = seeds.cols();
    for (int t = 0; t < iters; ++t) {
        Tensor Z({N, F});
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t f = 0; f < F; ++f) {
                double dist = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    const double diff = fg(d, p) - seeds(d, f);
                    dist += diff * diff;
                }
                Z(p, f) = std::exp(-dist);
            }
        Tensor next({D, F});
        for (std::size_t f = 0; f < F; ++f) {
            double G = 0.0;
            for (std::size_t p = 0; p < N; ++p) G += Z(p, f);
            for (std::size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (std::size_t p = 0; p < N; ++p) acc += Z(p, f) * fg(d, p);
                next(d, f) = acc / G;
            }
        }
        seeds = next;
    }
    return seeds;
}

inline Tensor random_matrix(std::size_t m, std::size_t n, pmcr::Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t({m, n});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace oracle
