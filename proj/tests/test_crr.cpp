#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pmcr/crr.hpp"
#include "pmcr/grad_check.hpp"
#include "pmcr/rng.hpp"

using namespace pmcr;

TEST_CASE("superpixel_count rule") {
    REQUIRE(crr::superpixel_count(800, 80, 10) == 10);
    REQUIRE(crr::superpixel_count(79, 80, 10) == 1);
    REQUIRE(crr::superpixel_count(400, 80, 10) == 5);
    REQUIRE(crr::superpixel_count(801, 80, 10) == 10);
    REQUIRE_THROWS_AS(crr::superpixel_count(0, 80, 10), EmptyForeground);
}

TEST_CASE("masked_slic fixed points") {
    // single pixel, single seed
    Tensor one({3, 1}, {0.5, -1.0, 2.0});
    crr::SuperpixelCentroids c = crr::masked_slic(one, 7, 1, 9);
    REQUIRE(c.class_id == 7);
    REQUIRE(max_abs_diff(c.S_i, one) < 1e-15);

    // identical features: every centroid equals that feature
    Tensor same({2, 5});
    for (std::size_t p = 0; p < 5; ++p) {
        same(0, p) = 1.25;
        same(1, p) = -0.5;
    }
    crr::SuperpixelCentroids c2 = crr::masked_slic(same, 1, 3, 5);
    REQUIRE(c2.S_i.dims() == Dims{2, 3});
    for (std::size_t f = 0; f < 3; ++f) {
        REQUIRE(c2.S_i(0, f) == Catch::Approx(1.25).margin(1e-12));
        REQUIRE(c2.S_i(1, f) == Catch::Approx(-0.5).margin(1e-12));
    }
}

TEST_CASE("masked_slic matches verbatim loop oracle") {
    Rng rng(401);
    Tensor fg = oracle::random_matrix(2, 6, rng);
    crr::SuperpixelCentroids got = crr::masked_slic(fg, 0, 2, 5);

    Tensor seeds({2, 2});
    auto picks = crr::slic_seed_indices(6, 2);
    for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t d = 0; d < 2; ++d) seeds(d, f) = fg(d, picks[f]);
    Tensor want = oracle::verbatim_slic(fg, seeds, 5);
    REQUIRE(max_abs_diff(got.S_i, want) < 1e-10);
}

TEST_CASE("masked_slic reduces oversized seed counts and logs") {
    Rng rng(409);
    Tensor fg = oracle::random_matrix(2, 3, rng);
    EpisodeLog log;
    crr::SuperpixelCentroids c = crr::masked_slic(fg, 0, 9, 5, &log);
    REQUIRE(c.S_i.cols() == 3);
    REQUIRE_FALSE(log.empty());
}

TEST_CASE("slic affinities lie in (0, 1] with equality only at coincidence") {
    Rng rng(419);
    Tensor fg = oracle::random_matrix(3, 5, rng);
    Tensor seeds({3, 2});
    for (std::size_t d = 0; d < 3; ++d) {
        seeds(d, 0) = fg(d, 2);  // coincident seed
        seeds(d, 1) = fg(d, 2) + 0.5;
    }
    ad::Graph g;
    Tensor Z = ad::exp(ad::scale(ad::sqdist_cols(g.constant(fg), g.constant(seeds)), -1.0)).val();
    for (std::size_t p = 0; p < 5; ++p)
        for (std::size_t f = 0; f < 2; ++f) {
            REQUIRE(Z(p, f) > 0.0);
            REQUIRE(Z(p, f) <= 1.0);
        }
    REQUIRE(Z(2, 0) == 1.0);
    REQUIRE(Z(2, 1) < 1.0);
}

TEST_CASE("slic centroids are convex combinations of foreground features") {
    Rng rng(421);
    Tensor fg = oracle::random_matrix(2, 8, rng);
    crr::SuperpixelCentroids c = crr::masked_slic(fg, 0, 3, 5);
    // bounding box necessary condition per dim
    for (std::size_t d = 0; d < 2; ++d) {
        double lo = fg(d, 0), hi = fg(d, 0);
        for (std::size_t p = 0; p < 8; ++p) {
            lo = std::min(lo, fg(d, p));
            hi = std::max(hi, fg(d, p));
        }
        for (std::size_t f = 0; f < 3; ++f) {
            REQUIRE(c.S_i(d, f) >= lo - 1e-12);
            REQUIRE(c.S_i(d, f) <= hi + 1e-12);
        }
    }
    // reconstruct the nonnegative weights of the final update explicitly
    Tensor seeds({2, 3});
    auto picks = crr::slic_seed_indices(8, 3);
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t d = 0; d < 2; ++d) seeds(d, f) = fg(d, picks[f]);
    Tensor prev = oracle::verbatim_slic(fg, seeds, 4);
    for (std::size_t f = 0; f < 3; ++f) {
        std::vector<double> w(8);
        double G = 0.0;
        for (std::size_t p = 0; p < 8; ++p) {
            double dist = 0.0;
            for (std::size_t d = 0; d < 2; ++d)
                dist += (fg(d, p) - prev(d, f)) * (fg(d, p) - prev(d, f));
            w[p] = std::exp(-dist);
            G += w[p];
        }
        for (std::size_t d = 0; d < 2; ++d) {
            double acc = 0.0;
            for (std::size_t p = 0; p < 8; ++p) acc += (w[p] / G) * fg(d, p);
            REQUIRE(c.S_i(d, f) == Catch::Approx(acc).margin(1e-10));
        }
        for (double x : w) REQUIRE(x >= 0.0);
    }
}

namespace {
crr::SuperpixelCentroids centroid_batch(int cls, std::initializer_list<double> values) {
    Tensor t({1, values.size()});
    std::size_t j = 0;
    for (double v : values) t(0, j++) = v;
    return {t, cls};
}
}  // namespace

TEST_CASE("memory_update: under-capacity insert keeps all") {
    crr::ClassMemory mem(5, Rng(1));
    mem.update(3, centroid_batch(3, {1.0, 2.0, 3.0}));
    REQUIRE(mem.count(3) == 3);
}

TEST_CASE("memory_update: capacity one always holds a member of the latest batch") {
    crr::ClassMemory mem(1, Rng(2));
    mem.update(0, centroid_batch(0, {1.0, 2.0}));
    for (double latest : {10.0, 20.0, 30.0}) {
        mem.update(0, centroid_batch(0, {latest}));
        REQUIRE(mem.count(0) == 1);
        REQUIRE(mem.stored(0)(0, 0) == latest);
    }
}

TEST_CASE("memory_update frequency oracle over 1e4 seeded trials") {
    // full buffer + 1 newcomer: newcomer always present, each incumbent
    // survives with probability 1 - 1/nu = 0.8
    int survived[5] = {0, 0, 0, 0, 0};
    int newcomer_present = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        crr::ClassMemory mem(5, Rng(1000 + t));
        mem.update(1, centroid_batch(1, {0.0, 1.0, 2.0, 3.0, 4.0}));
        mem.update(1, centroid_batch(1, {9.0}));
        REQUIRE(mem.count(1) == 5);
        Tensor s = mem.stored(1);
        std::set<double> have(s.data().begin(), s.data().end());
        if (have.count(9.0)) ++newcomer_present;
        for (int k = 0; k < 5; ++k)
            if (have.count(double(k))) ++survived[k];
    }
    REQUIRE(newcomer_present == trials);
    for (int k = 0; k < 5; ++k)
        REQUIRE(std::abs(double(survived[k]) / trials - 0.8) < 0.02);

    // batch larger than capacity: uniform subset, each member in with p = 2/3
    int present[3] = {0, 0, 0};
    for (int t = 0; t < trials; ++t) {
        crr::ClassMemory mem(2, Rng(5000 + t));
        mem.update(1, centroid_batch(1, {0.0, 1.0, 2.0}));
        Tensor s = mem.stored(1);
        std::set<double> have(s.data().begin(), s.data().end());
        for (int k = 0; k < 3; ++k)
            if (have.count(double(k))) ++present[k];
    }
    for (int k = 0; k < 3; ++k)
        REQUIRE(std::abs(double(present[k]) / trials - 2.0 / 3.0) < 0.02);
}

TEST_CASE("build_bags composition and memory repair") {
    Rng rng(431);
    ad::Graph g;
    Tensor s1 = oracle::random_matrix(3, 2, rng);
    Tensor Fq = oracle::random_matrix(3, 4, rng);   // D_l = 3, H_l W_l = 4
    Tensor Wq = oracle::random_matrix(4, 2, rng);   // N_q = 2

    // no missing classes: N_a = N_s K + N_q
    crr::ClassMemory mem(5, Rng(3));
    auto bags = crr::build_bags({g.constant(s1)}, {1}, mem, {1}, g.constant(Fq), g.constant(Wq));
    REQUIRE(bags.N_a == 2 + 2);
    REQUIRE(bags.V == 0);

    // one missing class with a full buffer grows the bag by nu
    crr::ClassMemory mem2(5, Rng(4));
    mem2.update(2, {oracle::random_matrix(3, 5, rng), 2});
    auto bags2 = crr::build_bags({g.constant(s1)}, {1}, mem2, {1, 2}, g.constant(Fq), g.constant(Wq));
    REQUIRE(bags2.V == 5);
    REQUIRE(bags2.N_a == 2 + 5 + 2);

    // missing class with empty buffer: skipped and logged
    EpisodeLog log;
    auto bags3 = crr::build_bags({g.constant(s1)}, {1}, mem, {1, 9}, g.constant(Fq), g.constant(Wq),
                                 &log);
    REQUIRE(bags3.V == 0);
    REQUIRE_FALSE(log.empty());

    // hand product for the query bag block: last N_q columns equal Fq Wq
    Tensor ba = bags.nodes.val();
    Tensor bq = matmul(Fq, Wq);
    for (std::size_t d = 0; d < 3; ++d)
        for (std::size_t j = 0; j < 2; ++j)
            REQUIRE(ba(d, 2 + j) == Catch::Approx(bq(d, j)).margin(1e-12));
}

TEST_CASE("build_bags hand-set 2-pixel query product") {
    ad::Graph g;
    Tensor Fq({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor Wq({2, 2}, {1.0, 0.5, -1.0, 2.0});
    crr::ClassMemory mem(5, Rng(5));
    auto bags = crr::build_bags({g.constant(Tensor({2, 1}, {9.0, 9.0}))}, {1}, mem, {1},
                                g.constant(Fq), g.constant(Wq));
    // B^q = Fq Wq = [[1*1+2*(-1), 1*0.5+2*2], [3*1+4*(-1), 3*0.5+4*2]]
    Tensor ba = bags.nodes.val();
    REQUIRE(ba(0, 1) == Catch::Approx(-1.0));
    REQUIRE(ba(0, 2) == Catch::Approx(4.5));
    REQUIRE(ba(1, 1) == Catch::Approx(-1.0));
    REQUIRE(ba(1, 2) == Catch::Approx(9.5));
}

TEST_CASE("relation_edges identities and loop oracle") {
    Rng rng(433);
    // orthonormal node columns with identity projections give identity edges
    Tensor nodes = Tensor::identity(3);
    Tensor I = Tensor::identity(3);
    REQUIRE(max_abs_diff(crr::relation_edges(nodes, I, I), Tensor::identity(3)) < 1e-12);

    REQUIRE(frobenius_sq(crr::relation_edges(oracle::random_matrix(3, 4, rng),
                                             Tensor::zeros({2, 3}), Tensor::zeros({2, 3}))) == 0.0);

    Tensor B = oracle::random_matrix(3, 4, rng);
    Tensor W1 = oracle::random_matrix(2, 3, rng), W2 = oracle::random_matrix(2, 3, rng);
    Tensor E = crr::relation_edges(B, W1, W2);
    Tensor p1 = matmul(W1, B), p2 = matmul(W2, B);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < 2; ++d) dot += p1(d, i) * p2(d, j);
            REQUIRE(E(i, j) == Catch::Approx(dot).margin(1e-12));
        }
}

TEST_CASE("graph_propagate closed forms and oracle") {
    Rng rng(439);
    Tensor B = oracle::random_matrix(3, 4, rng);
    Tensor E = crr::relation_edges(B, Tensor::identity(3), Tensor::identity(3));

    // W_g = 0: gate is uniform 1/N_a, so output is (1 + 1/N_a) B
    Tensor out = crr::graph_propagate(B, E, Tensor::zeros({3, 3}));
    REQUIRE(max_abs_diff(out, B * (1.0 + 0.25)) < 1e-12);

    // single node: gate = 1, output doubles
    Tensor single = oracle::random_matrix(3, 1, rng);
    Tensor E1 = crr::relation_edges(single, Tensor::identity(3), Tensor::identity(3));
    Tensor out1 = crr::graph_propagate(single, E1, oracle::random_matrix(3, 3, rng));
    REQUIRE(max_abs_diff(out1, single * 2.0) < 1e-12);

    // straight-line oracle with the documented node-axis softmax
    Tensor Wg = oracle::random_matrix(3, 3, rng);
    Tensor got = crr::graph_propagate(B, E, Wg);
    Tensor logits = transpose(matmul(matmul(E, transpose(B)), Wg));  // D x N_a
    for (std::size_t d = 0; d < 3; ++d) {
        double mx = logits(d, 0);
        for (std::size_t j = 0; j < 4; ++j) mx = std::max(mx, logits(d, j));
        double Z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) Z += std::exp(logits(d, j) - mx);
        for (std::size_t j = 0; j < 4; ++j) {
            double gate = std::exp(logits(d, j) - mx) / Z;
            REQUIRE(got(d, j) == Catch::Approx(B(d, j) + gate * B(d, j)).margin(1e-10));
        }
    }
}

TEST_CASE("kernel_attention closed forms") {
    Rng rng(443);
    // zero logits: uniform 1/D_l everywhere
    Tensor A = crr::kernel_attention(Tensor::zeros({3, 4}), Tensor::zeros({2, 3}),
                                     Tensor::zeros({4, 1}), Tensor::zeros({4, 1}), 1, 1);
    REQUIRE(A.dims() == Dims{2, 3, 1, 1});
    for (double v : A.data()) REQUIRE(v == Catch::Approx(1.0 / 3.0));

    // D_l = 1: softmax over a singleton axis is all ones
    Tensor A1 = crr::kernel_attention(oracle::random_matrix(1, 4, rng),
                                      oracle::random_matrix(2, 1, rng),
                                      oracle::random_matrix(4, 1, rng),
                                      oracle::random_matrix(4, 1, rng), 1, 1);
    for (double v : A1.data()) REQUIRE(v == Catch::Approx(1.0));
}

TEST_CASE("kernel_attention hand evaluation on tiny dims") {
    Rng rng(449);
    const std::size_t Du = 2, Dl = 3, Na = 4;
    Tensor Bn = oracle::random_matrix(Dl, Na, rng);
    Tensor Wc = oracle::random_matrix(Du, Dl, rng);
    Tensor Wc1 = oracle::random_matrix(Na, 1, rng), Wc2 = oracle::random_matrix(Na, 1, rng);
    Tensor A = crr::kernel_attention(Bn, Wc, Wc1, Wc2, 1, 1);

    Tensor Fn = matmul(Wc, Bn);
    Tensor M1 = matmul(Fn, Wc1), M2 = matmul(Bn, Wc2);
    for (std::size_t a = 0; a < Du; ++a) {
        double Z = 0.0;
        for (std::size_t b = 0; b < Dl; ++b) Z += std::exp(M1(a, 0) + M2(b, 0));
        for (std::size_t b = 0; b < Dl; ++b)
            REQUIRE(A(a, b, 0, 0) == Catch::Approx(std::exp(M1(a, 0) + M2(b, 0)) / Z).epsilon(1e-10));
    }
    // the b-axis softmax sums to one for every (a, c, d)
    for (std::size_t a = 0; a < Du; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < Dl; ++b) s += A(a, b, 0, 0);
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("kernel_attention uses the leading rows when stored at capacity") {
    Rng rng(457);
    Tensor Bn = oracle::random_matrix(3, 4, rng);
    Tensor Wc = oracle::random_matrix(2, 3, rng);
    Tensor Wc1 = oracle::random_matrix(9, 1, rng), Wc2 = oracle::random_matrix(9, 1, rng);
    Tensor A_cap = crr::kernel_attention(Bn, Wc, Wc1, Wc2, 1, 1);

    ad::Graph g;
    Tensor A_cut = crr::kernel_attention(Bn, Wc,
                                         ad::slice_rows(g.constant(Wc1), 0, 4).val(),
                                         ad::slice_rows(g.constant(Wc2), 0, 4).val(), 1, 1);
    REQUIRE(max_abs_diff(A_cap, A_cut) == 0.0);

    REQUIRE_THROWS_AS(crr::kernel_attention(Bn, Wc, oracle::random_matrix(2, 1, rng),
                                            oracle::random_matrix(2, 1, rng), 1, 1),
                      DimMismatch);
}

TEST_CASE("refine_and_encode closed forms") {
    Rng rng(461);
    const std::size_t D = 3;
    Tensor Fq({D, 4, 4});
    for (std::size_t i = 0; i < Fq.numel(); ++i) Fq[i] = rng.uniform(-1, 1);
    // 1x1 identity-channel kernel with all-ones attention reproduces F^q
    Tensor Qk({D, D, 1, 1});
    for (std::size_t c = 0; c < D; ++c) Qk(c, c, 0, 0) = 1.0;
    Tensor ones = Tensor::full({D, D, 1, 1}, 1.0);
    REQUIRE(max_abs_diff(crr::refine_and_encode(Fq, Qk, ones), Fq) < 1e-12);

    // zero attention annihilates the kernel
    Tensor zero = Tensor::zeros({D, D, 1, 1});
    REQUIRE(frobenius_sq(crr::refine_and_encode(Fq, Qk, zero)) == 0.0);

    REQUIRE_THROWS_AS(crr::refine_and_encode(Fq, Tensor::zeros({D, D, 2, 2}),
                                             Tensor::zeros({D, D, 2, 2})),
                      EvenKernel);
}

TEST_CASE("refine_and_encode random 3x3 kernel equals direct convolution oracle") {
    Rng rng(463);
    Tensor Fq({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) Fq[i] = rng.uniform(-1, 1);
    Tensor Qk({1, 1, 3, 3}), Ak({1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        Qk[i] = rng.uniform(-1, 1);
        Ak[i] = rng.uniform(0, 1);
    }
    Tensor got = crr::refine_and_encode(Fq, Qk, Ak);
    for (int oh = 0; oh < 4; ++oh)
        for (int ow = 0; ow < 4; ++ow) {
            double acc = 0.0;
            for (int u = 0; u < 3; ++u)
                for (int v = 0; v < 3; ++v) {
                    int ih = oh + u - 1, iw = ow + v - 1;
                    if (ih < 0 || ih >= 4 || iw < 0 || iw >= 4) continue;
                    acc += Fq(0, ih, iw) * Qk(0, 0, u, v) * Ak(0, 0, u, v);
                }
            REQUIRE(got(0, oh, ow) == Catch::Approx(acc).margin(1e-12));
        }
}

TEST_CASE("refine_and_encode is linear in the query features") {
    Rng rng(467);
    Tensor X({2, 3, 3}), Y({2, 3, 3});
    for (std::size_t i = 0; i < X.numel(); ++i) {
        X[i] = rng.uniform(-1, 1);
        Y[i] = rng.uniform(-1, 1);
    }
    Tensor Qk({2, 2, 3, 3}), Ak({2, 2, 3, 3});
    for (std::size_t i = 0; i < Qk.numel(); ++i) {
        Qk[i] = rng.uniform(-1, 1);
        Ak[i] = rng.uniform(0, 1);
    }
    const double alpha = 1.7;
    Tensor lhs = crr::refine_and_encode(X * alpha + Y, Qk, Ak);
    Tensor rhs = crr::refine_and_encode(X, Qk, Ak) * alpha + crr::refine_and_encode(Y, Qk, Ak);
    REQUIRE(max_abs_diff(lhs, rhs) < 1e-9);
}

TEST_CASE("grad_check: CRR parameter path") {
    Rng rng(479);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t D = 3, Na = 4, Du = 2;
        NamedTensors in = {
            {"nodes", oracle::random_matrix(D, Na, rng)},
            {"Ws1", oracle::random_matrix(2, D, rng)},
            {"Ws2", oracle::random_matrix(2, D, rng)},
            {"Wg", oracle::random_matrix(D, D, rng)},
            {"Wc", oracle::random_matrix(Du, D, rng)},
            {"Wc1", oracle::random_matrix(Na, 1, rng)},
            {"Wc2", oracle::random_matrix(Na, 1, rng)},
        };
        auto r = grad_check(
            [&](ad::Graph& g, const std::vector<ad::Var>& v) {
                ad::Var E = crr::relation_edges(v[0], v[1], v[2]);
                ad::Var Bn = crr::graph_propagate(v[0], E, v[3]);
                ad::Var Ak = crr::kernel_attention(Bn, v[4], v[5], v[6], 1, 1);
                return ad::sum_sq(Ak);
            },
            in);
        REQUIRE(r.max_rel_error <= 1e-3);
    }
}

TEST_CASE("grad_check: refinement convolution and SLIC tail") {
    Rng rng(487);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor Fq({2, 3, 3}), Qk({2, 2, 3, 3}), Ak({2, 2, 3, 3});
        for (std::size_t i = 0; i < Fq.numel(); ++i) Fq[i] = rng.uniform(-1, 1);
        for (std::size_t i = 0; i < Qk.numel(); ++i) {
            Qk[i] = rng.uniform(-1, 1);
            Ak[i] = rng.uniform(0, 1);
        }
        NamedTensors in = {{"Fq", Fq}, {"Qk", Qk}, {"Ak", Ak}};
        auto r = grad_check(
            [](ad::Graph&, const std::vector<ad::Var>& v) {
                return ad::sum_sq(crr::refine_and_encode(v[0], v[1], v[2]));
            },
            in);
        REQUIRE(r.max_rel_error <= 1e-3);
    }

    // the differentiable final update: gradients wrt features and seeds
    // (earlier iterations are stop-gradient by design, so the check runs on
    // the update itself)
    for (int trial = 0; trial < 5; ++trial) {
        NamedTensors in = {{"fg", oracle::random_matrix(2, 6, rng)},
                           {"seeds", oracle::random_matrix(2, 2, rng)}};
        auto r = grad_check(
            [](ad::Graph&, const std::vector<ad::Var>& v) {
                return ad::sum_sq(crr::slic_update(v[0], v[1]));
            },
            in);
        REQUIRE(r.max_rel_error <= 1e-3);
    }
}
