#pragma once

// Reverse-mode tape over the fixed op set used by this project. Not a
// general autodiff: every op is hand-written forward + backward, and the
// graph is rebuilt per episode. Var is a cheap handle into a Graph.

#include <cstddef>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::ad {

class Graph;

class Var {
public:
    Var() : g_(nullptr), idx_(0) {}
    Var(Graph* g, std::size_t idx) : g_(g), idx_(idx) {}
    const Tensor& val() const;
    const Tensor& grad() const;
    bool requires_grad() const;
    Graph* graph() const { return g_; }
    std::size_t index() const { return idx_; }

private:
    Graph* g_;
    std::size_t idx_;
};

class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Graph&, const Tensor&)> backward;  // receives this node's grad
    };

    Var leaf(Tensor value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var emit(Tensor value, bool requires_grad,
             std::function<void(Graph&, const Tensor&)> backward) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t i) const { return nodes_[i].value; }
    bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

    // for ops whose backward closure needs the emitted node's own index
    std::function<void(Graph&, const Tensor&)>& node_backward(std::size_t i) {
        return nodes_[i].backward;
    }

    const Tensor& grad(std::size_t i) const {
        static const Tensor kEmpty;
        return nodes_[i].grad_alloc ? nodes_[i].grad : kEmpty;
    }

    void accumulate(std::size_t i, const Tensor& g) {
        Node& n = nodes_[i];
        if (!n.requires_grad) return;
        if (!n.grad_alloc) {
            n.grad = Tensor::zeros(n.value.dims());
            n.grad_alloc = true;
        }
        for (std::size_t k = 0; k < g.numel(); ++k) n.grad[k] += g[k];
    }

    // Seeds the (scalar) root with grad 1 and sweeps the tape in reverse.
    void backward(Var root) {
        if (root.graph() != this) throw DimMismatch("backward: var from another graph");
        if (root.val().numel() != 1) throw DimMismatch("backward root must be scalar");
        accumulate(root.index(), Tensor::full(root.val().dims(), 1.0));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.grad_alloc && n.backward) n.backward(*this, n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    // deque keeps value()/grad() references stable while the tape grows
    std::deque<Node> nodes_;
};

inline const Tensor& Var::val() const { return g_->value(idx_); }
inline const Tensor& Var::grad() const { return g_->grad(idx_); }
inline bool Var::requires_grad() const { return g_->requires_grad(idx_); }

namespace detail {
inline bool any_rg(std::initializer_list<Var> vars) {
    for (const Var& v : vars)
        if (v.requires_grad()) return true;
    return false;
}
}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    Tensor out = a.val() + b.val();
    auto ai = a.index(), bi = b.index();
    return a.graph()->emit(std::move(out), detail::any_rg({a, b}),
                           [ai, bi](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, gr);
                               g.accumulate(bi, gr);
                           });
}

inline Var sub(Var a, Var b) {
    Tensor out = a.val() - b.val();
    auto ai = a.index(), bi = b.index();
    return a.graph()->emit(std::move(out), detail::any_rg({a, b}),
                           [ai, bi](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, gr);
                               g.accumulate(bi, gr * -1.0);
                           });
}

inline Var mul(Var a, Var b) {
    Tensor out = hadamard(a.val(), b.val());
    auto ai = a.index(), bi = b.index();
    return a.graph()->emit(std::move(out), detail::any_rg({a, b}),
                           [ai, bi](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, hadamard(gr, g.value(bi)));
                               g.accumulate(bi, hadamard(gr, g.value(ai)));
                           });
}

inline Var scale(Var a, double c) {
    auto ai = a.index();
    return a.graph()->emit(a.val() * c, a.requires_grad(),
                           [ai, c](Graph& g, const Tensor& gr) { g.accumulate(ai, gr * c); });
}

inline Var sigmoid(Var a) {
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    auto ai = a.index();
    Var r = a.graph()->emit(std::move(out), a.requires_grad(), nullptr);
    if (a.requires_grad()) {
        auto ri = r.index();
        a.graph()->node_backward(ri) = [ai, ri](Graph& g, const Tensor& gr) {
            const Tensor& s = g.value(ri);
            Tensor d = gr;
            for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= s[i] * (1.0 - s[i]);
            g.accumulate(ai, d);
        };
    }
    return r;
}

inline Var exp(Var a) {
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    auto ai = a.index();
    Var r = a.graph()->emit(std::move(out), a.requires_grad(), nullptr);
    if (a.requires_grad()) {
        auto ri = r.index();
        a.graph()->node_backward(ri) = [ai, ri](Graph& g, const Tensor& gr) {
            g.accumulate(ai, hadamard(gr, g.value(ri)));
        };
    }
    return r;
}

// log(max(x, eps)); gradient is zero on the clamped set
inline Var log_clamp(Var a, double eps) {
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(out[i], eps));
    auto ai = a.index();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, eps](Graph& g, const Tensor& gr) {
                               const Tensor& x = g.value(ai);
                               Tensor d = gr;
                               for (std::size_t i = 0; i < d.numel(); ++i)
                                   d[i] = x[i] > eps ? d[i] / x[i] : 0.0;
                               g.accumulate(ai, d);
                           });
}

inline Var leaky_relu(Var a, double slope) {
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i)
        if (out[i] < 0.0) out[i] *= slope;
    auto ai = a.index();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, slope](Graph& g, const Tensor& gr) {
                               const Tensor& x = g.value(ai);
                               Tensor d = gr;
                               for (std::size_t i = 0; i < d.numel(); ++i)
                                   if (x[i] < 0.0) d[i] *= slope;
                               g.accumulate(ai, d);
                           });
}

// ---- shape ----

inline Var reshape(Var a, Dims dims) {
    auto ai = a.index();
    Dims old = a.val().dims();
    return a.graph()->emit(a.val().reshaped(std::move(dims)), a.requires_grad(),
                           [ai, old](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, gr.reshaped(old));
                           });
}

inline Var transpose(Var a) {
    auto ai = a.index();
    return a.graph()->emit(pmcr::transpose(a.val()), a.requires_grad(),
                           [ai](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, pmcr::transpose(gr));
                           });
}

inline Var matmul(Var a, Var b) {
    Tensor out = pmcr::matmul(a.val(), b.val());
    auto ai = a.index(), bi = b.index();
    return a.graph()->emit(std::move(out), detail::any_rg({a, b}),
                           [ai, bi](Graph& g, const Tensor& gr) {
                               if (g.requires_grad(ai))
                                   g.accumulate(ai, pmcr::matmul(gr, pmcr::transpose(g.value(bi))));
                               if (g.requires_grad(bi))
                                   g.accumulate(bi, pmcr::matmul(pmcr::transpose(g.value(ai)), gr));
                           });
}

inline Var concat_rows(Var a, Var b) {
    const Tensor &A = a.val(), &B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols())
        throw DimMismatch("concat_rows");
    Tensor out({A.rows() + B.rows(), A.cols()});
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i];
    for (std::size_t i = 0; i < B.numel(); ++i) out[A.numel() + i] = B[i];
    auto ai = a.index(), bi = b.index();
    std::size_t an = A.numel();
    Dims ad = A.dims(), bd = B.dims();
    return a.graph()->emit(std::move(out), detail::any_rg({a, b}),
                           [=](Graph& g, const Tensor& gr) {
                               Tensor da(ad), db(bd);
                               for (std::size_t i = 0; i < da.numel(); ++i) da[i] = gr[i];
                               for (std::size_t i = 0; i < db.numel(); ++i) db[i] = gr[an + i];
                               g.accumulate(ai, da);
                               g.accumulate(bi, db);
                           });
}

inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Tensor& A = a.val();
    if (A.rank() != 2 || r1 > A.rows() || r0 >= r1) throw DimMismatch("slice_rows");
    Tensor out({r1 - r0, A.cols()});
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) out(i - r0, j) = A(i, j);
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, r0, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t i = 0; i < gr.rows(); ++i)
                                   for (std::size_t j = 0; j < gr.cols(); ++j)
                                       da(r0 + i, j) = gr(i, j);
                               g.accumulate(ai, da);
                           });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimMismatch("concat_cols: empty");
    Graph* gptr = parts[0].graph();
    std::size_t rows = parts[0].val().rows(), total = 0;
    bool rg = false;
    for (const Var& p : parts) {
        if (p.val().rank() != 2 || p.val().rows() != rows) throw DimMismatch("concat_cols");
        total += p.val().cols();
        rg = rg || p.requires_grad();
    }
    Tensor out({rows, total});
    std::size_t off = 0;
    std::vector<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>> spans;  // idx,(off,cols)
    for (const Var& p : parts) {
        const Tensor& P = p.val();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < P.cols(); ++j) out(i, off + j) = P(i, j);
        spans.push_back({p.index(), {off, P.cols()}});
        off += P.cols();
    }
    return gptr->emit(std::move(out), rg, [spans, rows](Graph& g, const Tensor& gr) {
        for (const auto& [idx, span] : spans) {
            if (!g.requires_grad(idx)) continue;
            Tensor d({rows, span.second});
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < span.second; ++j) d(i, j) = gr(i, span.first + j);
            g.accumulate(idx, d);
        }
    });
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& A = a.val();
    if (A.rank() != 2 || c1 > A.cols() || c0 >= c1) throw DimMismatch("slice_cols");
    Tensor out({A.rows(), c1 - c0});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = A(i, j);
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, c0, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t i = 0; i < gr.rows(); ++i)
                                   for (std::size_t j = 0; j < gr.cols(); ++j)
                                       da(i, c0 + j) = gr(i, j);
                               g.accumulate(ai, da);
                           });
}

inline Var gather_cols(Var a, std::vector<std::size_t> idx) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("gather_cols expects rank-2");
    Tensor out({A.rows(), idx.size()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = A(i, idx[j]);
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, idx, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t i = 0; i < gr.rows(); ++i)
                                   for (std::size_t j = 0; j < idx.size(); ++j)
                                       da(i, idx[j]) += gr(i, j);
                               g.accumulate(ai, da);
                           });
}

// ---- reductions / broadcasts ----

inline Var sum_all(Var a) {
    double s = 0.0;
    for (double v : a.val().data()) s += v;
    auto ai = a.index();
    Dims ad = a.val().dims();
    return a.graph()->emit(Tensor::scalar(s), a.requires_grad(),
                           [ai, ad](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, Tensor::full(ad, gr[0]));
                           });
}

inline Var sum_sq(Var a) {
    double s = 0.0;
    for (double v : a.val().data()) s += v * v;
    auto ai = a.index();
    return a.graph()->emit(Tensor::scalar(s), a.requires_grad(),
                           [ai](Graph& g, const Tensor& gr) {
                               g.accumulate(ai, g.value(ai) * (2.0 * gr[0]));
                           });
}

inline Var s_div(Var a, Var b) {
    if (a.val().numel() != 1 || b.val().numel() != 1) throw DimMismatch("s_div expects scalars");
    auto ai = a.index(), bi = b.index();
    return a.graph()->emit(Tensor::scalar(a.val()[0] / b.val()[0]), detail::any_rg({a, b}),
                           [ai, bi](Graph& g, const Tensor& gr) {
                               double av = g.value(ai)[0], bv = g.value(bi)[0];
                               g.accumulate(ai, Tensor::scalar(gr[0] / bv));
                               g.accumulate(bi, Tensor::scalar(-gr[0] * av / (bv * bv)));
                           });
}

// rank-1 vector of row sums of a 2D matrix
inline Var rowsum_vec(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("rowsum_vec");
    Tensor out({A.rows()});
    for (std::size_t i = 0; i < A.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < A.cols(); ++j) s += A(i, j);
        out[i] = s;
    }
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t i = 0; i < ad[0]; ++i)
                                   for (std::size_t j = 0; j < ad[1]; ++j) da(i, j) = gr[i];
                               g.accumulate(ai, da);
                           });
}

inline Var colsum_vec(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("colsum_vec");
    Tensor out({A.cols()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) out[j] += A(i, j);
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t i = 0; i < ad[0]; ++i)
                                   for (std::size_t j = 0; j < ad[1]; ++j) da(i, j) = gr[j];
                               g.accumulate(ai, da);
                           });
}

// out(i,j) = A(i,j) / v(j)
inline Var div_colbroadcast(Var a, Var v) {
    const Tensor& A = a.val();
    const Tensor& V = v.val();
    if (A.rank() != 2 || V.rank() != 1 || V.dim(0) != A.cols()) throw DimMismatch("div_colbroadcast");
    Tensor out = A;
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) /= V[j];
    auto ai = a.index(), vi = v.index();
    return a.graph()->emit(std::move(out), detail::any_rg({a, v}),
                           [ai, vi](Graph& g, const Tensor& gr) {
                               const Tensor& A2 = g.value(ai);
                               const Tensor& V2 = g.value(vi);
                               if (g.requires_grad(ai)) {
                                   Tensor da = gr;
                                   for (std::size_t i = 0; i < da.rows(); ++i)
                                       for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) /= V2[j];
                                   g.accumulate(ai, da);
                               }
                               if (g.requires_grad(vi)) {
                                   Tensor dv({V2.dim(0)});
                                   for (std::size_t i = 0; i < A2.rows(); ++i)
                                       for (std::size_t j = 0; j < A2.cols(); ++j)
                                           dv[j] -= gr(i, j) * A2(i, j) / (V2[j] * V2[j]);
                                   g.accumulate(vi, dv);
                               }
                           });
}

// ---- softmax family ----

namespace detail {
inline void softmax_span(const double* in, double* out, std::size_t n, std::size_t stride) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i * stride] = std::exp(in[i * stride] - mx);
        sum += out[i * stride];
    }
    for (std::size_t i = 0; i < n; ++i) out[i * stride] /= sum;
}
inline void softmax_bwd_span(const double* s, const double* gr, double* out, std::size_t n,
                             std::size_t stride) {
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += s[i * stride] * gr[i * stride];
    for (std::size_t i = 0; i < n; ++i) out[i * stride] += s[i * stride] * (gr[i * stride] - dot);
}
}  // namespace detail

inline Var softmax_vec(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 1) throw DimMismatch("softmax_vec expects rank-1");
    Tensor out(A.dims());
    detail::softmax_span(A.data().data(), out.data().data(), A.dim(0), 1);
    auto ai = a.index();
    Var r = a.graph()->emit(std::move(out), a.requires_grad(), nullptr);
    if (a.requires_grad()) {
        auto ri = r.index();
        a.graph()->node_backward(ri) = [ai, ri](Graph& g, const Tensor& gr) {
            Tensor da(g.value(ai).dims());
            detail::softmax_bwd_span(g.value(ri).data().data(), gr.data().data(),
                                     da.data().data(), da.dim(0), 1);
            g.accumulate(ai, da);
        };
    }
    return r;
}

// softmax across each row (normalizes over columns)
inline Var softmax_rows(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("softmax_rows");
    Tensor out(A.dims());
    for (std::size_t i = 0; i < A.rows(); ++i)
        detail::softmax_span(A.data().data() + i * A.cols(), out.data().data() + i * A.cols(),
                             A.cols(), 1);
    auto ai = a.index();
    Var r = a.graph()->emit(std::move(out), a.requires_grad(), nullptr);
    if (a.requires_grad()) {
        auto ri = r.index();
        a.graph()->node_backward(ri) = [ai, ri](Graph& g, const Tensor& gr) {
            const Tensor& s = g.value(ri);
            Tensor da(s.dims());
            for (std::size_t i = 0; i < s.rows(); ++i)
                detail::softmax_bwd_span(s.data().data() + i * s.cols(),
                                         gr.data().data() + i * s.cols(),
                                         da.data().data() + i * s.cols(), s.cols(), 1);
            g.accumulate(ai, da);
        };
    }
    return r;
}

// softmax down each column (normalizes over rows)
inline Var softmax_cols(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("softmax_cols");
    Tensor out(A.dims());
    for (std::size_t j = 0; j < A.cols(); ++j)
        detail::softmax_span(A.data().data() + j, out.data().data() + j, A.rows(), A.cols());
    auto ai = a.index();
    Var r = a.graph()->emit(std::move(out), a.requires_grad(), nullptr);
    if (a.requires_grad()) {
        auto ri = r.index();
        a.graph()->node_backward(ri) = [ai, ri](Graph& g, const Tensor& gr) {
            const Tensor& s = g.value(ri);
            Tensor da(s.dims());
            for (std::size_t j = 0; j < s.cols(); ++j)
                detail::softmax_bwd_span(s.data().data() + j, gr.data().data() + j,
                                         da.data().data() + j, s.rows(), s.cols());
            g.accumulate(ai, da);
        };
    }
    return r;
}

// ---- geometry-specific ops ----

// out(p,f) = sum_d (X(d,p) - S(d,f))^2 for column vectors of X (D x N) and S (D x F)
inline Var sqdist_cols(Var x, Var s) {
    const Tensor& X = x.val();
    const Tensor& S = s.val();
    if (X.rank() != 2 || S.rank() != 2 || X.rows() != S.rows()) throw DimMismatch("sqdist_cols");
    const std::size_t D = X.rows(), N = X.cols(), F = S.cols();
    Tensor out({N, F});
    for (std::size_t p = 0; p < N; ++p)
        for (std::size_t f = 0; f < F; ++f) {
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                double diff = X(d, p) - S(d, f);
                acc += diff * diff;
            }
            out(p, f) = acc;
        }
    auto xi = x.index(), si = s.index();
    return x.graph()->emit(std::move(out), detail::any_rg({x, s}),
                           [xi, si, D, N, F](Graph& g, const Tensor& gr) {
                               const Tensor& X2 = g.value(xi);
                               const Tensor& S2 = g.value(si);
                               Tensor dx({D, N}), ds({D, F});
                               for (std::size_t p = 0; p < N; ++p)
                                   for (std::size_t f = 0; f < F; ++f) {
                                       double w = 2.0 * gr(p, f);
                                       if (w == 0.0) continue;
                                       for (std::size_t d = 0; d < D; ++d) {
                                           double diff = X2(d, p) - S2(d, f);
                                           dx(d, p) += w * diff;
                                           ds(d, f) -= w * diff;
                                       }
                                   }
                               if (g.requires_grad(xi)) g.accumulate(xi, dx);
                               if (g.requires_grad(si)) g.accumulate(si, ds);
                           });
}

// Normalizes each column to unit L2 norm; eps keeps zero columns finite.
inline Var l2_normalize_cols(Var a, double eps = 1e-12) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("l2_normalize_cols");
    const std::size_t D = A.rows(), N = A.cols();
    Tensor out(A.dims());
    std::vector<double> norms(N);
    for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < D; ++i) s += A(i, j) * A(i, j);
        norms[j] = std::sqrt(s + eps);
        for (std::size_t i = 0; i < D; ++i) out(i, j) = A(i, j) / norms[j];
    }
    auto ai = a.index();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, norms, D, N](Graph& g, const Tensor& gr) {
                               const Tensor& A2 = g.value(ai);
                               Tensor da(A2.dims());
                               for (std::size_t j = 0; j < N; ++j) {
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < D; ++i) dot += A2(i, j) * gr(i, j);
                                   const double n = norms[j], n3 = n * n * n;
                                   for (std::size_t i = 0; i < D; ++i)
                                       da(i, j) = gr(i, j) / n - A2(i, j) * dot / n3;
                               }
                               g.accumulate(ai, da);
                           });
}

// Column-wise max over rows -> rank-1 vector; gradient routes to the first
// argmax per column.
inline Var colwise_max(Var a) {
    const Tensor& A = a.val();
    if (A.rank() != 2) throw DimMismatch("colwise_max");
    const std::size_t R = A.rows(), C = A.cols();
    Tensor out({C});
    std::vector<std::size_t> arg(C, 0);
    for (std::size_t j = 0; j < C; ++j) {
        double best = A(0, j);
        for (std::size_t i = 1; i < R; ++i)
            if (A(i, j) > best) {
                best = A(i, j);
                arg[j] = i;
            }
        out[j] = best;
    }
    auto ai = a.index();
    Dims ad = A.dims();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, arg, ad](Graph& g, const Tensor& gr) {
                               Tensor da(ad);
                               for (std::size_t j = 0; j < ad[1]; ++j) da(arg[j], j) = gr[j];
                               g.accumulate(ai, da);
                           });
}

inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw DimMismatch("stack_rows: empty");
    Graph* gptr = rows[0].graph();
    const std::size_t C = rows[0].val().numel();
    bool rg = false;
    Tensor out({rows.size(), C});
    std::vector<std::size_t> ids;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Tensor& v = rows[r].val();
        if (v.rank() != 1 || v.dim(0) != C) throw DimMismatch("stack_rows: ragged");
        for (std::size_t j = 0; j < C; ++j) out(r, j) = v[j];
        rg = rg || rows[r].requires_grad();
        ids.push_back(rows[r].index());
    }
    return gptr->emit(std::move(out), rg, [ids, C](Graph& g, const Tensor& gr) {
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (!g.requires_grad(ids[r])) continue;
            Tensor d({C});
            for (std::size_t j = 0; j < C; ++j) d[j] = gr(r, j);
            g.accumulate(ids[r], d);
        }
    });
}

// ---- convolution / resampling ----

// Cross-correlation of input (Cin x H x W) with kernel (Cout x Cin x kh x kw),
// zero padding, square stride. Output (Cout x H' x W').
inline Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad) {
    const Tensor& X = input.val();
    const Tensor& K = kernel.val();
    if (X.rank() != 3 || K.rank() != 4 || K.dim(1) != X.dim(0)) throw DimMismatch("conv2d");
    const std::size_t Cin = X.dim(0), H = X.dim(1), W = X.dim(2);
    const std::size_t Cout = K.dim(0), kh = K.dim(2), kw = K.dim(3);
    if (H + 2 * pad < kh || W + 2 * pad < kw) throw DimMismatch("conv2d: kernel larger than input");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out({Cout, Ho, Wo});
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                double acc = 0.0;
                for (std::size_t ci = 0; ci < Cin; ++ci)
                    for (std::size_t u = 0; u < kh; ++u) {
                        const long ih = long(oh * stride + u) - long(pad);
                        if (ih < 0 || ih >= long(H)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const long iw = long(ow * stride + v) - long(pad);
                            if (iw < 0 || iw >= long(W)) continue;
                            acc += X(ci, std::size_t(ih), std::size_t(iw)) * K(co, ci, u, v);
                        }
                    }
                out(co, oh, ow) = acc;
            }
    auto xi = input.index(), ki = kernel.index();
    return input.graph()->emit(
        std::move(out), detail::any_rg({input, kernel}),
        [xi, ki, stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo](Graph& g, const Tensor& gr) {
            const Tensor& X2 = g.value(xi);
            const Tensor& K2 = g.value(ki);
            const bool need_dx = g.requires_grad(xi), need_dk = g.requires_grad(ki);
            Tensor dx({Cin, H, W}), dk({Cout, Cin, kh, kw});
            for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        const double go = gr(co, oh, ow);
                        if (go == 0.0) continue;
                        for (std::size_t ci = 0; ci < Cin; ++ci)
                            for (std::size_t u = 0; u < kh; ++u) {
                                const long ih = long(oh * stride + u) - long(pad);
                                if (ih < 0 || ih >= long(H)) continue;
                                for (std::size_t v = 0; v < kw; ++v) {
                                    const long iw = long(ow * stride + v) - long(pad);
                                    if (iw < 0 || iw >= long(W)) continue;
                                    if (need_dx)
                                        dx(ci, std::size_t(ih), std::size_t(iw)) += go * K2(co, ci, u, v);
                                    if (need_dk)
                                        dk(co, ci, u, v) += go * X2(ci, std::size_t(ih), std::size_t(iw));
                                }
                            }
                    }
            if (need_dx) g.accumulate(xi, dx);
            if (need_dk) g.accumulate(ki, dk);
        });
}

// per-channel bias add on a (C x H x W) map
inline Var bias_add(Var input, Var bias) {
    const Tensor& X = input.val();
    const Tensor& B = bias.val();
    if (X.rank() != 3 || B.rank() != 1 || B.dim(0) != X.dim(0)) throw DimMismatch("bias_add");
    Tensor out = X;
    const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < HW; ++k) out[c * HW + k] += B[c];
    auto xi = input.index(), bi = bias.index();
    return input.graph()->emit(std::move(out), detail::any_rg({input, bias}),
                               [xi, bi, C, HW](Graph& g, const Tensor& gr) {
                                   g.accumulate(xi, gr);
                                   if (g.requires_grad(bi)) {
                                       Tensor db({C});
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t k = 0; k < HW; ++k) db[c] += gr[c * HW + k];
                                       g.accumulate(bi, db);
                                   }
                               });
}

enum class Upsample { Nearest, Bilinear };

// Resizes (C x h x w) to (C x H x W) with pixel-center alignment.
inline Var upsample2d(Var a, std::size_t H, std::size_t W, Upsample mode) {
    const Tensor& A = a.val();
    if (A.rank() != 3) throw DimMismatch("upsample2d expects C x h x w");
    const std::size_t C = A.dim(0), h = A.dim(1), w = A.dim(2);
    Tensor out({C, H, W});
    // (index, weight) pairs per output coordinate, reused by the backward pass
    struct Tap {
        std::size_t i0, i1;
        double w1;  // weight on i1; (1-w1) on i0
    };
    auto taps_for = [](std::size_t n_out, std::size_t n_in, Upsample m) {
        std::vector<Tap> taps(n_out);
        for (std::size_t i = 0; i < n_out; ++i) {
            double src = (double(i) + 0.5) * double(n_in) / double(n_out) - 0.5;
            if (m == Upsample::Nearest) {
                double nearest = std::floor(src + 0.5);
                std::size_t s = std::size_t(std::clamp(nearest, 0.0, double(n_in - 1)));
                taps[i] = {s, s, 0.0};
            } else {
                double f = std::floor(src);
                double frac = src - f;
                long lo = long(f);
                std::size_t i0 = std::size_t(std::clamp(lo, 0l, long(n_in - 1)));
                std::size_t i1 = std::size_t(std::clamp(lo + 1, 0l, long(n_in - 1)));
                taps[i] = {i0, i1, frac};
            }
        }
        return taps;
    };
    auto ty = taps_for(H, h, mode), tx = taps_for(W, w, mode);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const Tap &a0 = ty[i], &b0 = tx[j];
                double v00 = A(c, a0.i0, b0.i0), v01 = A(c, a0.i0, b0.i1);
                double v10 = A(c, a0.i1, b0.i0), v11 = A(c, a0.i1, b0.i1);
                out(c, i, j) = (1 - a0.w1) * ((1 - b0.w1) * v00 + b0.w1 * v01) +
                               a0.w1 * ((1 - b0.w1) * v10 + b0.w1 * v11);
            }
    auto ai = a.index();
    return a.graph()->emit(std::move(out), a.requires_grad(),
                           [ai, ty, tx, C, h, w, H, W](Graph& g, const Tensor& gr) {
                               Tensor da({C, h, w});
                               for (std::size_t c = 0; c < C; ++c)
                                   for (std::size_t i = 0; i < H; ++i)
                                       for (std::size_t j = 0; j < W; ++j) {
                                           const Tap &a0 = ty[i], &b0 = tx[j];
                                           const double go = gr(c, i, j);
                                           da(c, a0.i0, b0.i0) += (1 - a0.w1) * (1 - b0.w1) * go;
                                           da(c, a0.i0, b0.i1) += (1 - a0.w1) * b0.w1 * go;
                                           da(c, a0.i1, b0.i0) += a0.w1 * (1 - b0.w1) * go;
                                           da(c, a0.i1, b0.i1) += a0.w1 * b0.w1 * go;
                                       }
                               g.accumulate(ai, da);
                           });
}

}  // namespace pmcr::ad
