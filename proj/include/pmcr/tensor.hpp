#pragma once

// Dense row-major tensor of 64-bit reals plus the integer label Mask.
// Tensors are plain values: copy freely, no views, no aliasing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pmcr/errors.hpp"

namespace pmcr {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_numel(const Dims& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) throw DimOverflow("zero-sized dimension");
        if (n > (std::size_t(1) << 40) / d) throw DimOverflow("tensor too large");
        n *= d;
    }
    return n;
}

inline std::string dims_str(const Dims& dims) {
    std::string s = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + ")";
}

class Tensor {
public:
    Tensor() : dims_{}, data_(1, 0.0) {}  // rank-0 scalar
    explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(dims_numel(dims_), 0.0) {}
    Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
        if (data_.size() != dims_numel(dims_))
            throw DimMismatch("data length " + std::to_string(data_.size()) +
                              " does not match dims " + dims_str(dims_));
    }

    static Tensor scalar(double v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }
    static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
    static Tensor full(Dims dims, double v) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    std::size_t rank() const { return dims_.size(); }
    const Dims& dims() const { return dims_; }
    std::size_t dim(std::size_t i) const { return dims_.at(i); }
    std::size_t numel() const { return data_.size(); }

    // rank-2 helpers
    std::size_t rows() const { return dims_.at(0); }
    std::size_t cols() const { return dims_.at(1); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(Dims new_dims) const {
        if (dims_numel(new_dims) != numel())
            throw DimMismatch("reshape " + dims_str(dims_) + " -> " + dims_str(new_dims));
        return Tensor(std::move(new_dims), data_);
    }

private:
    Dims dims_;
    std::vector<double> data_;
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b)) throw DimMismatch("add " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b)) throw DimMismatch("sub " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor operator*(const Tensor& a, double c) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return out;
}
inline Tensor operator*(double c, const Tensor& a) { return a * c; }

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b)) throw DimMismatch("hadamard " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimMismatch("matmul " + dims_str(a.dims()) + " x " + dims_str(b.dims()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
        }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimMismatch("transpose expects rank-2, got " + dims_str(a.dims()));
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

inline double frobenius_sq(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b)) throw DimMismatch("max_abs_diff dims differ");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Integer class-label image; 0 is background.
class Mask {
public:
    Mask() : h_(1), w_(1), data_(1, 0) {}
    Mask(std::size_t h, std::size_t w) : h_(h), w_(w), data_(h * w, 0) {
        if (h == 0 || w == 0) throw ZeroTargetDim("mask dims must be positive");
    }
    Mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> labels)
        : h_(h), w_(w), data_(std::move(labels)) {
        if (data_.size() != h * w) throw DimMismatch("mask data length");
    }

    std::size_t height() const { return h_; }
    std::size_t width() const { return w_; }
    std::size_t numel() const { return data_.size(); }
    std::uint8_t& operator()(std::size_t i, std::size_t j) { return data_[i * w_ + j]; }
    std::uint8_t operator()(std::size_t i, std::size_t j) const { return data_[i * w_ + j]; }
    std::span<std::uint8_t> data() { return data_; }
    std::span<const std::uint8_t> data() const { return data_; }

    bool operator==(const Mask& o) const { return h_ == o.h_ && w_ == o.w_ && data_ == o.data_; }

    std::size_t count(std::uint8_t label) const {
        return std::count(data_.begin(), data_.end(), label);
    }

private:
    std::size_t h_, w_;
    std::vector<std::uint8_t> data_;
};

// Nearest-neighbor label resampling with pixel-center sampling.
inline Mask downsample_mask(const Mask& m, std::size_t target_h, std::size_t target_w) {
    if (target_h == 0 || target_w == 0) throw ZeroTargetDim("downsample_mask target");
    if (target_h > m.height() || target_w > m.width())
        throw DimMismatch("downsample_mask target exceeds source");
    Mask out(target_h, target_w);
    for (std::size_t i = 0; i < target_h; ++i) {
        std::size_t si = std::min(m.height() - 1,
                                  std::size_t((double(i) + 0.5) * double(m.height()) / double(target_h)));
        for (std::size_t j = 0; j < target_w; ++j) {
            std::size_t sj = std::min(m.width() - 1,
                                      std::size_t((double(j) + 0.5) * double(m.width()) / double(target_w)));
            out(i, j) = m(si, sj);
        }
    }
    return out;
}

}  // namespace pmcr
