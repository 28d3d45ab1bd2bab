#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "pmeta/error.hpp"

namespace pmeta::ad {

// Dense row-major tensor of 64-bit floats. Rank is arbitrary, but the graph
// ops only ever build rank-1 vectors, rank-2 matrices and {1} scalars.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size())
            throw ShapeError("tensor: shape/data size mismatch");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

    static Tensor row(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({1, n}, std::move(v));
    }

    static Tensor vec(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    std::size_t rows() const {
        require_rank2("rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return shape_[1];
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) {
        require_rank2("operator()");
        return data_[r * shape_[1] + c];
    }
    double operator()(std::size_t r, std::size_t c) const {
        require_rank2("operator()");
        return data_[r * shape_[1] + c];
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double item() const {
        if (!is_scalar()) throw ShapeError("tensor: item() on non-scalar");
        return data_[0];
    }

    // this += c * other
    Tensor& add_scaled(const Tensor& other, double c) {
        if (!same_shape(other)) throw ShapeError("tensor: add_scaled shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * other.data_[i];
        return *this;
    }

    Tensor& scale(double c) {
        for (double& v : data_) v *= c;
        return *this;
    }

    Tensor& fill(double c) {
        for (double& v : data_) v = c;
        return *this;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
    void require_rank2(const char* what) const {
        if (shape_.size() != 2) throw ShapeError(std::string("tensor: ") + what + " requires rank-2, got " + shape_str());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Normwise relative error: worst absolute deviation over the larger of the
// two max-norms. The standard gradient-check metric; immune to
// finite-difference cancellation noise on structurally zero components.
inline double normwise_rel_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("normwise_rel_diff: shape mismatch");
    double diff = 0.0, scale = 1e-300;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return diff / scale;
}

// Symmetric relative error, with an absolute floor for near-zero pairs.
inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-10) {
    if (!a.same_shape(b)) throw ShapeError("max_rel_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double denom = std::abs(a[i]) + std::abs(b[i]) + floor;
        m = std::max(m, std::abs(a[i] - b[i]) / denom);
    }
    return m;
}

}  // namespace pmeta::ad
