#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wdstagnn/error.hpp"

namespace wdstagnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major array of doubles. A rank-0 tensor holds one scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
        check_extents();
        if (data_.size() != shape_size(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                 shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            t.data_[i * n + i] = 1.0;
        }
        return t;
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> v;
        v.reserve(r * c);
        for (const auto &row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged matrix literal");
            }
            v.insert(v.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(v));
    }

    const Shape &shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    double *data() { return data_.data(); }
    const double *data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double> &storage() const { return data_; }

    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double &operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double &operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double item() const {
        if (data_.size() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    Tensor &operator+=(const Tensor &other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += other.data_[i];
        }
        return *this;
    }

    Tensor &operator*=(double s) {
        for (double &v : data_) {
            v *= s;
        }
        return *this;
    }

    friend bool operator==(const Tensor &a, const Tensor &b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

    void require_same_shape(const Tensor &other, const char *what) const {
        if (shape_ != other.shape_) {
            throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(shape_) + " vs " +
                                 shape_str(other.shape_));
        }
    }

private:
    void check_extents() const {
        for (std::size_t e : shape_) {
            if (e == 0) {
                throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor &a, const Tensor &b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

} // namespace wdstagnn
