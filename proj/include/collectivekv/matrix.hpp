#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"

namespace ckv {

/// Dense row-major matrix of 64-bit floats. All learnable state and all
/// sequence/pool data in this library lives in this one type.
class Matrix {
  public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw shape_error("Matrix: data length " + std::to_string(data_.size()) +
                              " does not match " + shape_str());
    }

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_)
                throw shape_error("Matrix: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
    const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void set_zero() { fill(0.0); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    Matrix row(std::size_t r) const {
        Matrix out(1, cols_);
        std::copy(row_ptr(r), row_ptr(r) + cols_, out.data());
        return out;
    }

    /// Columns [c0, c1) as a new matrix.
    Matrix col_slice(std::size_t c0, std::size_t c1) const {
        if (c0 > c1 || c1 > cols_)
            throw shape_error("col_slice: [" + std::to_string(c0) + "," + std::to_string(c1) +
                              ") out of range for " + shape_str());
        Matrix out(rows_, c1 - c0);
        for (std::size_t r = 0; r < rows_; ++r)
            std::copy(row_ptr(r) + c0, row_ptr(r) + c1, out.row_ptr(r));
        return out;
    }

    Matrix transposed() const {
        Matrix out(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
        return out;
    }

    Matrix& operator+=(const Matrix& other) {
        require_same_shape(other, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Matrix& operator-=(const Matrix& other) {
        require_same_shape(other, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

    void require_same_shape(const Matrix& other, const char* op) const {
        if (!same_shape(other))
            throw shape_error(std::string(op) + ": shape mismatch (" + shape_str() + " vs " +
                              other.shape_str() + ")");
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Standard row-major matrix product.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw shape_error("matmul: dimension mismatch (" + a.shape_str() + " vs " +
                          b.shape_str() + ")");
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            const double* brow = b.row_ptr(p);
            for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
        }
    }
    return out;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw shape_error("matmul_tn: dimension mismatch (" + a.shape_str() + " vs " +
                          b.shape_str() + ")");
    Matrix out(a.cols(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t t = 0; t < n; ++t) {
        const double* arow = a.row_ptr(t);
        const double* brow = b.row_ptr(t);
        for (std::size_t i = 0; i < k; ++i) {
            const double ati = arow[i];
            if (ati == 0.0) continue;
            double* orow = out.row_ptr(i);
            for (std::size_t j = 0; j < m; ++j) orow[j] += ati * brow[j];
        }
    }
    return out;
}

/// a·bᵀ; both operands indexed by rows, contiguous dot products.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw shape_error("matmul_nt: dimension mismatch (" + a.shape_str() + " vs " +
                          b.shape_str() + ")");
    Matrix out(a.rows(), b.rows());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row_ptr(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out(i, j) = acc;
        }
    }
    return out;
}

/// x·W + b with the 1×cols bias broadcast over rows.
inline Matrix linear(const Matrix& x, const Matrix& weight, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != weight.cols())
        throw shape_error("linear: bias " + bias.shape_str() + " does not match weight " +
                          weight.shape_str());
    Matrix out = matmul(x, weight);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double* orow = out.row_ptr(r);
        for (std::size_t c = 0; c < out.cols(); ++c) orow[c] += bias(0, c);
    }
    return out;
}

/// Horizontal concatenation [a | b].
inline Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw shape_error("hconcat: row mismatch (" + a.shape_str() + " vs " + b.shape_str() +
                          ")");
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row_ptr(r), a.row_ptr(r) + a.cols(), out.row_ptr(r));
        std::copy(b.row_ptr(r), b.row_ptr(r) + b.cols(), out.row_ptr(r) + a.cols());
    }
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.values()) acc += v * v;
    return std::sqrt(acc);
}

inline double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "max_abs_diff");
    double best = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
    return best;
}

inline double dot(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace ckv
