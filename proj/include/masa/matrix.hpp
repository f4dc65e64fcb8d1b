#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "masa/errors.hpp"

namespace masa {

// Dense row-major matrix of doubles. A default-constructed matrix is empty (0x0);
// every other matrix has rows >= 1 and cols >= 1.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {
        if (rows == 0 || cols == 0) {
            throw DimensionError("Matrix: dimensions must be positive, got " + shape_str(rows, cols));
        }
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows == 0 || cols == 0) {
            throw DimensionError("Matrix: dimensions must be positive, got " + shape_str(rows, cols));
        }
        if (data_.size() != rows * cols) {
            throw DimensionError("Matrix: " + std::to_string(data_.size()) + " values do not fill " +
                                 shape_str(rows, cols));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        if (rows_ == 0 || cols_ == 0) throw DimensionError("Matrix: empty initializer");
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape() const { return shape_str(rows_, cols_); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    // Exact (bitwise for finite values) equality.
    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    static std::string shape_str(std::size_t r, std::size_t c) {
        return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }

    void require_same(const Matrix& o, const char* what) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string(what) + ": shape mismatch " + shape() + " vs " + o.shape());
        }
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ for " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions differ for " + a.shape() + " x " + b.shape() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    a.require_same(b, "hadamard");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline double sum(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    a.require_same(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ||a - b||_F / max(||b||_F, floor)
inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-300) {
    return frobenius_norm(a - b) / std::max(frobenius_norm(b), floor);
}

// Column-wise mean subtraction.
inline Matrix center_columns(const Matrix& a) {
    Matrix out = a;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) mean += a(i, j);
        mean /= static_cast<double>(a.rows());
        for (std::size_t i = 0; i < a.rows(); ++i) out(i, j) -= mean;
    }
    return out;
}

inline Matrix row_slice(const Matrix& a, std::size_t begin, std::size_t end) {
    if (begin >= end || end > a.rows()) {
        throw DimensionError("row_slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + a.shape());
    }
    Matrix out(end - begin, a.cols());
    std::copy(a.row(begin).begin(), a.row(begin).begin() + (end - begin) * a.cols(), out.data().begin());
    return out;
}

// Rows of `a` picked by index, in the given order.
inline Matrix gather_rows(const Matrix& a, std::span<const std::size_t> idx) {
    if (idx.empty()) throw ContractError("gather_rows: empty index list");
    Matrix out(idx.size(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= a.rows()) throw DimensionError("gather_rows: row index out of range for " + a.shape());
        std::copy(a.row(idx[i]).begin(), a.row(idx[i]).end(), out.row(i).begin());
    }
    return out;
}

// Reinterpret the row-major buffer with a new shape of identical size.
inline Matrix reshape(const Matrix& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a.size()) {
        throw DimensionError("reshape: cannot view " + a.shape() + " as " + Matrix::shape_str(rows, cols));
    }
    return Matrix(rows, cols, std::vector<double>(a.data().begin(), a.data().end()));
}

} // namespace masa
