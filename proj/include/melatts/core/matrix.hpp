#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace melatts {

// Dense row-major matrix. All model state and activations use this type;
// vectors are represented as 1xN or Nx1 matrices. Matrix(r, c) zero-fills;
// uninit(r, c) skips the fill for outputs that are fully overwritten.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols) : Matrix(rows, cols, Uninit{}) {
        std::fill(data_.get(), data_.get() + size_, T(0));
    }
    Matrix(int rows, int cols, T fill) : Matrix(rows, cols, Uninit{}) {
        std::fill(data_.get(), data_.get() + size_, fill);
    }

    static Matrix uninit(int rows, int cols) { return Matrix(rows, cols, Uninit{}); }
    static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
    static Matrix full(int rows, int cols, T value) { return Matrix(rows, cols, value); }

    Matrix(const Matrix& o) : Matrix(o.rows_, o.cols_, Uninit{}) {
        std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
    }
    Matrix& operator=(const Matrix& o) {
        if (this == &o) return *this;
        if (size_ != o.size_) {
            data_ = std::make_unique_for_overwrite<T[]>(o.size_);
            size_ = o.size_;
        }
        rows_ = o.rows_;
        cols_ = o.cols_;
        std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
        return *this;
    }
    Matrix(Matrix&& o) noexcept : rows_(o.rows_), cols_(o.cols_), size_(o.size_), data_(std::move(o.data_)) {
        o.rows_ = o.cols_ = 0;
        o.size_ = 0;
    }
    Matrix& operator=(Matrix&& o) noexcept {
        rows_ = o.rows_;
        cols_ = o.cols_;
        size_ = o.size_;
        data_ = std::move(o.data_);
        o.rows_ = o.cols_ = 0;
        o.size_ = 0;
        return *this;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    T* data() { return data_.get(); }
    const T* data() const { return data_.get(); }
    T* row(int r) { return data_.get() + static_cast<size_t>(r) * cols_; }
    const T* row(int r) const { return data_.get() + static_cast<size_t>(r) * cols_; }

    T& operator()(int r, int c) {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<size_t>(r) * cols_ + c];
    }
    const T& operator()(int r, int c) const {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<size_t>(r) * cols_ + c];
    }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    void set_zero() { std::fill(data_.get(), data_.get() + size_, T(0)); }

    bool all_finite() const {
        for (size_t i = 0; i < size_; ++i)
            if (!std::isfinite(static_cast<double>(data_[i]))) return false;
        return true;
    }

    T max_abs() const {
        T m = 0;
        for (size_t i = 0; i < size_; ++i) m = std::max(m, static_cast<T>(std::abs(data_[i])));
        return m;
    }

    Matrix reshaped(int rows, int cols) const {
        if (static_cast<size_t>(rows) * cols != size_)
            throw std::invalid_argument("Matrix::reshaped: element count mismatch");
        Matrix out = *this;
        out.rows_ = rows;
        out.cols_ = cols;
        return out;
    }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out = Matrix<U>::uninit(rows_, cols_);
        for (size_t i = 0; i < size_; ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    struct Uninit {};
    Matrix(int rows, int cols, Uninit) : rows_(rows), cols_(cols) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Matrix: negative shape");
        size_ = static_cast<size_t>(rows) * cols;
        data_ = std::make_unique_for_overwrite<T[]>(size_);
    }

    int rows_ = 0;
    int cols_ = 0;
    size_t size_ = 0;
    std::unique_ptr<T[]> data_;
};

template <typename T>
using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstEigenMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
EigenMap<T> as_eigen(Matrix<T>& m) {
    return EigenMap<T>(m.data(), m.rows(), m.cols());
}
template <typename T>
ConstEigenMap<T> as_eigen(const Matrix<T>& m) {
    return ConstEigenMap<T>(m.data(), m.rows(), m.cols());
}

// out (+)= a * b
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.cols() == b.rows());
    if (!accumulate) {
        out = Matrix<T>::uninit(a.rows(), b.cols());
        as_eigen(out).noalias() = as_eigen(a) * as_eigen(b);
    } else {
        assert(out.rows() == a.rows() && out.cols() == b.cols());
        as_eigen(out).noalias() += as_eigen(a) * as_eigen(b);
    }
}

// out (+)= a * b^T
template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.cols() == b.cols());
    if (!accumulate) {
        out = Matrix<T>::uninit(a.rows(), b.rows());
        as_eigen(out).noalias() = as_eigen(a) * as_eigen(b).transpose();
    } else {
        assert(out.rows() == a.rows() && out.cols() == b.rows());
        as_eigen(out).noalias() += as_eigen(a) * as_eigen(b).transpose();
    }
}

// out (+)= a^T * b
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.rows() == b.rows());
    if (!accumulate) {
        out = Matrix<T>::uninit(a.cols(), b.cols());
        as_eigen(out).noalias() = as_eigen(a).transpose() * as_eigen(b);
    } else {
        assert(out.rows() == a.cols() && out.cols() == b.cols());
        as_eigen(out).noalias() += as_eigen(a).transpose() * as_eigen(b);
    }
}

template <typename T>
void axpy(Matrix<T>& y, const Matrix<T>& x, T alpha = T(1)) {
    assert(y.same_shape(x));
    T* yd = y.data();
    const T* xd = x.data();
    if (alpha == T(1)) {
        for (size_t i = 0; i < y.size(); ++i) yd[i] += xd[i];
    } else {
        for (size_t i = 0; i < y.size(); ++i) yd[i] += alpha * xd[i];
    }
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    assert(a.same_shape(b));
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a.data()[i] - b.data()[i])));
    return m;
}

template <typename T>
Matrix<T> vstack(const std::vector<Matrix<T>>& parts) {
    if (parts.empty()) return {};
    int cols = parts[0].cols();
    int rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("vstack: column mismatch");
        rows += p.rows();
    }
    Matrix<T> out = Matrix<T>::uninit(rows, cols);
    int r = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.row(r));
        r += p.rows();
    }
    return out;
}

}  // namespace melatts
