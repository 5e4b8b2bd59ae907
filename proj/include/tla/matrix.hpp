// Dense row-major matrix with the handful of kernels the rest of the library
// needs. Two rules govern every kernel here:
//   * accumulation over the contraction index runs left to right, always, so
//     a run is bit-reproducible for a fixed build;
//   * any shape violation throws immediately with both shapes in the message.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tla {

template <typename T>
class Matrix {
    static_assert(std::is_floating_point_v<T>);

public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    T* row(std::size_t r) { return data_.data() + r * cols_; }
    const T* row(std::size_t r) const { return data_.data() + r * cols_; }
    std::span<T> row_span(std::size_t r) { return {row(r), cols_}; }
    std::span<const T> row_span(std::size_t r) const { return {row(r), cols_}; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    void fill(T v) { data_.assign(data_.size(), v); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    // Lossy only in the narrowing direction; used at the f32/f64 boundary.
    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<T> data_;
};

using Mat32 = Matrix<float>;
using Mat64 = Matrix<double>;

namespace detail {
[[noreturn]] inline void shape_error(const std::string& op, const std::string& lhs,
                                     const std::string& rhs) {
    throw std::invalid_argument(op + ": incompatible shapes " + lhs + " and " + rhs);
}
}  // namespace detail

// C = A * B. SAXPY form: for each output row, walk the contraction index in
// ascending order and stream multiples of B's rows into the accumulator row.
// The per-element accumulation order is exactly k = 0,1,2,... which is what
// keeps results identical run to run.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) detail::shape_error("matmul", a.shape_str(), b.shape_str());
    Matrix<T> c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T* __restrict crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            const T* __restrict brow = b.row(k);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// C = A^T * B without materializing the transpose (same ascending-k order,
// here the contraction runs over A's rows).
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) detail::shape_error("matmul_tn", a.shape_str(), b.shape_str());
    Matrix<T> c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const T* __restrict arow = a.row(k);
        const T* __restrict brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const T aki = arow[i];
            T* __restrict crow = c.row(i);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& m) {
    Matrix<T> t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

// C = A * B^T. Routed through an explicit transpose so the inner kernel stays
// the single left-to-right SAXPY above.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.cols()) detail::shape_error("matmul_nt", a.shape_str(), b.shape_str());
    return matmul(a, transpose(b));
}

// Numerically stable row softmax: shift by the row max before exponentiating.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
    if (m.cols() == 0) throw std::invalid_argument("softmax_rows: empty rows (" + m.shape_str() + ")");
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const T* src = m.row(i);
        T* dst = out.row(i);
        T mx = src[0];
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, src[j]);
        T sum = 0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (std::size_t j = 0; j < m.cols(); ++j) dst[j] /= sum;
    }
    return out;
}

// Rescales each row to unit mass. Signed input is folded through |.| first
// (the output is the distribution of absolute mass), and an all-zero row has
// no defined direction, so it is an error rather than a silent zero row.
template <typename T>
Matrix<T> row_normalize(const Matrix<T>& m) {
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const T* src = m.row(i);
        T* dst = out.row(i);
        T sum = 0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            dst[j] = std::abs(src[j]);
            sum += dst[j];
        }
        if (sum == T{0})
            throw std::invalid_argument("row_normalize: row " + std::to_string(i) +
                                        " of " + m.shape_str() + " has zero mass");
        for (std::size_t j = 0; j < m.cols(); ++j) dst[j] /= sum;
    }
    return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) detail::shape_error("add", a.shape_str(), b.shape_str());
    Matrix<T> c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
    return c;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) detail::shape_error("add_inplace", a.shape_str(), b.shape_str());
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

template <typename T>
void scale_inplace(Matrix<T>& a, T s) {
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= s;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
    for (std::size_t i = 0; i < m.size(); ++i)
        if (!std::isfinite(m.data()[i])) return false;
    return true;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) detail::shape_error("max_abs_diff", a.shape_str(), b.shape_str());
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

}  // namespace tla
