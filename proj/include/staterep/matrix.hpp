#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "staterep/common.hpp"

namespace staterep {

// Dense row-major 64-bit matrix. All numerics in this project run in double
// precision so that gradient checks against central finite differences are
// meaningful.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
    Matrix(std::size_t rows, std::size_t cols, double fill)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t r = 0;
        for (const auto& row : rows) {
            if (row.size() != m.cols_) throw DimensionError("ragged initializer");
            std::size_t c = 0;
            for (double v : row) m(r, c++) = v;
            ++r;
        }
        return m;
    }

    static Matrix row_vector(const std::vector<double>& v) {
        Matrix m(1, v.size());
        m.data_ = v;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double> row_copy(std::size_t r) const {
        return std::vector<double>(row(r), row(r) + cols_);
    }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {
using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const EigenRowMajor>;
using Map = Eigen::Map<EigenRowMajor>;

inline MapConst as_eigen(const Matrix& m) {
    return MapConst(m.data(), static_cast<Eigen::Index>(m.rows()),
                    static_cast<Eigen::Index>(m.cols()));
}
inline Map as_eigen(Matrix& m) {
    return Map(m.data(), static_cast<Eigen::Index>(m.rows()),
               static_cast<Eigen::Index>(m.cols()));
}
}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    detail::as_eigen(out).noalias() = detail::as_eigen(a) * detail::as_eigen(b);
    return out;
}

// A * B^T. Used for similarity matrices between row-embeddings.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_nt: column counts differ");
    Matrix out(a.rows(), b.rows());
    detail::as_eigen(out).noalias() = detail::as_eigen(a) * detail::as_eigen(b).transpose();
    return out;
}

// A^T * B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("matmul_tn: row counts differ");
    Matrix out(a.cols(), b.cols());
    detail::as_eigen(out).noalias() = detail::as_eigen(a).transpose() * detail::as_eigen(b);
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    detail::as_eigen(out) = detail::as_eigen(a).transpose();
    return out;
}

// Y = X W + b, with the 1 x n bias row broadcast over rows of X.
inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    if (x.cols() != w.rows()) throw DimensionError("affine: X cols != W rows");
    if (b.rows() != 1 || b.cols() != w.cols()) throw DimensionError("affine: bias must be 1 x W.cols");
    Matrix out = matmul(x, w);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b(0, c);
    }
    return out;
}

inline Matrix relu(const Matrix& x) {
    Matrix out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = std::max(0.0, out.data()[i]);
    }
    return out;
}

inline double row_norm(const Matrix& x, std::size_t r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * x(r, c);
    return std::sqrt(s);
}

// Rows divided by max(||row||, eps); zero rows come back as zero rows.
inline Matrix l2_normalize_rows(const Matrix& x, double eps = 1e-12) {
    if (eps <= 0.0) throw UsageError("l2_normalize_rows: eps must be > 0");
    Matrix out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double inv = 1.0 / std::max(row_norm(x, r), eps);
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) *= inv;
    }
    return out;
}

// D[i,j] = ||A_i - B_j||^2 via the expanded form, clamped at zero to absorb
// rounding. The naive per-pair loop lives in the tests as the oracle.
inline Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("pairwise_sq_dist: column counts differ");
    Matrix d = matmul_nt(a, b);
    std::vector<double> an(a.rows()), bn(b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += a(i, c) * a(i, c);
        an[i] = s;
    }
    for (std::size_t j = 0; j < b.rows(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < b.cols(); ++c) s += b(j, c) * b(j, c);
        bn[j] = s;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            d(i, j) = std::max(0.0, an[i] + bn[j] - 2.0 * d(i, j));
        }
    }
    return d;
}

// S[i,j] = <A_i, B_j> / (||A_i|| ||B_j||), with an eps guard on the norms.
inline Matrix pairwise_cosine(const Matrix& a, const Matrix& b, double eps = 1e-12) {
    if (a.cols() != b.cols()) throw DimensionError("pairwise_cosine: column counts differ");
    Matrix s = matmul_nt(a, b);
    std::vector<double> an(a.rows()), bn(b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) an[i] = std::max(row_norm(a, i), eps);
    for (std::size_t j = 0; j < b.rows(); ++j) bn[j] = std::max(row_norm(b, j), eps);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) s(i, j) /= an[i] * bn[j];
    }
    return s;
}

// Row-wise log(sum(exp(x))) with max subtraction, returned as an n x 1 column.
inline Matrix logsumexp_rows(const Matrix& x) {
    Matrix out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double m = x(r, 0);
        for (std::size_t c = 1; c < x.cols(); ++c) m = std::max(m, x(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) s += std::exp(x(r, c) - m);
        out(r, 0) = m + std::log(s);
    }
    return out;
}

inline double sum_all(const Matrix& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    return s;
}

inline Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows()) throw DimensionError("select_rows: index out of range");
        std::copy(x.row(rows[i]), x.row(rows[i]) + x.cols(), out.row(i));
    }
    return out;
}

}  // namespace staterep
