#pragma once

// Dense row-major matrices and a cyclic Jacobi eigensolver for symmetric
// matrices. Sizes here are small (a few hundred), so clarity beats blocking.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bvip/common.hpp"

namespace bvip {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool square() const { return rows == cols; }
};

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.data[k * b.cols];
            double* crow = &c.data[i * c.cols];
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    return c;
}

inline Vec matvec(const Matrix& a, std::span<const double> x) {
    require_same_length(a.cols, x.size(), "matvec");
    Vec y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) y[i] = dot(a.row(i), x);
    return y;
}

inline double frobenius(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

/// Largest |a_ij − a_ji| relative to the largest |a_ij|.
inline double asymmetry(const Matrix& a) {
    if (!a.square()) throw ShapeError("asymmetry: matrix is not square");
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) {
            worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
            scale = std::max(scale, std::abs(a(i, j)));
        }
    return scale > 0.0 ? worst / scale : 0.0;
}

inline void symmetrize(Matrix& a) {
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = i + 1; j < a.cols; ++j) {
            const double m = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = m;
            a(j, i) = m;
        }
}

struct SymmetricEigen {
    Vec values;      ///< descending
    Matrix vectors;  ///< column k is the eigenvector of values[k]
};

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
/// Eigenvalues come back sorted in descending order.
inline SymmetricEigen jacobi_eigen(Matrix a, double tol = 1e-14, int max_sweeps = 100) {
    if (!a.square()) throw ShapeError("jacobi_eigen: matrix is not square");
    const std::size_t n = a.rows;
    Matrix v = Matrix::identity(n);

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
        return std::sqrt(2.0 * s);
    };
    const double scale = std::max(frobenius(a), std::numeric_limits<double>::min());

    for (int sweep = 0; sweep < max_sweeps && off_norm() > tol * scale; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= std::numeric_limits<double>::min()) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });
    SymmetricEigen out{Vec(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

/// Cholesky-free symmetric square root factor: returns B with B Bᵀ = A after
/// clamping eigenvalues below zero. Used to sample N(μ, A).
inline Matrix psd_factor(const Matrix& a) {
    const SymmetricEigen e = jacobi_eigen(a);
    const std::size_t n = a.rows;
    Matrix b(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(e.values[k], 0.0));
        if (s == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) b(i, k) = e.vectors(i, k) * s;
    }
    return b;
}

}  // namespace bvip
