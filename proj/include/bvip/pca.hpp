#pragma once

// Linear PCA used as the statistical image encoder.

#include <algorithm>
#include <cmath>
#include <span>

#include "bvip/common.hpp"
#include "bvip/linalg.hpp"

namespace bvip {

struct PcaProjection {
    Vec mean;             ///< length d
    Matrix components;    ///< k×d, orthonormal rows
    Vec explained_variance;  ///< length k, non-increasing

    std::size_t input_dim() const { return mean.size(); }
    std::size_t k() const { return components.rows; }
};

namespace detail {

inline void fix_sign(std::span<double> row) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (std::abs(row[j]) > std::abs(row[arg])) arg = j;
    if (row[arg] < 0.0)
        for (auto& v : row) v = -v;
}

/// Fills rows [from, k) with unit vectors orthogonal to all earlier rows,
/// taken from the standard basis in order. Used when the data has rank < k.
inline void complete_basis(Matrix& comps, std::size_t from) {
    const std::size_t d = comps.cols;
    std::size_t next_axis = 0;
    for (std::size_t r = from; r < comps.rows; ++r) {
        for (;; ++next_axis) {
            if (next_axis >= d) throw Error("pca_fit: cannot complete orthonormal basis");
            Vec cand(d, 0.0);
            cand[next_axis] = 1.0;
            for (std::size_t q = 0; q < r; ++q) {
                const double proj = dot(comps.row(q), cand);
                for (std::size_t j = 0; j < d; ++j) cand[j] -= proj * comps(q, j);
            }
            const double nrm = norm2(cand);
            if (nrm > 1e-6) {
                for (std::size_t j = 0; j < d; ++j) comps(r, j) = cand[j] / nrm;
                ++next_axis;
                break;
            }
        }
    }
}

}  // namespace detail

/// Fits the top-k principal directions of the rows of `x` (n×d).
///
/// When n < d the n×n Gram matrix of the centered data is diagonalized and the
/// directions are recovered as Xcᵀu/‖Xcᵀu‖; otherwise the d×d covariance is used.
/// Each component's largest-magnitude entry is made positive.
inline PcaProjection pca_fit(const Matrix& x, std::size_t k) {
    const std::size_t n = x.rows, d = x.cols;
    require(n >= 2, "pca_fit: need at least two samples");
    if (k == 0 || k > std::min(n - 1, d))
        throw ShapeError("pca_fit: k = " + std::to_string(k) + " exceeds min(n-1, d) = " +
                         std::to_string(std::min(n - 1, d)));

    PcaProjection out;
    out.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.mean[j] += x(i, j);
    for (auto& m : out.mean) m /= static_cast<double>(n);

    Matrix xc = x;
    double total_ss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            xc(i, j) -= out.mean[j];
            total_ss += xc(i, j) * xc(i, j);
        }
    if (total_ss <= 0.0) throw Error("pca_fit: degenerate data (zero variance)");

    const double denom = static_cast<double>(n - 1);
    out.components = Matrix(k, d);
    out.explained_variance.assign(k, 0.0);
    // Directions whose variance is below this relative floor are numerically
    // undefined; they are replaced by an orthonormal completion.
    const double floor = 1e-10 * total_ss;
    std::size_t rank = 0;

    if (n < d) {
        Matrix gram(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                const double g = dot(xc.row(i), xc.row(j));
                gram(i, j) = g;
                gram(j, i) = g;
            }
        const SymmetricEigen e = jacobi_eigen(std::move(gram));
        for (std::size_t r = 0; r < k; ++r) {
            if (e.values[r] <= floor) break;
            auto row = out.components.row(r);
            for (std::size_t i = 0; i < n; ++i) {
                const double u = e.vectors(i, r);
                for (std::size_t j = 0; j < d; ++j) row[j] += u * xc(i, j);
            }
            // One modified Gram-Schmidt pass removes rounding drift between rows.
            for (std::size_t q = 0; q < r; ++q) {
                const double proj = dot(out.components.row(q), row);
                for (std::size_t j = 0; j < d; ++j) row[j] -= proj * out.components(q, j);
            }
            const double nrm = norm2(row);
            for (auto& v : row) v /= nrm;
            out.explained_variance[r] = e.values[r] / denom;
            ++rank;
        }
    } else {
        Matrix cov(d, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t a = 0; a < d; ++a) {
                const double xa = xc(i, a);
                for (std::size_t b = a; b < d; ++b) cov(a, b) += xa * xc(i, b);
            }
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) cov(b, a) = cov(a, b);
        const SymmetricEigen e = jacobi_eigen(std::move(cov));
        for (std::size_t r = 0; r < k; ++r) {
            if (e.values[r] <= floor) break;
            for (std::size_t j = 0; j < d; ++j) out.components(r, j) = e.vectors(j, r);
            out.explained_variance[r] = e.values[r] / denom;
            ++rank;
        }
    }
    if (rank < k) detail::complete_basis(out.components, rank);
    for (std::size_t r = 0; r < k; ++r) detail::fix_sign(out.components.row(r));
    return out;
}

/// components · (x − mean)
inline Vec pca_project(const PcaProjection& proj, std::span<const double> x) {
    require_same_length(x.size(), proj.input_dim(), "pca_project");
    Vec centered(x.begin(), x.end());
    for (std::size_t j = 0; j < centered.size(); ++j) centered[j] -= proj.mean[j];
    return matvec(proj.components, centered);
}

/// mean + componentsᵀ · feature
inline Vec pca_reconstruct(const PcaProjection& proj, std::span<const double> feature) {
    require_same_length(feature.size(), proj.k(), "pca_reconstruct");
    Vec out = proj.mean;
    for (std::size_t r = 0; r < proj.k(); ++r)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += feature[r] * proj.components(r, j);
    return out;
}

}  // namespace bvip
