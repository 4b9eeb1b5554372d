#pragma once

// Dense row-major matrices, a handful of kernels, and a cyclic Jacobi
// eigensolver for small symmetric matrices.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subgd/error.hpp"

namespace subgd {

/// Flat vector of all trainable parameters.
using ParamVector = std::vector<double>;

class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("DenseMatrix: data length " + std::to_string(data_.size()) +
                                 " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        DenseMatrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("DenseMatrix::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return m;
    }

    /// Builds an n x k matrix whose columns are the given vectors.
    static DenseMatrix from_columns(const std::vector<std::vector<double>>& columns) {
        if (columns.empty()) return {};
        const std::size_t n = columns.front().size();
        DenseMatrix m(n, columns.size());
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j].size() != n) throw DimensionError("DenseMatrix::from_columns: ragged columns");
            for (std::size_t i = 0; i < n; ++i) m(i, j) = columns[j][i];
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }

    void set_column(std::size_t c, std::span<const double> values) {
        if (values.size() != rows_) throw DimensionError("DenseMatrix::set_column: length mismatch");
        for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
    }

    DenseMatrix transposed() const {
        DenseMatrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

// Four interleaved partial sums let the compiler vectorize without reassociation flags.
inline double dot_unchecked(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s2) + (s1 + s3);
}

} // namespace detail

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    return detail::dot_unchecked(a.data(), b.data(), a.size());
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline std::vector<double> matvec(const DenseMatrix& m, std::span<const double> x) {
    if (m.cols() != x.size())
        throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) + " columns, vector has " +
                             std::to_string(x.size()) + " entries");
    std::vector<double> y(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        y[r] = detail::dot_unchecked(m.row(r).data(), x.data(), x.size());
    }
    return y;
}

/// Computes m^T x without forming the transpose.
inline std::vector<double> matvec_transposed(const DenseMatrix& m, std::span<const double> x) {
    if (m.rows() != x.size()) throw DimensionError("matvec_transposed: length mismatch");
    std::vector<double> y(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        const double xr = x[r];
        if (xr == 0.0) continue;
        for (std::size_t c = 0; c < row.size(); ++c) y[c] += row[c] * xr;
    }
    return y;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < brow.size(); ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

/// D^T D for an n x T matrix D.
inline DenseMatrix gram(const DenseMatrix& d) {
    const std::size_t t = d.cols();
    DenseMatrix g(t, t);
    for (std::size_t r = 0; r < d.rows(); ++r) {
        const auto row = d.row(r);
        for (std::size_t i = 0; i < t; ++i) {
            const double di = row[i];
            if (di == 0.0) continue;
            auto grow = g.row(i);
            for (std::size_t j = i; j < t; ++j) grow[j] += di * row[j];
        }
    }
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

/// D D^T for an n x T matrix D.
inline DenseMatrix outer_gram(const DenseMatrix& d) {
    const std::size_t n = d.rows();
    DenseMatrix c(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = dot(d.row(i), d.row(j));
            c(i, j) = v;
            c(j, i) = v;
        }
    return c;
}

inline double frobenius_norm(const DenseMatrix& m) { return norm2(m.data()); }

/// Lower-triangular Cholesky factor L with A = L L^T.
/// Throws ValidationError when A is not numerically positive definite.
inline DenseMatrix cholesky(const DenseMatrix& a) {
    const std::size_t n = a.rows();
    if (a.cols() != n) throw DimensionError("cholesky: matrix is not square");
    DenseMatrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag)) throw ValidationError("cholesky: matrix is singular or indefinite");
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

/// Solves (L L^T) x = b given the Cholesky factor L.
inline std::vector<double> cholesky_solve(const DenseMatrix& l, std::span<const double> b) {
    const std::size_t n = l.rows();
    if (b.size() != n) throw DimensionError("cholesky_solve: length mismatch");
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
        y[i] /= l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t k = i + 1; k < n; ++k) y[i] -= l(k, i) * y[k];
        y[i] /= l(i, i);
    }
    return y;
}

struct SymmetricEigen {
    std::vector<double> values; // descending
    DenseMatrix vectors;        // eigenvectors in columns, same order as values
};

namespace detail {

inline double off_diagonal_norm(const DenseMatrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

/// Flips each column so that its largest-magnitude entry is positive.
inline void canonicalize_signs(DenseMatrix& vectors) {
    for (std::size_t c = 0; c < vectors.cols(); ++c) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t r = 0; r < vectors.rows(); ++r) {
            const double mag = std::abs(vectors(r, c));
            if (mag > best + 1e-14 * std::max(best, 1.0)) {
                best = mag;
                arg = r;
            }
        }
        if (vectors.rows() > 0 && vectors(arg, c) < 0.0)
            for (std::size_t r = 0; r < vectors.rows(); ++r) vectors(r, c) = -vectors(r, c);
    }
}

} // namespace detail

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Stops when the off-diagonal Frobenius norm falls below tol * ||A||_F or
/// after max_sweeps sweeps. Skips eigenvector accumulation when
/// want_vectors is false.
inline SymmetricEigen jacobi_eigen(const DenseMatrix& symmetric, bool want_vectors = true, double tol = 1e-12,
                                   int max_sweeps = 100) {
    const std::size_t n = symmetric.rows();
    if (symmetric.cols() != n) throw DimensionError("jacobi_eigen: matrix is not square");
    if (!symmetric.all_finite()) throw ValidationError("jacobi_eigen: non-finite entries");

    DenseMatrix a = symmetric;
    DenseMatrix v = want_vectors ? DenseMatrix::identity(n) : DenseMatrix();
    const double scale = frobenius_norm(a);

    if (scale > 0.0) {
        for (int sweep = 0; sweep < max_sweeps; ++sweep) {
            if (detail::off_diagonal_norm(a) <= tol * scale) break;
            for (std::size_t p = 0; p + 1 < n; ++p) {
                for (std::size_t q = p + 1; q < n; ++q) {
                    const double apq = a(p, q);
                    if (std::abs(apq) < 1e-300) continue;
                    const double app = a(p, p);
                    const double aqq = a(q, q);
                    // Rotation angle from the 2x2 symmetric Schur decomposition.
                    const double theta = (aqq - app) / (2.0 * apq);
                    const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    const double c = 1.0 / std::sqrt(t * t + 1.0);
                    const double s = t * c;

                    for (std::size_t k = 0; k < n; ++k) {
                        const double akp = a(k, p);
                        const double akq = a(k, q);
                        a(k, p) = c * akp - s * akq;
                        a(k, q) = s * akp + c * akq;
                    }
                    for (std::size_t k = 0; k < n; ++k) {
                        const double apk = a(p, k);
                        const double aqk = a(q, k);
                        a(p, k) = c * apk - s * aqk;
                        a(q, k) = s * apk + c * aqk;
                    }
                    a(p, q) = 0.0;
                    a(q, p) = 0.0;
                    if (want_vectors) {
                        for (std::size_t k = 0; k < n; ++k) {
                            const double vkp = v(k, p);
                            const double vkq = v(k, q);
                            v(k, p) = c * vkp - s * vkq;
                            v(k, q) = s * vkp + c * vkq;
                        }
                    }
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    SymmetricEigen out;
    out.values.reserve(n);
    for (auto i : order) out.values.push_back(a(i, i));
    if (want_vectors) {
        out.vectors = DenseMatrix(n, n);
        for (std::size_t c = 0; c < n; ++c)
            for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
        detail::canonicalize_signs(out.vectors);
    }
    return out;
}

/// Eigenvalues below this fraction of the largest are treated as zero.
inline constexpr double kNumericalZeroRatio = 1e-12;

struct TruncatedEigen {
    DenseMatrix vectors;        // n x r, orthonormal columns
    std::vector<double> values; // r values, descending, non-negative
};

/// Modified Gram-Schmidt, applied twice. Columns are processed left to right,
/// so leading columns move the least. Throws if a column becomes numerically zero.
inline void orthonormalize_columns(DenseMatrix& m) {
    const std::size_t n = m.rows();
    const std::size_t k = m.cols();
    std::vector<std::vector<double>> cols(k);
    for (std::size_t j = 0; j < k; ++j) cols[j] = m.column(j);
    for (std::size_t j = 0; j < k; ++j) {
        const double original = norm2(cols[j]);
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t i = 0; i < j; ++i) axpy(-dot(cols[i], cols[j]), cols[i], cols[j]);
        const double nrm = norm2(cols[j]);
        if (!(nrm > 1e-12 * std::max(original, 1e-300)))
            throw ValidationError("orthonormalize_columns: column " + std::to_string(j) + " is linearly dependent");
        for (auto& x : cols[j]) x /= nrm;
    }
    for (std::size_t j = 0; j < k; ++j) m.set_column(j, cols[j]);
    (void)n;
}

/// Top-r eigenpairs of C = D D^T for an n x T matrix D.
///
/// Works on whichever of D^T D (T x T) and D D^T (n x n) is smaller; when the
/// Gram side is used, eigenvectors u_i of D^T D map to v_i = D u_i / sqrt(lambda_i).
/// Eigenpairs with lambda_i < 1e-12 * lambda_max are dropped, so fewer than r
/// columns can come back. Signs follow canonicalize_signs.
inline TruncatedEigen gram_eigendecompose(const DenseMatrix& d, std::size_t r) {
    const std::size_t n = d.rows();
    const std::size_t t = d.cols();
    if (r > std::min(n, t))
        throw DimensionError("gram_eigendecompose: r=" + std::to_string(r) + " exceeds min(n, T)=" +
                             std::to_string(std::min(n, t)));
    if (!d.all_finite()) throw ValidationError("gram_eigendecompose: non-finite direction entries");

    TruncatedEigen out;
    if (r == 0) {
        out.vectors = DenseMatrix(n, 0);
        return out;
    }

    std::vector<std::vector<double>> vecs;
    if (t <= n) {
        const auto eig = jacobi_eigen(gram(d));
        const double lmax = std::max(eig.values.front(), 0.0);
        for (std::size_t i = 0; i < r; ++i) {
            const double lambda = eig.values[i];
            if (!(lambda > kNumericalZeroRatio * lmax) || lambda <= 0.0) break;
            auto v = matvec(d, eig.vectors.column(i));
            const double inv = 1.0 / std::sqrt(lambda);
            for (auto& x : v) x *= inv;
            vecs.push_back(std::move(v));
            out.values.push_back(lambda);
        }
    } else {
        const auto eig = jacobi_eigen(outer_gram(d));
        const double lmax = std::max(eig.values.front(), 0.0);
        for (std::size_t i = 0; i < r; ++i) {
            const double lambda = eig.values[i];
            if (!(lambda > kNumericalZeroRatio * lmax) || lambda <= 0.0) break;
            vecs.push_back(eig.vectors.column(i));
            out.values.push_back(lambda);
        }
    }

    out.vectors = vecs.empty() ? DenseMatrix(n, 0) : DenseMatrix::from_columns(vecs);
    // Tail vectors mapped through small eigenvalues lose orthogonality; one
    // Gram-Schmidt pass in descending order restores it without touching the head.
    if (!vecs.empty()) orthonormalize_columns(out.vectors);
    detail::canonicalize_signs(out.vectors);
    return out;
}

/// Eigenvalues of D D^T (descending), via the smaller Gram side. No vectors.
inline std::vector<double> gram_eigenvalues(const DenseMatrix& d) {
    const auto eig = d.cols() <= d.rows() ? jacobi_eigen(gram(d), false) : jacobi_eigen(outer_gram(d), false);
    return eig.values;
}

} // namespace subgd
