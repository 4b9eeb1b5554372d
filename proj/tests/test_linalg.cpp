#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subgd/linalg.hpp"
#include "subgd/rng.hpp"
#include "test_util.hpp"

using namespace subgd;
using subgd::testing::random_matrix;

namespace {

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

DenseMatrix reconstruct(const TruncatedEigen& e) {
    const std::size_t n = e.vectors.rows();
    DenseMatrix out(n, n);
    for (std::size_t k = 0; k < e.values.size(); ++k)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out(i, j) += e.values[k] * e.vectors(i, k) * e.vectors(j, k);
    return out;
}

} // namespace

TEST(DenseMatrix, ConstructionValidatesLength) {
    EXPECT_THROW(DenseMatrix(2, 3, std::vector<double>(5)), DimensionError);
    DenseMatrix m(2, 3, 1.5);
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m.cols(), 3u);
    EXPECT_DOUBLE_EQ(m(1, 2), 1.5);
}

TEST(DenseMatrix, TransposeAndColumns) {
    const auto m = DenseMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    const auto t = m.transposed();
    EXPECT_EQ(t.rows(), 3u);
    EXPECT_DOUBLE_EQ(t(2, 1), 6.0);
    EXPECT_EQ(m.column(1), (std::vector<double>{2, 5}));
    EXPECT_EQ(DenseMatrix::from_columns({{1, 4}, {2, 5}, {3, 6}}), m);
}

TEST(Matvec, IdentityReturnsInput) {
    const std::vector<double> x{1.0, -2.0, 3.5};
    EXPECT_EQ(matvec(DenseMatrix::identity(3), x), x);
}

TEST(Matvec, DiagonalExample) {
    EXPECT_EQ(matvec(DenseMatrix::from_rows({{2, 0}, {0, 3}}), std::vector<double>{1, 1}), (std::vector<double>{2, 3}));
}

TEST(Matvec, MatchesNaiveLoop) {
    Rng rng(11);
    const auto m = random_matrix(5, 5, rng);
    const auto x = rng_gaussian(rng, 5);
    const auto y = matvec(m, x);
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += m.data()[i * 5 + j] * x[j];
        EXPECT_NEAR(y[i], s, 1e-12);
    }
}

TEST(Matvec, DimensionMismatchThrows) {
    EXPECT_THROW(matvec(DenseMatrix(2, 3), std::vector<double>(2)), DimensionError);
    EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), DimensionError);
}

TEST(Matmul, GramHelpersAgreeWithMatmul) {
    Rng rng(3);
    const auto d = random_matrix(7, 4, rng);
    EXPECT_LT(max_abs_diff(gram(d), matmul(d.transposed(), d)), 1e-12);
    EXPECT_LT(max_abs_diff(outer_gram(d), matmul(d, d.transposed())), 1e-12);
}

TEST(Cholesky, SolvesSpdSystem) {
    Rng rng(5);
    const auto a = random_matrix(6, 6, rng);
    auto spd = matmul(a, a.transposed());
    for (std::size_t i = 0; i < 6; ++i) spd(i, i) += 1.0;
    const auto x = rng_gaussian(rng, 6);
    const auto b = matvec(spd, x);
    const auto solved = cholesky_solve(cholesky(spd), b);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(solved[i], x[i], 1e-10);
    EXPECT_THROW(cholesky(DenseMatrix::from_rows({{1, 2}, {2, 1}})), ValidationError);
}

TEST(Rng, GaussianCountZeroIsEmpty) {
    Rng rng(1);
    EXPECT_TRUE(rng_gaussian(rng, 0).empty());
}

TEST(Rng, SameSeedSameSequence) {
    Rng a(42), b(42);
    EXPECT_EQ(rng_gaussian(a, 1000), rng_gaussian(b, 1000));
    Rng c(43);
    Rng d(42);
    EXPECT_NE(rng_gaussian(c, 10), rng_gaussian(d, 10));
}

TEST(Rng, GaussianMoments) {
    Rng rng(2024);
    const auto s = rng_gaussian(rng, 100000);
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    double var = 0.0;
    for (double x : s) var += (x - mean) * (x - mean);
    var /= static_cast<double>(s.size());
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_GE(var, 0.97);
    EXPECT_LE(var, 1.03);
}

TEST(Rng, UniformAndBelowStayInRange) {
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(rng.below(7), 7u);
    }
}

TEST(Rng, SplitStreamsAreIndependentOfLaterUse) {
    Rng parent_a(77), parent_b(77);
    Rng child_a = parent_a.split();
    Rng child_b = parent_b.split();
    parent_b.next_u64();
    EXPECT_EQ(child_a.next_u64(), child_b.next_u64());
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_EQ(derive_seed(1, 5), derive_seed(1, 5));
}

TEST(JacobiEigen, KnownTwoByTwo) {
    const auto e = jacobi_eigen(DenseMatrix::from_rows({{2, 1}, {1, 2}}));
    EXPECT_NEAR(e.values[0], 3.0, 1e-14);
    EXPECT_NEAR(e.values[1], 1.0, 1e-14);
    EXPECT_NEAR(e.vectors(0, 0), std::sqrt(0.5), 1e-14);
    EXPECT_NEAR(e.vectors(1, 0), std::sqrt(0.5), 1e-14);
}

TEST(GramEigen, IdentityColumns) {
    const auto e = gram_eigendecompose(DenseMatrix::identity(2), 2);
    ASSERT_EQ(e.values.size(), 2u);
    EXPECT_NEAR(e.values[0], 1.0, 1e-14);
    EXPECT_NEAR(e.values[1], 1.0, 1e-14);
    // A permutation of identity columns.
    for (std::size_t c = 0; c < 2; ++c) {
        const double a = std::abs(e.vectors(0, c)), b = std::abs(e.vectors(1, c));
        EXPECT_NEAR(std::max(a, b), 1.0, 1e-12);
        EXPECT_NEAR(std::min(a, b), 0.0, 1e-12);
    }
}

TEST(GramEigen, RankOneColumn) {
    const auto e = gram_eigendecompose(DenseMatrix::from_columns({{3, 4}}), 1);
    ASSERT_EQ(e.values.size(), 1u);
    EXPECT_NEAR(e.values[0], 25.0, 1e-12);
    EXPECT_NEAR(e.vectors(0, 0), 0.6, 1e-12);
    EXPECT_NEAR(e.vectors(1, 0), 0.8, 1e-12);
}

TEST(GramEigen, RandomSixByFourMatchesDense) {
    Rng rng(6);
    const auto d = random_matrix(6, 4, rng);
    const auto e = gram_eigendecompose(d, 4);
    const auto dense = jacobi_eigen(outer_gram(d));
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(e.values[k], dense.values[k], 1e-8 * dense.values[0]);
        double agree = 0.0;
        for (std::size_t i = 0; i < 6; ++i) agree += e.vectors(i, k) * dense.vectors(i, k);
        EXPECT_NEAR(std::abs(agree), 1.0, 1e-8);
    }
}

TEST(GramEigen, ErrorPaths) {
    EXPECT_THROW(gram_eigendecompose(DenseMatrix(3, 2, 1.0), 3), DimensionError);
    DenseMatrix bad(3, 2, 1.0);
    bad(1, 1) = std::nan("");
    EXPECT_THROW(gram_eigendecompose(bad, 1), ValidationError);
}

TEST(GramEigen, SignConventionLargestEntryPositive) {
    Rng rng(8);
    const auto e = gram_eigendecompose(random_matrix(9, 5, rng), 5);
    for (std::size_t c = 0; c < e.vectors.cols(); ++c) {
        double best = 0.0;
        for (std::size_t i = 0; i < e.vectors.rows(); ++i)
            if (std::abs(e.vectors(i, c)) > std::abs(best)) best = e.vectors(i, c);
        EXPECT_GT(best, 0.0);
    }
}

TEST(GramEigen, DropsNumericalZeroEigenvalues) {
    // Rank-2 matrix with 4 columns.
    Rng rng(10);
    const auto basis = random_matrix(8, 2, rng);
    const auto mix = random_matrix(2, 4, rng);
    const auto e = gram_eigendecompose(matmul(basis, mix), 4);
    EXPECT_EQ(e.values.size(), 2u);
    EXPECT_EQ(e.vectors.cols(), 2u);
}

// Property sweep over random shapes; includes the T > n dense path.
TEST(GramEigen, PropertiesOnRandomInstances) {
    Rng rng(12345);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng.below(50);
        const std::size_t t = 1 + rng.below(20);
        const auto d = random_matrix(n, t, rng);
        const std::size_t r = std::min(n, t);
        const auto e = gram_eigendecompose(d, r);
        const auto c = outer_gram(d);

        // Orthonormality.
        const auto vtv = matmul(e.vectors.transposed(), e.vectors);
        EXPECT_LT(max_abs_diff(vtv, DenseMatrix::identity(e.vectors.cols())), 1e-10) << n << "x" << t;
        // Descending and non-negative.
        for (std::size_t k = 0; k < e.values.size(); ++k) {
            EXPECT_GE(e.values[k], 0.0);
            if (k > 0) {
                EXPECT_LE(e.values[k], e.values[k - 1]);
            }
        }
        // Eigen-equation residual.
        for (std::size_t k = 0; k < e.values.size(); ++k) {
            const auto v = e.vectors.column(k);
            const auto cv = matvec(c, v);
            double res = 0.0;
            for (std::size_t i = 0; i < n; ++i) res = std::max(res, std::abs(cv[i] - e.values[k] * v[i]));
            EXPECT_LE(res, 1e-8 * e.values[0]);
        }
        // Reconstruction at full rank.
        const auto rec = reconstruct(e);
        DenseMatrix diff = c;
        for (std::size_t i = 0; i < diff.data().size(); ++i) diff.data()[i] -= rec.data()[i];
        EXPECT_LE(frobenius_norm(diff), 1e-8 * frobenius_norm(c));
    }
}

TEST(GramEigen, EigenvaluesInvariantToColumnOrder) {
    Rng rng(31);
    const auto d = random_matrix(12, 6, rng);
    std::vector<std::vector<double>> cols;
    for (std::size_t c = 0; c < 6; ++c) cols.push_back(d.column(c));
    std::reverse(cols.begin(), cols.end());
    std::swap(cols[1], cols[4]);
    const auto a = gram_eigenvalues(d);
    const auto b = gram_eigenvalues(DenseMatrix::from_columns(cols));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-10 * a[0]);
}

TEST(Orthonormalize, DependentColumnThrows) {
    DenseMatrix m = DenseMatrix::from_columns({{1, 0, 0}, {2, 0, 0}});
    EXPECT_THROW(orthonormalize_columns(m), Error);
}
