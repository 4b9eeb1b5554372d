#pragma once

// Update-direction collection and the dominant eigenstructure of their
// uncentered auto-correlation C = D D^T.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "subgd/binary_io.hpp"
#include "subgd/linalg.hpp"
#include "subgd/rng.hpp"

namespace subgd {

/// Per-task update directions, one column per task (or per epoch in epoch mode).
class DirectionMatrix {
public:
    DirectionMatrix() = default;
    explicit DirectionMatrix(std::size_t n) : n_(n) {}

    void add(std::vector<double> column) {
        if (column.size() != n_)
            throw DimensionError("DirectionMatrix: column has " + std::to_string(column.size()) + " entries, expected " +
                                 std::to_string(n_));
        if (!all_finite(column)) throw ValidationError("DirectionMatrix: non-finite direction");
        columns_.push_back(std::move(column));
    }

    std::size_t dim() const { return n_; }
    std::size_t count() const { return columns_.size(); }
    const std::vector<double>& column(std::size_t t) const { return columns_.at(t); }
    const std::vector<std::vector<double>>& columns() const { return columns_; }

    /// First k columns.
    DirectionMatrix prefix(std::size_t k) const {
        DirectionMatrix d(n_);
        d.columns_.assign(columns_.begin(), columns_.begin() + static_cast<std::ptrdiff_t>(std::min(k, count())));
        return d;
    }

    /// n x T dense matrix.
    DenseMatrix to_dense() const {
        DenseMatrix m(n_, columns_.size());
        for (std::size_t t = 0; t < columns_.size(); ++t)
            for (std::size_t i = 0; i < n_; ++i) m(i, t) = columns_[t][i];
        return m;
    }

    /// T x T Gram matrix of the columns.
    DenseMatrix gram() const {
        const std::size_t t = count();
        DenseMatrix g(t, t);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = i; j < t; ++j) {
                const double v = dot(columns_[i], columns_[j]);
                g(i, j) = v;
                g(j, i) = v;
            }
        return g;
    }

private:
    std::size_t n_ = 0;
    std::vector<std::vector<double>> columns_;
};

enum class Weighting { eigenvalue_weighted, unweighted };

inline std::string to_string(Weighting w) { return w == Weighting::unweighted ? "unweighted" : "eigenvalue_weighted"; }

inline Weighting parse_weighting(const std::string& s) {
    if (s == "eigenvalue_weighted" || s == "weighted") return Weighting::eigenvalue_weighted;
    if (s == "unweighted") return Weighting::unweighted;
    throw ValidationError("unknown weighting '" + s + "'");
}

struct Subspace {
    DenseMatrix basis;                // n x r, orthonormal columns (V)
    std::vector<double> sigma;        // per-direction step weights: eigenvalues, or ones when unweighted
    std::vector<double> eigenvalues;  // the top-r eigenvalues of D D^T regardless of weighting
    Weighting weighting = Weighting::eigenvalue_weighted;
    std::size_t source_task_count = 0;
    std::vector<std::string> source_run_ids;

    std::size_t dim() const { return basis.rows(); }
    std::size_t rank() const { return basis.cols(); }
};

/// Top-r eigenpairs of D D^T (no 1/T normalization).
/// r = nullopt selects min(n, T); eigenvalues below 1e-12 * lambda_max are
/// dropped, so the result can have fewer than r directions.
inline Subspace build_subspace(const DirectionMatrix& d, std::optional<std::size_t> r, Weighting weighting) {
    const std::size_t n = d.dim();
    const std::size_t t = d.count();
    const std::size_t limit = std::min(n, t);
    const std::size_t rank = r.value_or(limit);
    if (rank < 1 || rank > limit)
        throw DimensionError("build_subspace: r=" + std::to_string(rank) + " must lie in [1, " + std::to_string(limit) + "]");

    bool any_nonzero = false;
    for (const auto& c : d.columns())
        for (double x : c)
            if (x != 0.0) any_nonzero = true;
    if (!any_nonzero) throw DegenerateSubspaceError("build_subspace: all update directions are zero");

    auto eig = gram_eigendecompose(d.to_dense(), rank);
    Subspace s;
    s.basis = std::move(eig.vectors);
    s.eigenvalues = eig.values;
    s.sigma = weighting == Weighting::unweighted ? std::vector<double>(eig.values.size(), 1.0) : eig.values;
    s.weighting = weighting;
    s.source_task_count = t;
    return s;
}

/// Copy of a subspace restricted to its leading k directions.
inline Subspace truncate(const Subspace& s, std::size_t k) {
    k = std::min(k, s.rank());
    Subspace out;
    out.basis = DenseMatrix(s.dim(), k);
    for (std::size_t i = 0; i < s.dim(); ++i)
        for (std::size_t j = 0; j < k; ++j) out.basis(i, j) = s.basis(i, j);
    out.sigma.assign(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(k));
    out.eigenvalues.assign(s.eigenvalues.begin(), s.eigenvalues.begin() + static_cast<std::ptrdiff_t>(k));
    out.weighting = s.weighting;
    out.source_task_count = s.source_task_count;
    out.source_run_ids = s.source_run_ids;
    return out;
}

/// V W V^T g with W = diag(sigma).
inline std::vector<double> project(const Subspace& s, std::span<const double> g) {
    if (g.size() != s.dim())
        throw DimensionError("project: vector has " + std::to_string(g.size()) + " entries, subspace lives in R^" +
                             std::to_string(s.dim()));
    auto coeffs = matvec_transposed(s.basis, g);
    for (std::size_t j = 0; j < coeffs.size(); ++j) coeffs[j] *= s.sigma[j];
    return matvec(s.basis, coeffs);
}

/// exp(Shannon entropy) of the normalized spectrum.
inline double effective_rank(std::span<const double> sigma) {
    double total = 0.0;
    for (double x : sigma) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw ValidationError("effective_rank: eigenvalues must be finite and >= 0");
        total += x;
    }
    if (!(total > 0.0)) throw ValidationError("effective_rank: spectrum is all zero");
    double entropy = 0.0;
    for (double x : sigma) {
        const double p = x / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

namespace detail {

/// Effective rank of the spectrum of the leading k x k block of a Gram matrix.
inline double prefix_effective_rank(const DenseMatrix& g, std::size_t k) {
    DenseMatrix block(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) block(i, j) = g(i, j);
    auto values = jacobi_eigen(block, false).values;
    // Jacobi can leave tiny negative round-off on a PSD matrix.
    const double lmax = values.empty() ? 0.0 : std::max(values.front(), 0.0);
    for (auto& v : values)
        if (v < kNumericalZeroRatio * lmax) v = 0.0;
    return effective_rank(values);
}

} // namespace detail

/// Effective rank of the first k directions, for k = 1..T.
inline std::vector<double> erank_curve(const DirectionMatrix& d) {
    const auto g = d.gram();
    std::vector<double> curve;
    curve.reserve(d.count());
    for (std::size_t k = 1; k <= d.count(); ++k) curve.push_back(detail::prefix_effective_rank(g, k));
    return curve;
}

/// Effective rank of the first k directions at selected k only.
inline std::vector<double> erank_at(const DirectionMatrix& d, const std::vector<std::size_t>& ks) {
    std::size_t kmax = 0;
    for (auto k : ks) {
        if (k < 1 || k > d.count()) throw DimensionError("erank_at: prefix length out of range");
        kmax = std::max(kmax, k);
    }
    const auto g = d.prefix(kmax).gram();
    std::vector<double> out;
    for (auto k : ks) out.push_back(detail::prefix_effective_rank(g, k));
    return out;
}

/// Monte-Carlo estimate of E[g^T C^-1 g] for g ~ N(0, cov), where C is the
/// empirical second moment of a disjoint batch of estimation_samples draws.
inline double trace_identity_check(const DenseMatrix& cov, Rng& stream, std::size_t samples,
                                   std::size_t estimation_samples = 1'000'000) {
    const std::size_t n = cov.rows();
    if (cov.cols() != n) throw DimensionError("trace_identity_check: covariance is not square");
    if (n > 100) throw ValidationError("trace_identity_check: n must be <= 100");
    if (samples == 0 || estimation_samples == 0) throw ValidationError("trace_identity_check: need samples");
    const auto root = cholesky(cov);

    std::vector<double> z(n), g(n);
    auto draw = [&] {
        for (auto& x : z) x = stream.gaussian();
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k <= i; ++k) s += root(i, k) * z[k];
            g[i] = s;
        }
    };

    DenseMatrix estimate(n, n);
    for (std::size_t s = 0; s < estimation_samples; ++s) {
        draw();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) estimate(i, j) += g[i] * g[j];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            estimate(i, j) /= static_cast<double>(estimation_samples);
            estimate(j, i) = estimate(i, j);
        }

    DenseMatrix factor;
    try {
        factor = cholesky(estimate);
    } catch (const ValidationError&) {
        throw ValidationError("trace_identity_check: estimated auto-correlation is singular");
    }

    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        draw();
        total += dot(g, cholesky_solve(factor, g));
    }
    return total / static_cast<double>(samples);
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr char kSubspaceMagic[9] = "SUBGDSUB";
inline constexpr char kDirectionsMagic[9] = "SUBGDDIR";

/// Header JSON {format, version, n, r, T, weighting, source_run_ids}; blocks V (n*r row-major), sigma (r), eigenvalues (r).
inline void save_subspace(const fs::path& path, const Subspace& s) {
    json header = {{"format", "subgd-subspace"},
                   {"version", 1},
                   {"n", s.dim()},
                   {"r", s.rank()},
                   {"T", s.source_task_count},
                   {"weighting", to_string(s.weighting)},
                   {"source_run_ids", s.source_run_ids},
                   {"blocks", {"V", "sigma", "eigenvalues"}}};
    const std::span<const double> blocks[] = {s.basis.data(), s.sigma, s.eigenvalues};
    write_file_atomic(path, encode_framed(kSubspaceMagic, header, blocks));
}

inline Subspace load_subspace(const fs::path& path) {
    ByteReader reader(read_file(path), "subspace '" + path.string() + "'");
    const json header = decode_framed_header(reader, kSubspaceMagic);
    try {
        Subspace s;
        const auto n = header.at("n").get<std::size_t>();
        const auto r = header.at("r").get<std::size_t>();
        s.source_task_count = header.at("T").get<std::size_t>();
        s.weighting = parse_weighting(header.at("weighting").get<std::string>());
        s.source_run_ids = header.at("source_run_ids").get<std::vector<std::string>>();
        s.basis = DenseMatrix(n, r, reader.f64(n * r));
        s.sigma = reader.f64(r);
        s.eigenvalues = reader.f64(r);
        if (reader.remaining() != 0) reader.fail("trailing bytes");
        return s;
    } catch (const json::exception& e) {
        reader.fail(std::string("bad header: ") + e.what());
    }
}

/// Header JSON {format, version, n, T, mode, run_id}; then T columns of n f64 each.
inline void save_directions(const fs::path& path, const DirectionMatrix& d, const std::string& mode,
                            const std::string& run_id) {
    json header = {{"format", "subgd-directions"}, {"version", 1}, {"n", d.dim()}, {"T", d.count()},
                   {"mode", mode},                 {"run_id", run_id}};
    std::vector<std::span<const double>> blocks;
    for (const auto& c : d.columns()) blocks.emplace_back(c);
    write_file_atomic(path, encode_framed(kDirectionsMagic, header, blocks));
}

inline DirectionMatrix load_directions(const fs::path& path) {
    ByteReader reader(read_file(path), "directions '" + path.string() + "'");
    const json header = decode_framed_header(reader, kDirectionsMagic);
    try {
        const auto n = header.at("n").get<std::size_t>();
        const auto t = header.at("T").get<std::size_t>();
        DirectionMatrix d(n);
        for (std::size_t i = 0; i < t; ++i) d.add(reader.f64(n));
        if (reader.remaining() != 0) reader.fail("trailing bytes");
        return d;
    } catch (const json::exception& e) {
        reader.fail(std::string("bad header: ") + e.what());
    }
}

} // namespace subgd
