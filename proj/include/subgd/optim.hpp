#pragma once

// Update rules: plain SGD, Adam, and preconditioned (SubGD) steps, plus the
// diagonal and random-subspace preconditioners used as ablation baselines.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <variant>
#include <vector>

#include "subgd/linalg.hpp"
#include "subgd/rng.hpp"
#include "subgd/subspace.hpp"

namespace subgd {

struct IdentityPreconditioner {};

/// SubGD: d = V W V^T g.
struct SubspacePreconditioner {
    Subspace subspace;
};

/// Per-parameter learning-rate weights; zero entries freeze a parameter.
struct DiagonalPreconditioner {
    std::vector<double> weights;
};

/// Unweighted projection onto a random orthonormal basis.
struct RandomSubspacePreconditioner {
    DenseMatrix basis; // n x r
};

using Preconditioner =
    std::variant<IdentityPreconditioner, SubspacePreconditioner, DiagonalPreconditioner, RandomSubspacePreconditioner>;

/// Applies the preconditioner to a gradient.
inline std::vector<double> precondition(const Preconditioner& p, std::span<const double> g) {
    return std::visit(
        [&](const auto& pc) -> std::vector<double> {
            using T = std::decay_t<decltype(pc)>;
            if constexpr (std::is_same_v<T, IdentityPreconditioner>) {
                return {g.begin(), g.end()};
            } else if constexpr (std::is_same_v<T, SubspacePreconditioner>) {
                return project(pc.subspace, g);
            } else if constexpr (std::is_same_v<T, DiagonalPreconditioner>) {
                if (pc.weights.size() != g.size()) throw DimensionError("diagonal preconditioner: length mismatch");
                std::vector<double> d(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = pc.weights[i] * g[i];
                return d;
            } else {
                if (pc.basis.rows() != g.size()) throw DimensionError("random subspace: length mismatch");
                return matvec(pc.basis, matvec_transposed(pc.basis, g));
            }
        },
        p);
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptState {
    ParamVector params;
    std::size_t step_count = 0;
    std::vector<double> m; // Adam first moment (empty until first adam_step)
    std::vector<double> v; // Adam second moment

    OptState() = default;
    explicit OptState(ParamVector p) : params(std::move(p)) {}
};

/// params <- params - eta * grad
inline void sgd_step(OptState& state, std::span<const double> grad, double eta) {
    if (grad.size() != state.params.size()) throw DimensionError("sgd_step: gradient length mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i) state.params[i] -= eta * grad[i];
    ++state.step_count;
}

/// Below this value of g^T d the normalized step is skipped.
inline constexpr double kNormalizedStepFloor = 1e-18;

/// params <- params - eta * d with d = P g. In normalized mode d is rescaled by
/// sqrt(n / g^T d) so the step satisfies dtheta^T C^+ dtheta = n at eta = 1;
/// a step with g^T d <= 1e-18 is skipped.
inline void subgd_step(OptState& state, const Preconditioner& p, std::span<const double> grad, double eta,
                       bool normalized = false) {
    if (grad.size() != state.params.size()) throw DimensionError("subgd_step: gradient length mismatch");
    if (!all_finite(grad)) throw ValidationError("subgd_step: non-finite gradient");
    auto d = precondition(p, grad);
    double scale = 1.0;
    if (normalized) {
        const double gd = dot(grad, d);
        if (gd <= kNormalizedStepFloor) {
            ++state.step_count;
            return;
        }
        scale = std::sqrt(static_cast<double>(grad.size()) / gd);
    }
    for (std::size_t i = 0; i < d.size(); ++i) state.params[i] -= eta * scale * d[i];
    ++state.step_count;
}

/// Adam with bias correction. To couple with a preconditioner, pass the
/// preconditioned gradient; the moments then track P g.
inline void adam_step(OptState& state, std::span<const double> grad, double eta, const AdamHyper& h = {}) {
    const std::size_t n = state.params.size();
    if (grad.size() != n) throw DimensionError("adam_step: gradient length mismatch");
    if (state.m.size() != n) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        state.params[i] -= eta * mhat / (std::sqrt(vhat) + h.eps);
    }
}

/// Mean squared direction entry per parameter; all but the `keep` largest are zeroed.
inline DiagonalPreconditioner build_diagonal_preconditioner(const DirectionMatrix& d, std::size_t keep) {
    const std::size_t n = d.dim();
    if (keep == 0) throw ValidationError("build_diagonal_preconditioner: keep must be >= 1");
    if (keep > n) throw DimensionError("build_diagonal_preconditioner: keep exceeds parameter count");
    if (d.count() == 0) throw ValidationError("build_diagonal_preconditioner: no directions");
    std::vector<double> w(n, 0.0);
    for (const auto& c : d.columns())
        for (std::size_t i = 0; i < n; ++i) w[i] += c[i] * c[i];
    for (auto& x : w) x /= static_cast<double>(d.count());

    if (keep < n) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Ties resolved by index so the kept set is deterministic.
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
        for (std::size_t i = keep; i < n; ++i) w[order[i]] = 0.0;
    }
    return {std::move(w)};
}

/// QR-orthonormalized Gaussian n x r basis.
inline RandomSubspacePreconditioner build_random_subspace(std::size_t n, std::size_t r, Rng& stream) {
    if (r > n) throw DimensionError("build_random_subspace: r exceeds n");
    if (r == 0) throw ValidationError("build_random_subspace: r must be >= 1");
    DenseMatrix basis(n, r);
    for (auto& x : basis.data()) x = stream.gaussian();
    orthonormalize_columns(basis);
    return {std::move(basis)};
}

} // namespace subgd
