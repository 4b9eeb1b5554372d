// subgd_acceptance [--work-dir dir] [--only C1,C5,...]
// Prints one PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "subgd/harness.hpp"
#include "subgd/stats.hpp"

using namespace subgd;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool close_rel(double a, double b, double rel, double floor) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + floor;
}

template <class F>
std::vector<double> central_difference(F&& f, std::vector<double> x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

std::map<std::string, std::vector<double>> mse_by_method(const std::vector<EvalRecord>& recs, std::size_t support) {
    // Records come out ordered by task within each method, so vectors are paired.
    std::map<std::string, std::vector<double>> out;
    for (const auto& r : recs)
        if (r.support_size == support) out[r.method].push_back(r.mse);
    return out;
}

double mean_of(const std::vector<double>& v) { return finite_mean(v).mean; }

// ---------------------------------------------------------------------------

Verdict c1_trace_identity() {
    DenseMatrix cov(5, 5);
    for (std::size_t i = 0; i < 5; ++i) cov(i, i) = static_cast<double>(i + 1);
    Rng stream(2024);
    const double m = trace_identity_check(cov, stream, 100'000, 1'000'000);
    return {m >= 4.9 && m <= 5.1, fmt("mean g^T C^-1 g = %.4f, required [4.9, 5.1]", m)};
}

Verdict c2_eigensolver() {
    Rng rng(77);
    double worst_value = 0.0, worst_recon = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(50), t = 1 + rng.below(20);
        DenseMatrix d(n, t);
        for (auto& x : d.data()) x = rng.gaussian();
        const std::size_t r = std::min(n, t);
        const auto fast = gram_eigendecompose(d, r);
        const auto c = outer_gram(d);
        const auto dense = jacobi_eigen(c, false);
        for (std::size_t k = 0; k < fast.values.size(); ++k)
            worst_value = std::max(worst_value, std::abs(fast.values[k] - dense.values[k]) / std::abs(dense.values[k]));
        DenseMatrix diff = c;
        for (std::size_t k = 0; k < fast.values.size(); ++k)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) diff(i, j) -= fast.values[k] * fast.vectors(i, k) * fast.vectors(j, k);
        worst_recon = std::max(worst_recon, frobenius_norm(diff) / frobenius_norm(c));
    }
    return {worst_value <= 1e-8 && worst_recon <= 1e-8,
            fmt("max eigenvalue rel err %.2e, max reconstruction rel err %.2e (limit 1e-8)", worst_value, worst_recon)};
}

Verdict c3_gradients() {
    Rng rng(31);
    double worst_mlp = 0.0, worst_euler = 0.0;
    int bad = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const MlpConfig cfg{{1 + rng.below(3), 2 + rng.below(8), 2 + rng.below(8), 1 + rng.below(2)},
                            trial % 2 ? Activation::tanh : Activation::relu};
        ParamVector p;
        Batch b;
        bool kink = true;
        while (kink) {
            p = mlp_init(cfg, rng);
            for (auto& x : p) x += 0.1 * rng.gaussian();
            b = Batch{DenseMatrix(4, cfg.input_dim()), DenseMatrix(4, cfg.output_dim())};
            for (auto& x : b.inputs.data()) x = rng.uniform(-2, 2);
            for (auto& x : b.targets.data()) x = rng.gaussian();
            kink = false;
            if (cfg.activation == Activation::relu) {
                const auto layers = layer_views(cfg, std::span<const double>(p));
                MlpTape tape(cfg);
                for (std::size_t r = 0; r < b.size(); ++r) {
                    forward_sample(cfg, layers, b.inputs.row(r), tape);
                    for (std::size_t l = 0; l + 1 < tape.pre.size(); ++l)
                        for (double z : tape.pre[l])
                            if (std::abs(z) < 1e-3) kink = true;
                }
            }
        }
        const auto lg = mse_loss_grad(cfg, p, b);
        const auto fd = central_difference([&](const std::vector<double>& q) { return mse_loss_grad(cfg, q, b, {}); }, p);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!close_rel(lg.grad[i], fd[i], 1e-5, 1e-8)) ++bad;
            worst_mlp = std::max(worst_mlp, std::abs(lg.grad[i] - fd[i]) / std::max(1e-8, std::abs(fd[i])));
        }
    }
    for (int trial = 0; trial < 20; ++trial) {
        const NeuralSsModel model{{{3, 3 + rng.below(5), 2}, Activation::tanh}, {0.5, 2.0, 0.3}, {3.0, 5.0}};
        RlcTrajectory tr;
        for (int t = 0; t < 14; ++t) {
            tr.u.push_back(rng.gaussian());
            tr.y.push_back(rng.gaussian());
        }
        auto p = mlp_init(model.config, rng);
        for (auto& x : p) x += 0.2 * rng.gaussian();
        const std::vector<SequenceWindow> windows{truncated_window(tr, 1 + rng.below(4), 8),
                                                  prefix_window(tr, 6, {0.3, -0.2})};
        std::vector<double> grad(p.size());
        sequence_fit_loss_grad(model, p, windows, grad, 0.1);
        const auto fd = central_difference(
            [&](const std::vector<double>& q) { return sequence_fit_loss_grad(model, q, windows, {}, 0.1); }, p);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!close_rel(grad[i], fd[i], 1e-5, 1e-8)) ++bad;
            worst_euler = std::max(worst_euler, std::abs(grad[i] - fd[i]) / std::max(1e-8, std::abs(fd[i])));
        }
    }
    return {bad == 0, fmt("%d coordinates outside 1e-5 relative; worst rel err MLP %.2e, Euler %.2e", bad, worst_mlp,
                          worst_euler)};
}

// Exact constant-L flow over one interval with constant input.
RlcState linear_flow(const RlcSi& p, const RlcState& x0, double u, double t) {
    const double l = inductance(0.0, p.inductance);
    const double a01 = 1.0 / p.capacitance, a10 = -1.0 / l, a11 = -p.resistance / l;
    const double alpha = 0.5 * a11;
    const double disc = alpha * alpha + a01 * a10;
    double c, s;
    if (disc < 0.0) {
        const double beta = std::sqrt(-disc);
        c = std::cos(beta * t);
        s = std::sin(beta * t) / beta;
    } else {
        const double beta = std::sqrt(disc);
        c = std::cosh(beta * t);
        s = beta > 0.0 ? std::sinh(beta * t) / beta : t;
    }
    const double g = std::exp(alpha * t);
    const double e0 = x0[0] - u, e1 = x0[1];
    return {u + g * (c - s * alpha) * e0 + g * s * a01 * e1, g * s * a10 * e0 + g * (c + s * (a11 - alpha)) * e1};
}

Verdict c8_rlc_ground_truth() {
    Rng rng(8);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        RlcSi p = to_si(trial == 0 ? kNominalRlc : sample_rlc_params(rng));
        p.constant_inductance = true;
        auto u = gen_input_signal(rng, 400);
        const auto sim = simulate_rk45(p, u, {0.0, 0.0}, kRlcSampleTime, 400);
        std::vector<RlcState> exact{{0.0, 0.0}};
        for (std::size_t k = 0; k + 1 < 400; ++k) exact.push_back(linear_flow(p, exact.back(), u[k], kRlcSampleTime));
        for (int c = 0; c < 2; ++c) {
            double scale = 0.0, err = 0.0;
            for (std::size_t t = 0; t < exact.size(); ++t) {
                scale = std::max(scale, std::abs(exact[t][c]));
                err = std::max(err, std::abs(sim[t][c] - exact[t][c]));
            }
            worst = std::max(worst, err / scale);
        }
    }
    double lo = kInf, hi = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng pr(derive_seed(500, seed));
        const RlcParams params = seed == 0 ? kNominalRlc : sample_rlc_params(pr);
        const auto d = make_task_dataset(params, derive_seed(501, seed));
        const auto& tr = d.trajectories.back();
        const auto r = euler_rollout_field(OracleField{to_si(params)}, {0.0, 0.0}, tr.u, d.ts);
        double mse = kInf;
        if (!r.diverged) {
            mse = 0.0;
            for (std::size_t t = 0; t < tr.y.size(); ++t) mse += (r.states[t][0] - tr.y[t]) * (r.states[t][0] - tr.y[t]);
            mse /= static_cast<double>(tr.y.size());
        }
        lo = std::min(lo, mse);
        hi = std::max(hi, mse);
    }
    return {worst <= 1e-4 && lo >= 0.008 && hi <= 0.02,
            fmt("RK45 vs closed form max rel err %.2e (limit 1e-4); oracle model MSE in [%.4f, %.4f], required "
                "[0.008, 0.02]",
                worst, lo, hi)};
}

// Two-sided p by visiting all 2^n sign assignments of the average ranks.
double enumerate_p(const std::vector<double>& d) {
    const std::size_t n = d.size();
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n; ++i) {
        double below = 0, equal = 0;
        for (double y : d) {
            below += std::abs(y) < std::abs(d[i]);
            equal += std::abs(y) == std::abs(d[i]);
        }
        ranks[i] = below + (equal + 1.0) / 2.0;
    }
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) w += ranks[i];
    std::uint64_t le = 0, ge = 0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1) s += ranks[i];
        le += s <= w + 1e-9;
        ge += s >= w - 1e-9;
    }
    return std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / std::ldexp(1.0, static_cast<int>(n)));
}

Verdict c10_wilcoxon_exact() {
    Rng rng(10);
    int checked = 0, mismatches = 0;
    for (std::size_t n = 1; n <= 12; ++n) {
        for (int rep = 0; rep < 50; ++rep) {
            std::vector<double> a(n), b(n, 0.0);
            for (auto& x : a) {
                x = static_cast<double>(static_cast<int>(rng.below(11)) - 5);
                if (x == 0.0) x = rep % 2 ? 0.5 : -2.0;
            }
            const double oracle = enumerate_p(a);
            double p = 0.0;
            if (n >= 5) {
                p = wilcoxon_signed_rank(a, b).p_value;
            } else {
                const auto sr = detail::signed_ranks(a, b);
                double w = 0.0;
                for (std::size_t i = 0; i < sr.ranks.size(); ++i)
                    if (sr.positive[i]) w += sr.ranks[i];
                p = wilcoxon_exact_p(sr.ranks, w);
            }
            ++checked;
            mismatches += p != oracle;
        }
    }
    return {mismatches == 0, fmt("%d of %d exact p-values differ from enumeration (n = 1..12)", mismatches, checked)};
}

// ---------------------------------------------------------------------------
// Pipeline criteria

struct Runs {
    fs::path work;
    Logger log;
    std::optional<bool> sinusoid_done;
    std::optional<bool> ablation_done;
};

RunConfig sinusoid_config(const fs::path& out) {
    RunConfig c = default_config("sinusoid");
    c.run_id = "acceptance";
    c.seed = 1;
    c.out_dir = out;
    c.support_sizes = {5};
    c.methods = {"sgd", "subgd"};
    return c;
}

void run_sinusoid(Runs& runs) {
    if (runs.sinusoid_done) return;
    runs.sinusoid_done = false;
    for (const char* name : {"sinusoid_a", "sinusoid_b"}) {
        fs::remove_all(runs.work / name);
        run_pipeline({sinusoid_config(runs.work / name), runs.log});
    }
    runs.sinusoid_done = true;
}

Verdict c4_erank(Runs& runs) {
    run_sinusoid(runs);
    const auto d = load_directions(runs.work / "sinusoid_a" / artifact::directions);
    if (d.count() < 200) return {false, fmt("only %zu directions collected", d.count())};
    const auto e = erank_at(d, {100, 200});
    DirectionMatrix random(d.dim());
    Rng stream(404);
    for (int t = 0; t < 200; ++t) random.add(rng_gaussian(stream, d.dim()));
    const double er = erank_at(random, {200}).front();
    const bool saturates = e[1] - e[0] <= 0.1 * e[0];
    const bool lower = er >= 3.0 * e[1];
    return {saturates && lower, fmt("erank(100) = %.3f, erank(200) = %.3f (growth %.3f, limit %.3f); random erank(200) = "
                                    "%.1f (needs >= %.1f)",
                                    e[0], e[1], e[1] - e[0], 0.1 * e[0], er, 3.0 * e[1])};
}

Verdict c5_sinusoid_win(Runs& runs) {
    run_sinusoid(runs);
    const auto by = mse_by_method(read_records_csv(runs.work / "sinusoid_a" / artifact::records), 5);
    const auto& sgd = by.at("sgd");
    const auto& sub = by.at("subgd");
    const auto w = wilcoxon_signed_rank(sub, sgd);
    const double med_sgd = median(sgd), med_sub = median(sub), mean_sgd = mean_of(sgd), mean_sub = mean_of(sub);
    const bool pass = med_sub < med_sgd && w.p_value < 0.01 && mean_sub <= 0.6 * mean_sgd;
    return {pass, fmt("%zu tasks; median SubGD %.4g vs SGD %.4g; Wilcoxon p = %.3g (needs < 0.01); mean SubGD %.4g vs "
                      "0.6 x SGD %.4g",
                      sgd.size(), med_sub, med_sgd, w.p_value, mean_sub, 0.6 * mean_sgd)};
}

Verdict c11_determinism(Runs& runs) {
    run_sinusoid(runs);
    const auto a = read_file(runs.work / "sinusoid_a" / artifact::records);
    const auto b = read_file(runs.work / "sinusoid_b" / artifact::records);
    return {a == b, fmt("records.csv %s (%zu bytes)", a == b ? "byte-identical" : "differs", a.size())};
}

const std::vector<std::string> kAblationRanks{"2", "4", "8", "16", "64", "256", "full"};
const std::vector<std::string> kAblationKinds{"subgd", "subgd_unweighted", "diagonal", "random"};

void run_ablation(Runs& runs) {
    run_sinusoid(runs);
    if (runs.ablation_done) return;
    runs.ablation_done = false;
    const fs::path out = runs.work / "sinusoid_ablation";
    fs::remove_all(out);
    RunConfig c = sinusoid_config(out);
    c.artifacts_from = runs.work / "sinusoid_a";
    c.methods.clear();
    for (const auto& k : kAblationKinds)
        for (const auto& r : kAblationRanks) c.methods.push_back(k + "@" + r);
    const StageContext ctx{c, runs.log};
    run_stage(ctx, Stage::tune);
    run_stage(ctx, Stage::evaluate);
    runs.ablation_done = true;
}

Verdict c6_weighting(Runs& runs) {
    run_ablation(runs);
    const auto by = mse_by_method(read_records_csv(runs.work / "sinusoid_ablation" / artifact::records), 5);
    double best_w = kInf, best_u = kInf;
    std::string best_w_r, best_u_r;
    for (const auto& r : kAblationRanks) {
        const double w = mean_of(by.at("subgd@" + r)), u = mean_of(by.at("subgd_unweighted@" + r));
        if (w < best_w) best_w = w, best_w_r = r;
        if (u < best_u) best_u = u, best_u_r = r;
    }
    const double full_w = mean_of(by.at("subgd@full")), full_u = mean_of(by.at("subgd_unweighted@full"));
    const bool pass = full_w <= 1.5 * best_w && full_u >= 2.0 * best_u;
    return {pass, fmt("weighted: full %.4g vs best %.4g at r=%s (limit 1.5x); unweighted: full %.4g vs best %.4g at "
                      "r=%s (needs >= 2x)",
                      full_w, best_w, best_w_r.c_str(), full_u, best_u, best_u_r.c_str())};
}

Verdict c7_baselines(Runs& runs) {
    run_ablation(runs);
    const auto by = mse_by_method(read_records_csv(runs.work / "sinusoid_ablation" / artifact::records), 5);
    std::ostringstream detail;
    bool pass = true;
    for (const auto& r : kAblationRanks) {
        const double s = mean_of(by.at("subgd@" + r)), d = mean_of(by.at("diagonal@" + r)),
                     x = mean_of(by.at("random@" + r));
        const bool ok = s <= d && s <= x;
        pass = pass && ok;
        detail << (r == kAblationRanks.front() ? "" : "; ") << "r=" << r << ": " << fmt("%.3g/%.3g/%.3g", s, d, x)
               << (ok ? "" : " (violated)");
    }
    return {pass, "mean MSE subgd/diagonal/random " + detail.str()};
}

Verdict c9_rlc_win(Runs& runs) {
    const fs::path out = runs.work / "rlc";
    fs::remove_all(out);
    RunConfig c = default_config("rlc");
    c.run_id = "acceptance";
    c.seed = 1;
    c.out_dir = out;
    c.methods = {"sgd", "subgd"};
    c.support_sizes = {100};
    run_pipeline({c, runs.log});
    const auto by = mse_by_method(read_records_csv(out / artifact::records), 100);
    const auto& sgd = by.at("sgd");
    const auto& sub = by.at("subgd");
    const auto w = wilcoxon_signed_rank(sub, sgd);
    const double med_sgd = median(sgd), med_sub = median(sub);
    const bool pass = med_sub <= med_sgd && w.p_value < 0.05 && med_sub <= 0.05;
    return {pass, fmt("%zu tasks; median SubGD %.4g vs SGD %.4g; Wilcoxon p = %.3g (needs < 0.05); SubGD median "
                      "needs <= 0.05",
                      sgd.size(), med_sub, med_sgd, w.p_value)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string work_dir = "acceptance_runs";
    std::vector<std::string> only;
    bool verbose = false;
    app.add_option("--work-dir", work_dir, "directory for pipeline runs");
    app.add_option("--only", only, "criteria to run, e.g. C1 C5")->delimiter(',');
    app.add_flag("--verbose", verbose, "show pipeline stage logs");
    CLI11_PARSE(app, argc, argv);
    std::setvbuf(stdout, nullptr, _IONBF, 0);

    Runs runs{work_dir, verbose ? stderr_logger() : Logger([](const std::string&) {}), {}, {}};
    fs::create_directories(runs.work);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"C1", c1_trace_identity},
        {"C2", c2_eigensolver},
        {"C3", c3_gradients},
        {"C10", c10_wilcoxon_exact},
        {"C8", c8_rlc_ground_truth},
        {"C4", [&] { return c4_erank(runs); }},
        {"C5", [&] { return c5_sinusoid_win(runs); }},
        {"C11", [&] { return c11_determinism(runs); }},
        {"C6", [&] { return c6_weighting(runs); }},
        {"C7", [&] { return c7_baselines(runs); }},
        {"C9", [&] { return c9_rlc_win(runs); }},
    };

    int failures = 0;
    for (const auto& [id, check] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failures += !v.pass;
        std::printf("%s %s (%.1fs) %s\n", v.pass ? "PASS" : "FAIL", id.c_str(), seconds_since(t0), v.detail.c_str());
    }
    return failures == 0 ? 0 : 1;
}
