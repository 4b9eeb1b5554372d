#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "subgd/benchmarks.hpp"
#include "test_util.hpp"

using namespace subgd;

namespace {

// 0.5 * sum_i a_i (theta_i - c_i)^2
Objective quadratic(std::vector<double> a, std::vector<double> c) {
    return [a, c](std::span<const double> p, std::span<double> g) {
        double l = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double e = p[i] - c[i];
            l += 0.5 * a[i] * e * e;
            if (!g.empty()) g[i] = a[i] * e;
        }
        return l;
    };
}

Evaluator squared_distance(std::vector<double> c) {
    return [c](std::span<const double> p) {
        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - c[i]) * (p[i] - c[i]);
        return s;
    };
}

} // namespace

TEST(Finetune, IdentityPreconditionerIsPlainSgd) {
    const std::vector<double> a{1, 2, 3, 4}, c{1, -1, 0.5, 2}, theta0{0.3, 0.1, -0.2, 0.0};
    const auto loss = quadratic(a, c);
    const auto out = finetune(theta0, IdentityPreconditioner{}, loss, {OptimizerKind::sgd, 0.05, 37, 0, false});
    std::vector<double> th = theta0, g(4);
    for (int k = 0; k < 37; ++k) {
        loss(th, g);
        for (std::size_t i = 0; i < 4; ++i) th[i] -= 0.05 * g[i];
    }
    EXPECT_EQ(out.params, th);
    EXPECT_EQ(out.steps_used, 37u);
    EXPECT_FALSE(out.diverged);
}

TEST(Finetune, ZeroStepsReturnsInitialParameters) {
    const std::vector<double> theta0{1, 2};
    const auto out = finetune(theta0, IdentityPreconditioner{}, quadratic({1, 1}, {0, 0}), {OptimizerKind::sgd, 0.1, 0, 0, false});
    EXPECT_EQ(out.params, theta0);
    EXPECT_EQ(out.steps_used, 0u);
}

TEST(Finetune, NonFiniteLossStopsAndFlags) {
    int calls = 0;
    Objective loss = [&](std::span<const double>, std::span<double> g) {
        std::fill(g.begin(), g.end(), 0.1);
        return ++calls > 3 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    };
    const auto out = finetune(std::vector<double>{0, 0}, IdentityPreconditioner{}, loss, {OptimizerKind::sgd, 1.0, 10, 0, false});
    EXPECT_TRUE(out.diverged);
    EXPECT_EQ(out.steps_used, 3u);
}

TEST(Finetune, SpecValidation) {
    EXPECT_THROW((FinetuneSpec{OptimizerKind::sgd, 0.0, 10, 0, false}.validate()), ValidationError);
    EXPECT_THROW((FinetuneSpec{OptimizerKind::sgd, 0.1, 0, 0, false}.validate()), ValidationError);
    EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::adam);
    EXPECT_THROW(parse_optimizer("rmsprop"), ValidationError);
}

TEST(FinetuneTrace, MatchesSeparateRuns) {
    const std::vector<double> a{3, 1, 0.5}, c{1, 2, 3}, theta0{0, 0, 0};
    const auto loss = quadratic(a, c);
    const auto query = squared_distance({1.1, 2, 2.9});
    const std::vector<std::size_t> cps{0, 1, 5, 20};
    for (auto opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
        const auto trace = finetune_trace(theta0, IdentityPreconditioner{}, loss, opt, 0.1, cps, query);
        ASSERT_EQ(trace.size(), cps.size());
        EXPECT_EQ(trace[0], query(theta0));
        for (std::size_t i = 1; i < cps.size(); ++i) {
            const auto out = finetune(theta0, IdentityPreconditioner{}, loss, {opt, 0.1, cps[i], 0, false});
            EXPECT_EQ(trace[i], query(out.params));
        }
    }
}

TEST(FinetuneTrace, AfterDivergenceScoresInfinity) {
    const auto trace = finetune_trace(std::vector<double>{1.0}, IdentityPreconditioner{}, quadratic({1e100}, {0}),
                                      OptimizerKind::sgd, 1.0, std::vector<std::size_t>{1, 2, 50}, squared_distance({0}));
    EXPECT_TRUE(std::isfinite(trace[0]));
    EXPECT_EQ(trace[2], kInf);
    EXPECT_THROW(finetune_trace(std::vector<double>{1.0}, IdentityPreconditioner{}, quadratic({1}, {0}), OptimizerKind::sgd,
                                0.1, std::vector<std::size_t>{5, 2}, squared_distance({0})),
                 ValidationError);
}

TEST(Pretrain, ReptileSingleInnerStepIdentity) {
    const std::vector<double> a{2, 0.5, 1}, c{1, -2, 0.25};
    ParamVector theta{0.5, 0.5, 0.5};
    TaskSampler sampler = [&](Rng&) { return MetaTask{quadratic(a, c), quadratic(a, c)}; };
    PretrainSpec spec;
    spec.method = PretrainMethod::reptile;
    spec.iterations = 1;
    spec.meta_batch_size = 1;
    spec.inner_steps = 1;
    spec.inner_lr = 0.1;
    spec.outer_lr = 0.7;
    Rng rng(1);
    const auto out = pretrain_reptile(theta, sampler, spec, rng);
    for (std::size_t i = 0; i < 3; ++i) {
        const double g = a[i] * (theta[i] - c[i]);
        EXPECT_NEAR(out[i], theta[i] - 0.7 * 0.1 * g, 1e-10);
    }
}

TEST(Pretrain, FomamlWithoutInnerStepsIsAdamOnQueryLoss) {
    const std::vector<double> a{2, 0.5, 1}, c{1, -2, 0.25};
    const ParamVector theta{0.5, 0.5, 0.5};
    TaskSampler sampler = [&](Rng&) { return MetaTask{quadratic(a, c), quadratic(a, c)}; };
    PretrainSpec spec;
    spec.method = PretrainMethod::fomaml;
    spec.iterations = 3;
    spec.meta_batch_size = 4;
    spec.inner_steps = 0;
    spec.outer_lr = 0.01;
    Rng rng(2);
    const auto out = pretrain_fomaml(theta, sampler, spec, rng);
    OptState ref(theta);
    std::vector<double> g(3);
    for (int k = 0; k < 3; ++k) {
        quadratic(a, c)(ref.params, g);
        adam_step(ref, g, 0.01);
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], ref.params[i], 1e-14);
}

TEST(Pretrain, SupervisedThrowsOnNonFiniteLoss) {
    StochasticObjective bad = [](std::span<const double>, std::span<double>, Rng&) { return kInf; };
    Rng rng(3);
    EXPECT_THROW(pretrain_supervised({0.0}, bad, 5, 0.1, rng), DivergenceError);
}

TEST(Pretrain, SupervisedSinusoidReachesLowError) {
    SinusoidBenchmark bench;
    Rng init(derive_seed(0, 11)), stream(derive_seed(0, 12));
    auto theta = mlp_init(bench.config, init);
    theta = pretrain_supervised(theta, bench.supervised_objective(100), 5000, 1e-3, stream);
    Rng eval(99);
    const auto held_out = sample_sinusoid_batch(kNominalSinusoid, 1000, eval);
    EXPECT_LT(episode_mse(bench.config, theta, held_out), 1e-3);
}

TEST(Collect, GlobalModeOneColumnPerTask) {
    const std::vector<double> theta0{0, 0, 0};
    CollectSpec spec{OptimizerKind::sgd, 0.2, 30, 5, 0.0, 10, 0};
    const auto res = collect_directions(theta0, 6, [](std::size_t t) {
        const double s = static_cast<double>(t + 1);
        return TrainingTask{quadratic({1, 1, 1}, {s, -s, 0.5 * s}), {}};
    }, spec, DirectionMode::global);
    ASSERT_EQ(res.directions.count(), 6u);
    EXPECT_EQ(res.directions.dim(), 3u);
    EXPECT_TRUE(res.skipped.empty());
    // 30 steps of factor 0.8 toward c.
    const double frac = 1.0 - std::pow(0.8, 30);
    for (std::size_t t = 0; t < 6; ++t) EXPECT_NEAR(res.directions.column(t)[0], frac * static_cast<double>(t + 1), 1e-12);
}

TEST(Collect, EpochModeDirectionsSumToTotalUpdate) {
    const std::vector<double> theta0{0, 0};
    CollectSpec spec{OptimizerKind::sgd, 0.1, 23, 5, 0.0, 10, 0};
    const auto res = collect_directions(theta0, 2, [](std::size_t) { return TrainingTask{quadratic({1, 2}, {1, 1}), {}}; },
                                        spec, DirectionMode::epoch);
    // 23 steps, 5 per epoch: 4 complete epochs per task.
    ASSERT_EQ(res.directions.count(), 8u);
    std::vector<double> total(2, 0.0);
    for (std::size_t e = 0; e < 4; ++e)
        for (std::size_t i = 0; i < 2; ++i) total[i] += res.directions.column(e)[i];
    const std::vector<double> a{1, 2};
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(total[i], 1.0 - std::pow(1.0 - 0.1 * a[i], 20), 1e-12);
}

TEST(Collect, NoStepsGivesDegenerateSubspace) {
    CollectSpec spec{OptimizerKind::sgd, 0.1, 0, 5, 0.0, 10, 0};
    const auto res = collect_directions(std::vector<double>{0, 0}, 3,
                                        [](std::size_t) { return TrainingTask{quadratic({1, 1}, {1, 1}), {}}; }, spec,
                                        DirectionMode::global);
    EXPECT_THROW(build_subspace(res.directions, std::nullopt, Weighting::eigenvalue_weighted), DegenerateSubspaceError);
}

TEST(Collect, DivergedTaskSkipped) {
    CollectSpec spec{OptimizerKind::sgd, 0.1, 10, 5, 0.0, 10, 0};
    const auto res = collect_directions(std::vector<double>{0, 0}, 4, [](std::size_t t) {
        if (t == 2) return TrainingTask{quadratic({1e300, 1e300}, {1e10, 1e10}), {}};
        return TrainingTask{quadratic({1, 1}, {1, 1}), {}};
    }, spec, DirectionMode::global);
    EXPECT_EQ(res.directions.count(), 3u);
    ASSERT_EQ(res.skipped.size(), 1u);
    EXPECT_EQ(res.skipped[0], 2u);
}

TEST(Collect, PlateauRuleStopsWhenRelativeImprovementIsSmall) {
    // Loss 1/k with a zero gradient: over a window w the relative drop is w/k,
    // so with w = 10 and tolerance 0.011 the first stop is at k = 910.
    std::size_t k = 0;
    TrainingTask task{[&](std::span<const double>, std::span<double> g) {
                          std::fill(g.begin(), g.end(), 0.0);
                          return 1.0 / static_cast<double>(++k);
                      },
                      {}};
    CollectSpec spec{OptimizerKind::sgd, 0.1, 5000, 5, 0.011, 10, 0};
    const auto run = finetune_training_task(std::vector<double>{0.0}, task, spec);
    EXPECT_EQ(run.steps, 910u);
}

TEST(Collect, EarlyStoppingKeepsBestParameters) {
    // Each step moves theta by +1; validation is minimized at theta = 5.
    TrainingTask task{[](std::span<const double>, std::span<double> g) {
                          g[0] = -1.0;
                          return 1.0;
                      },
                      [](std::span<const double> p) { return (p[0] - 5.0) * (p[0] - 5.0); }};
    CollectSpec spec{OptimizerKind::sgd, 1.0, 100, 1, 0.0, 10, 3};
    const auto run = finetune_training_task(std::vector<double>{0.0}, task, spec);
    EXPECT_EQ(run.params[0], 5.0);
    EXPECT_EQ(run.steps, 8u);
    EXPECT_EQ(run.epoch_params.size(), 5u);
}

TEST(Collect, EarlyStoppingFromAlreadyBestStart) {
    TrainingTask task{[](std::span<const double>, std::span<double> g) {
                          g[0] = -1.0;
                          return 1.0;
                      },
                      [](std::span<const double> p) { return p[0] * p[0]; }};
    CollectSpec spec{OptimizerKind::sgd, 1.0, 100, 2, 0.0, 10, 2};
    const auto run = finetune_training_task(std::vector<double>{0.0}, task, spec);
    EXPECT_EQ(run.params[0], 0.0);
    EXPECT_TRUE(run.epoch_params.empty());
}

TEST(Tune, PicksLargestStableStepOnStiffQuadratic) {
    // SGD on 0.5 * 250 (x - 1)^2 contracts by |1 - 250 eta|: 0.25 at 3e-3,
    // -1.5 (divergent) at 1e-2. Only 3e-3 reaches x = 1 to double precision by
    // 50 steps; every later exact hit ties and loses to fewer steps.
    InstanceFactory factory = [](std::size_t, std::size_t, std::uint64_t) {
        return FewShotInstance{quadratic({250}, {1}), squared_distance({1.5})};
    };
    const auto res = tune_hparams(std::vector<double>{0.0}, IdentityPreconditioner{}, 3, 5, 0, factory, TuneGrid{});
    EXPECT_EQ(res.best.eta, 3e-3);
    EXPECT_EQ(res.best.steps, 50u);
    EXPECT_EQ(res.best_score, 0.25);
    EXPECT_EQ(res.cells.size(), 30u);
}

TEST(Tune, TiesGoToFewerStepsThenSmallerEta) {
    InstanceFactory factory = [](std::size_t, std::size_t, std::uint64_t) {
        return FewShotInstance{quadratic({1}, {0}), [](std::span<const double>) { return 2.0; }};
    };
    TuneGrid grid{{0.3, 0.1, 0.2}, {100, 10, 50}};
    const auto res = tune_hparams(std::vector<double>{1.0}, IdentityPreconditioner{}, 2, 5, 0, factory, grid);
    EXPECT_EQ(res.best.eta, 0.1);
    EXPECT_EQ(res.best.steps, 10u);
}

TEST(Tune, SingleCellGrid) {
    InstanceFactory factory = [](std::size_t, std::size_t, std::uint64_t) {
        return FewShotInstance{quadratic({1}, {0}), squared_distance({0})};
    };
    const auto res = tune_hparams(std::vector<double>{1.0}, IdentityPreconditioner{}, 1, 5, 0, factory, TuneGrid{{0.5}, {1}});
    EXPECT_EQ(res.best.eta, 0.5);
    EXPECT_EQ(res.best.steps, 1u);
    EXPECT_DOUBLE_EQ(res.best_score, 0.25);
}

TEST(Tune, EveryCellDivergedThrows) {
    InstanceFactory factory = [](std::size_t, std::size_t, std::uint64_t) {
        return FewShotInstance{[](std::span<const double>, std::span<double>) { return std::nan(""); },
                               squared_distance({0})};
    };
    EXPECT_THROW(tune_hparams(std::vector<double>{1.0}, IdentityPreconditioner{}, 2, 5, 0, factory, TuneGrid{}),
                 DivergenceError);
}

TEST(Tune, MedianStatisticIgnoresOutlierTask) {
    InstanceFactory factory = [](std::size_t t, std::size_t, std::uint64_t) {
        return FewShotInstance{quadratic({1}, {0}), [t](std::span<const double> p) { return t == 0 ? 1e6 : p[0] * p[0]; }};
    };
    const auto res = tune_hparams(std::vector<double>{1.0}, IdentityPreconditioner{}, 3, 5, 0, factory,
                                  TuneGrid{{0.5}, {1}}, OptimizerKind::sgd, 0, TuneStatistic::median);
    EXPECT_DOUBLE_EQ(res.best_score, 0.25);
}

TEST(Evaluate, IdentityMethodMatchesDirectSgd) {
    const SinusoidBenchmark bench;
    Rng init(5);
    const auto theta0 = mlp_init(bench.config, init);
    const auto factory = bench.factory(Split::test);
    const std::vector<MethodSpec> methods{{"sgd", IdentityPreconditioner{}, {OptimizerKind::sgd, 1e-3, 20, 0, false}}};
    const auto recs = evaluate_fewshot(theta0, methods, 3, {5}, {0}, factory, "sinusoid", "r");
    ASSERT_EQ(recs.size(), 3u);
    for (const auto& r : recs) {
        const auto inst = bench.instance(Split::test, r.task_id, 5, 0);
        auto th = theta0;
        std::vector<double> g(th.size());
        for (int k = 0; k < 20; ++k) {
            inst.support_loss(th, g);
            for (std::size_t i = 0; i < th.size(); ++i) th[i] -= 1e-3 * g[i];
        }
        EXPECT_EQ(r.mse, inst.query_mse(th));
        EXPECT_EQ(r.steps_used, 20u);
    }
}

TEST(Evaluate, ZeroStepsGivesIdenticalScoresAcrossMethods) {
    const SinusoidBenchmark bench;
    Rng init(6);
    const auto theta0 = mlp_init(bench.config, init);
    Rng r(7);
    const auto diag = DiagonalPreconditioner{std::vector<double>(theta0.size(), 0.5)};
    const std::vector<MethodSpec> methods{{"a", IdentityPreconditioner{}, {OptimizerKind::sgd, 1e-3, 0, 0, false}},
                                          {"b", diag, {OptimizerKind::sgd, 1e-2, 0, 0, false}}};
    const auto recs = evaluate_fewshot(theta0, methods, 4, {5}, {1}, bench.factory(Split::test), "sinusoid", "r");
    ASSERT_EQ(recs.size(), 8u);
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(recs[t].mse, recs[4 + t].mse);
}

TEST(Evaluate, SubspaceUpdateStaysInSpan) {
    Rng rng(8);
    const std::size_t n = 12;
    DirectionMatrix d(n);
    for (int t = 0; t < 3; ++t) d.add(subgd::testing::random_vector(n, rng));
    const auto sub = build_subspace(d, std::nullopt, Weighting::eigenvalue_weighted);
    const auto theta0 = subgd::testing::random_vector(n, rng);
    const auto c = subgd::testing::random_vector(n, rng);
    const auto out = finetune(theta0, SubspacePreconditioner{sub}, quadratic(std::vector<double>(n, 1.0), c),
                              {OptimizerKind::sgd, 0.01, 50, 0, false});
    std::vector<double> delta(n);
    for (std::size_t i = 0; i < n; ++i) delta[i] = out.params[i] - theta0[i];
    const auto coeffs = matvec_transposed(sub.basis, delta);
    const auto back = matvec(sub.basis, coeffs);
    double resid = 0, norm = 0;
    for (std::size_t i = 0; i < n; ++i) {
        resid += (delta[i] - back[i]) * (delta[i] - back[i]);
        norm += delta[i] * delta[i];
    }
    EXPECT_GT(norm, 1e-6);
    EXPECT_LT(std::sqrt(resid), 1e-10 * std::sqrt(norm));
}

TEST(Evaluate, EpisodesPairedAndDeterministic) {
    const SinusoidBenchmark bench;
    Rng init(9);
    const auto theta0 = mlp_init(bench.config, init);
    const std::vector<MethodSpec> methods{{"a", IdentityPreconditioner{}, {OptimizerKind::sgd, 1e-3, 5, 0, false}},
                                          {"b", IdentityPreconditioner{}, {OptimizerKind::sgd, 1e-3, 5, 0, false}}};
    const auto r1 = evaluate_fewshot(theta0, methods, 5, {5, 10}, {0, 1}, bench.factory(Split::test), "sinusoid", "x");
    const auto r2 = evaluate_fewshot(theta0, methods, 5, {5, 10}, {0, 1}, bench.factory(Split::test), "sinusoid", "x");
    EXPECT_EQ(r1, r2);
    ASSERT_EQ(r1.size(), 2u * 2u * 2u * 5u);
    // Order: support, seed, method, task. Methods a and b are identical so
    // paired entries agree.
    for (std::size_t block = 0; block < 4; ++block)
        for (std::size_t t = 0; t < 5; ++t) {
            const auto& ra = r1[block * 10 + t];
            const auto& rb = r1[block * 10 + 5 + t];
            EXPECT_EQ(ra.method, "a");
            EXPECT_EQ(rb.method, "b");
            EXPECT_EQ(ra.task_id, t);
            EXPECT_EQ(ra.mse, rb.mse);
        }
    EXPECT_EQ(r1[0].support_size, 5u);
    EXPECT_EQ(r1[20].support_size, 10u);
    EXPECT_EQ(r1[10].seed, 1u);
}

TEST(Benchmarks, MinibatchChunksCoverEachEpoch) {
    // Targets 2^i make the chunk's summed squared error identify its rows.
    const MlpConfig cfg{{1, 1}, Activation::relu};
    const std::size_t m = 10;
    Batch b{DenseMatrix(m, 1), DenseMatrix(m, 1)};
    for (std::size_t i = 0; i < m; ++i) b.targets(i, 0) = std::ldexp(1.0, static_cast<int>(i));
    auto loss = minibatch_mse_objective(cfg, b, 3, 42);
    const std::vector<double> zero(cfg.param_count(), 0.0);
    const std::vector<std::size_t> sizes{3, 3, 4};
    for (int epoch = 0; epoch < 3; ++epoch) {
        std::set<std::size_t> seen;
        for (std::size_t chunk = 0; chunk < 3; ++chunk) {
            auto code = static_cast<std::uint64_t>(std::llround(loss(zero, {}) * static_cast<double>(sizes[chunk])));
            std::size_t rows = 0;
            for (std::size_t i = 0; i < m; ++i, code >>= 2)
                if (code & 3) {
                    EXPECT_TRUE(seen.insert(i).second);
                    ++rows;
                }
            EXPECT_EQ(rows, sizes[chunk]);
        }
        EXPECT_EQ(seen.size(), m);
    }
}

TEST(Benchmarks, SinusoidSplitsDiffer) {
    SinusoidBenchmark bench;
    const auto a = bench.task(Split::train, 0), b = bench.task(Split::test, 0);
    EXPECT_NE(a.amplitude, b.amplitude);
    const auto e1 = bench.episode(Split::test, 3, 5, 0), e2 = bench.episode(Split::test, 3, 5, 1);
    EXPECT_NE(e1.support.inputs(0, 0), e2.support.inputs(0, 0));
    EXPECT_EQ(e1.task.amplitude, e2.task.amplitude);
}

TEST(Benchmarks, RlcInstancesFiniteAndDeterministic) {
    auto bench = RlcBenchmark::create(3, 2, 1, 1);
    bench.model = NeuralSsModel{};
    Rng init(1);
    const auto theta = mlp_init(bench.model.config, init);
    const auto inst = bench.instance(Split::test, 0, 100);
    std::vector<double> g(theta.size());
    const double l = inst.support_loss(theta, g);
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_TRUE(all_finite(g));
    EXPECT_TRUE(std::isfinite(inst.query_mse(theta)));
    const auto again = bench.factory(Split::test)(0, 100, 77);
    std::vector<double> g2(theta.size());
    EXPECT_EQ(again.support_loss(theta, g2), l);
    EXPECT_EQ(g, g2);

    Rng r(4);
    const auto task = bench.meta_sampler()(r);
    EXPECT_TRUE(std::isfinite(task.support(theta, g)));
    EXPECT_TRUE(std::isfinite(task.query(theta, g)));
    EXPECT_THROW(bench.tasks(Split::nominal), ValidationError);
}
