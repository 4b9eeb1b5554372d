#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "subgd/sinusoid.hpp"
#include "test_util.hpp"

using namespace subgd;

TEST(SinusoidTask, Reproducible) {
    Rng a(3), b(3);
    EXPECT_EQ(sample_sinusoid_task(a), sample_sinusoid_task(b));
}

TEST(SinusoidTask, RangesOverManyDraws) {
    Rng rng(4);
    double amin = 1e9, amax = -1e9;
    for (int i = 0; i < 10000; ++i) {
        const auto t = sample_sinusoid_task(rng);
        ASSERT_GE(t.amplitude, 0.1);
        ASSERT_LE(t.amplitude, 5.0);
        ASSERT_GE(t.phase, 0.0);
        ASSERT_LE(t.phase, std::numbers::pi);
        amin = std::min(amin, t.amplitude);
        amax = std::max(amax, t.amplitude);
    }
    EXPECT_LE(amin, 0.15);
    EXPECT_GE(amax, 4.95);
}

TEST(SinusoidTask, HandValues) {
    EXPECT_NEAR((SinusoidTask{1.0, 0.0})(std::numbers::pi / 2), 1.0, 1e-15);
    EXPECT_NEAR(kNominalSinusoid(std::numbers::pi / 2), 0.0, 1e-15);
}

TEST(SinusoidEpisode, TargetsExactAndBounded) {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const auto task = sample_sinusoid_task(rng);
        const auto ep = sample_episode(task, 10, 100, rng);
        ASSERT_EQ(ep.support.size(), 10u);
        ASSERT_EQ(ep.query.size(), 100u);
        for (const Batch* b : {&ep.support, &ep.query})
            for (std::size_t r = 0; r < b->size(); ++r) {
                const double x = b->inputs(r, 0);
                ASSERT_GE(x, -5.0);
                ASSERT_LE(x, 5.0);
                ASSERT_EQ(b->targets(r, 0), task(x));
                ASSERT_LE(std::abs(b->targets(r, 0)), task.amplitude);
            }
    }
    EXPECT_THROW(sample_episode(SinusoidTask{}, 0, 5, rng), ValidationError);
}

TEST(SinusoidEpisode, SupportAndQueryUseIndependentStreams) {
    Rng a(6), b(6);
    const auto e1 = sample_episode(SinusoidTask{}, 5, 100, a);
    const auto e2 = sample_episode(SinusoidTask{}, 7, 100, b);
    // The query stream does not depend on the support size.
    EXPECT_EQ(e1.query.inputs, e2.query.inputs);
    EXPECT_NE(e1.support.inputs(0, 0), e1.query.inputs(0, 0));
}

TEST(EpisodeMse, ZeroNetOnUnitSine) {
    const auto config = sinusoid_mlp_config();
    const ParamVector zeros(config.param_count(), 0.0);
    Batch grid{DenseMatrix(10001, 1), DenseMatrix(10001, 1)};
    for (int i = 0; i <= 10000; ++i) {
        const double x = -5.0 + 10.0 * i / 10000.0;
        grid.inputs(i, 0) = x;
        grid.targets(i, 0) = std::sin(x);
    }
    // (1/10) * integral of sin^2 over [-5, 5] = 1/2 - sin(10)/20
    EXPECT_NEAR(episode_mse(config, zeros, grid), 0.5 - std::sin(10.0) / 20.0, 1e-4);
}

TEST(EpisodeMse, ConsistentWithLossFunction) {
    Rng rng(7);
    const auto config = sinusoid_mlp_config();
    const auto p = mlp_init(config, rng);
    const auto ep = sample_episode(sample_sinusoid_task(rng), 5, 100, rng);
    EXPECT_EQ(episode_mse(config, p, ep.query), mse_loss_grad(config, p, ep.query).loss);
}

TEST(SinusoidExport, CsvHasOneRowPerSample) {
    subgd::testing::TempDir dir;
    Rng rng(8);
    std::vector<SinusoidEpisode> eps{sample_episode(sample_sinusoid_task(rng), 3, 4, rng)};
    export_episodes_csv(dir / "ep.csv", eps);
    const auto text = read_file(dir / "ep.csv");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
    EXPECT_EQ(text.rfind("task_id,split,x,y\n", 0), 0u);
}
