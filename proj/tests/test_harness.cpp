#include <gtest/gtest.h>

#include "subgd/harness.hpp"
#include "test_util.hpp"

using namespace subgd;

namespace {

json tiny_sinusoid(const fs::path& out) {
    return json{{"benchmark", "sinusoid"},
                {"run_id", "tiny"},
                {"seed", 5},
                {"out_dir", out.string()},
                {"tasks", {{"train", 12}, {"validation", 3}, {"test", 6}}},
                {"pretrain", {{"iterations", 40}}},
                {"collect", {{"max_steps", 30}}},
                {"tune", {{"etas", {1e-3, 1e-2}}, {"steps", {5, 10}}}},
                {"evaluate", {{"methods", {"sgd", "subgd", "subgd@2", "subgd_unweighted@2", "diagonal@10", "random@2"}},
                              {"support_sizes", {5}},
                              {"query_size", 20}}}};
}

StageContext quiet(RunConfig c) { return {std::move(c), [](const std::string&) {}}; }

} // namespace

TEST(Config, Defaults) {
    const auto s = default_config("sinusoid");
    EXPECT_EQ(s.train_tasks, 300u);
    EXPECT_EQ(s.grid.etas.size(), 6u);
    EXPECT_EQ(s.grid.steps, (std::vector<std::size_t>{10, 50, 100, 500, 1000}));
    EXPECT_EQ(s.pretrain.method, PretrainMethod::supervised);
    const auto r = default_config("rlc");
    EXPECT_EQ(r.tune_statistic, TuneStatistic::median);
    EXPECT_EQ(r.collect.optimizer, OptimizerKind::adam);
    EXPECT_THROW(default_config("pendulum"), ConfigError);
}

TEST(Config, OverlayKeepsUnspecifiedDefaults) {
    const auto c = parse_config(json{{"benchmark", "rlc"}, {"pretrain", {{"method", "reptile"}}}});
    EXPECT_EQ(c.pretrain.method, PretrainMethod::reptile);
    EXPECT_EQ(c.pretrain.meta_batch_size, 10u);
    EXPECT_EQ(c.train_tasks, 64u);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
    EXPECT_THROW(parse_config(json{{"bogus", 1}}), ConfigError);
    EXPECT_THROW(parse_config(json{{"collect", {{"eta", "fast"}}}}), ConfigError);
    EXPECT_THROW(parse_config(json{{"collect", {{"lr", 0.1}}}}), ConfigError);
    EXPECT_THROW(parse_config(json{{"tune", {{"optimizer", "lbfgs"}}}}), ConfigError);
    EXPECT_THROW(parse_config(json{{"tune", {{"statistic", "mode"}}}}), ConfigError);
    EXPECT_THROW(parse_config(json::array()), ConfigError);
}

TEST(Config, Validation) {
    auto c = default_config("sinusoid");
    EXPECT_NO_THROW(validate_config(c));
    c.methods = {"sgd", "sgd"};
    EXPECT_THROW(validate_config(c), ConfigError);
    c.methods = {"newton"};
    EXPECT_THROW(validate_config(c), ConfigError);
    c = default_config("sinusoid");
    c.grid.steps = {0};
    EXPECT_THROW(validate_config(c), ConfigError);
    c = default_config("rlc");
    c.support_sizes = {5000};
    EXPECT_THROW(validate_config(c), ConfigError);
    c = default_config("sinusoid");
    c.run_id = "a,b";
    EXPECT_THROW(validate_config(c), ConfigError);
}

TEST(Config, JsonRoundTrip) {
    auto c = default_config("rlc");
    c.subspace_rank = 8;
    c.methods = {"sgd", "subgd@4"};
    c.eval_seeds = {1, 2};
    const auto back = parse_config(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(back.subspace_rank, std::optional<std::size_t>(8));
}

TEST(Config, PaperScale) {
    auto c = default_config("rlc");
    apply_paper_scale(c);
    EXPECT_EQ(c.train_tasks, 512u);
    EXPECT_EQ(c.support_sizes.size(), 6u);
    auto m = parse_config(json{{"pretrain", {{"method", "fomaml"}}}});
    apply_paper_scale(m);
    EXPECT_EQ(m.pretrain.iterations, 50000u);
}

TEST(Config, LoadFromFile) {
    subgd::testing::TempDir dir;
    write_file_atomic(dir / "c.json", R"({"seed": 9})");
    EXPECT_EQ(load_config(dir / "c.json").seed, 9u);
    write_file_atomic(dir / "bad.json", "{seed");
    EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
    EXPECT_THROW(load_config(dir / "none.json"), ConfigError);
}

TEST(Stages, ParseStageNames) {
    EXPECT_EQ(parse_stage("subspace"), Stage::subspace);
    EXPECT_THROW(parse_stage("deploy"), ConfigError);
    EXPECT_EQ(stage_names().size(), 6u);
}

TEST(Stages, MissingSubspaceNamesProducingStage) {
    subgd::testing::TempDir dir;
    auto c = parse_config(tiny_sinusoid(dir.path()));
    const auto ctx = quiet(c);
    run_stage(ctx, Stage::pretrain);
    try {
        run_stage(ctx, Stage::tune);
        FAIL() << "expected ArtifactError";
    } catch (const ArtifactError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("subgd subspace"), std::string::npos) << msg;
        EXPECT_EQ(exit_code_for(e), 3);
    }
}

TEST(Stages, ExitCodes) {
    EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
    EXPECT_EQ(exit_code_for(ArtifactError("x")), 3);
    EXPECT_EQ(exit_code_for(CorruptFileError("x")), 3);
    EXPECT_EQ(exit_code_for(DivergenceError("x")), 4);
    EXPECT_EQ(exit_code_for(DegenerateSubspaceError("x")), 4);
    EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(Stages, ErankGrid) {
    EXPECT_EQ(erank_grid(3), (std::vector<std::size_t>{1, 2, 3}));
    const auto g = erank_grid(35);
    EXPECT_EQ(g.front(), 1u);
    EXPECT_EQ(g[9], 10u);
    EXPECT_EQ(g[10], 20u);
    EXPECT_EQ(g.back(), 35u);
}

TEST(Pipeline, TinySinusoidEndToEndAndDeterministic) {
    subgd::testing::TempDir a, b;
    const auto ca = parse_config(tiny_sinusoid(a.path()));
    run_pipeline(quiet(ca));
    run_stage(quiet(ca), Stage::report, true);
    for (const char* f : {"theta0.ckpt", "directions.bin", "subspace.bin", "erank_curve.tsv", "tune.json", "records.csv",
                          "collect.json", "pretrain.config.json", "report/summary.csv", "report/comparisons.csv",
                          "report/summary.md", "report/plot/support_curve.tsv", "report/plot/erank_curve.tsv",
                          "report/plot/subspace_ablation.tsv"})
        EXPECT_TRUE(fs::exists(a / f)) << f;
    const auto recs = read_records_csv(a / "records.csv");
    EXPECT_EQ(recs.size(), 6u * 6u);
    for (const auto& r : recs) {
        EXPECT_EQ(r.run_id, "tiny");
        EXPECT_EQ(r.support_size, 5u);
    }

    run_pipeline(quiet(parse_config(tiny_sinusoid(b.path()))));
    EXPECT_EQ(read_file(a / "records.csv"), read_file(b / "records.csv"));
    EXPECT_EQ(read_file(a / "tune.json"), read_file(b / "tune.json"));
}

TEST(Pipeline, ArtifactsFromFallback) {
    subgd::testing::TempDir base, ablation;
    run_pipeline(quiet(parse_config(tiny_sinusoid(base.path()))));
    auto j = tiny_sinusoid(ablation.path());
    j["artifacts_from"] = base.path().string();
    j["evaluate"]["methods"] = {"sgd", "random@4"};
    const auto ctx = quiet(parse_config(j));
    run_stage(ctx, Stage::tune);
    run_stage(ctx, Stage::evaluate);
    EXPECT_FALSE(fs::exists(ablation / "theta0.ckpt"));
    const auto recs = read_records_csv(ablation / "records.csv");
    EXPECT_EQ(recs.size(), 2u * 6u);
    // The sgd row is independent of the other methods in the run.
    const auto base_recs = read_records_csv(base / "records.csv");
    for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(recs[t], base_recs[t]);
}

TEST(Pipeline, EvaluateWithoutTuneEntryFails) {
    subgd::testing::TempDir dir;
    run_pipeline(quiet(parse_config(tiny_sinusoid(dir.path()))));
    auto j = tiny_sinusoid(dir.path());
    j["evaluate"]["methods"] = {"sgd", "subgd@3"};
    EXPECT_THROW(run_stage(quiet(parse_config(j)), Stage::evaluate), ArtifactError);
}
