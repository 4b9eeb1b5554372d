#pragma once

// Run configuration and the pretrain -> collect -> subspace -> tune ->
// evaluate -> report stages. Each stage reads its inputs from the output
// directory (or `artifacts_from`), writes its outputs atomically and logs the
// resolved configuration beside them.

#include <chrono>
#include <set>

#include "subgd/benchmarks.hpp"
#include "subgd/checkpoint.hpp"
#include "subgd/records.hpp"

namespace subgd {

enum class Stage { pretrain, collect, subspace, tune, evaluate, report };

inline const std::vector<std::pair<Stage, std::string>>& stage_names() {
    static const std::vector<std::pair<Stage, std::string>> names{
        {Stage::pretrain, "pretrain"}, {Stage::collect, "collect"},   {Stage::subspace, "subspace"},
        {Stage::tune, "tune"},         {Stage::evaluate, "evaluate"}, {Stage::report, "report"}};
    return names;
}

inline std::string to_string(Stage s) {
    for (const auto& [k, v] : stage_names())
        if (k == s) return v;
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    for (const auto& [k, v] : stage_names())
        if (v == s) return k;
    throw ConfigError("unknown stage '" + s + "'");
}

struct RunConfig {
    std::string benchmark = "sinusoid";
    std::string run_id = "run";
    std::uint64_t seed = 1;
    fs::path out_dir = "runs/default";
    fs::path artifacts_from; // fallback location for upstream artifacts
    bool paper_scale = false;

    std::size_t train_tasks = 300;
    std::size_t validation_tasks = 50;
    std::size_t test_tasks = 100;

    PretrainSpec pretrain;
    CollectSpec collect;
    DirectionMode direction_mode = DirectionMode::global;
    std::size_t collect_samples = 100; // sinusoid: samples per training task

    std::optional<std::size_t> subspace_rank;
    Weighting weighting = Weighting::eigenvalue_weighted;

    OptimizerKind finetune_optimizer = OptimizerKind::sgd;
    bool normalized = false;
    std::size_t epoch_steps = 0;
    TuneGrid grid;
    TuneStatistic tune_statistic = TuneStatistic::mean;

    std::vector<std::string> methods{"sgd", "subgd"};
    std::vector<std::size_t> support_sizes{5, 10, 20};
    std::vector<std::uint64_t> eval_seeds{0};
    std::size_t query_size = 100;
};

// ---------------------------------------------------------------------------
// Defaults and JSON

inline PretrainSpec default_pretrain(const std::string& benchmark, PretrainMethod m) {
    PretrainSpec p;
    p.method = m;
    if (benchmark == "sinusoid") {
        switch (m) {
        case PretrainMethod::supervised:
            p.iterations = 5000;
            p.outer_lr = 1e-3;
            p.batch_size = 100;
            break;
        case PretrainMethod::fomaml:
            p = {m, 5000, 25, 1, 0.01, 0.001, 10, 10, 100};
            break;
        case PretrainMethod::reptile:
            p = {m, 5000, 25, 10, 0.005, 1.0, 10, 10, 100};
            break;
        }
    } else {
        // Learning rates are on the scale of the normalized network (see README).
        switch (m) {
        case PretrainMethod::supervised:
            p.iterations = 2000;
            p.outer_lr = 1e-2;
            p.batch_size = 16;
            break;
        case PretrainMethod::fomaml:
            p = {m, 2000, 16, 5, 1e-7, 0.001, 50, 50, 16};
            break;
        case PretrainMethod::reptile:
            p = {m, 2000, 10, 5, 1e-7, 1.0, 50, 50, 16};
            break;
        }
    }
    return p;
}

inline RunConfig default_config(const std::string& benchmark) {
    RunConfig c;
    c.benchmark = benchmark;
    if (benchmark == "sinusoid") {
        c.pretrain = default_pretrain(benchmark, PretrainMethod::supervised);
        c.collect = {OptimizerKind::sgd, 0.01, 2000, 4, 1e-4, 10, 0};
    } else if (benchmark == "rlc") {
        c.train_tasks = 64;
        c.validation_tasks = 16;
        c.test_tasks = 64;
        c.pretrain = default_pretrain(benchmark, PretrainMethod::supervised);
        c.collect = {OptimizerKind::adam, 1e-3, 500, 10, 1e-4, 10, 5};
        c.grid.etas = {3e-8, 1e-7, 3e-7, 1e-6, 3e-6, 1e-5};
        c.tune_statistic = TuneStatistic::median;
        c.support_sizes = {100};
    } else {
        throw ConfigError("unknown benchmark '" + benchmark + "' (expected sinusoid or rlc)");
    }
    return c;
}

namespace detail {

inline void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [k, v] : j.items())
        if (!allowed.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <class T, class Parse>
void read_enum(const json& j, const char* key, T& out, const std::string& where, Parse parse) {
    if (!j.contains(key)) return;
    try {
        out = parse(j.at(key).get<std::string>());
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

} // namespace detail

/// Overlays a JSON document onto the benchmark defaults.
inline RunConfig parse_config(const json& j) {
    using detail::read_enum;
    using detail::read_opt;
    detail::check_keys(j, "config",
                       {"benchmark", "run_id", "seed", "out_dir", "artifacts_from", "paper_scale", "tasks", "pretrain",
                        "collect", "subspace", "tune", "evaluate"});
    std::string benchmark = "sinusoid";
    read_opt(j, "benchmark", benchmark, "config");
    RunConfig c = default_config(benchmark);
    read_opt(j, "run_id", c.run_id, "config");
    read_opt(j, "seed", c.seed, "config");
    std::string s;
    if (j.contains("out_dir")) {
        read_opt(j, "out_dir", s, "config");
        c.out_dir = s;
    }
    if (j.contains("artifacts_from")) {
        read_opt(j, "artifacts_from", s, "config");
        c.artifacts_from = s;
    }
    read_opt(j, "paper_scale", c.paper_scale, "config");

    if (j.contains("tasks")) {
        const json& t = j["tasks"];
        detail::check_keys(t, "tasks", {"train", "validation", "test"});
        read_opt(t, "train", c.train_tasks, "tasks");
        read_opt(t, "validation", c.validation_tasks, "tasks");
        read_opt(t, "test", c.test_tasks, "tasks");
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        detail::check_keys(p, "pretrain",
                           {"method", "iterations", "meta_batch_size", "inner_steps", "inner_lr", "outer_lr",
                            "support_size", "query_size", "batch_size"});
        PretrainMethod m = c.pretrain.method;
        read_enum(p, "method", m, "pretrain", parse_pretrain_method);
        c.pretrain = default_pretrain(c.benchmark, m);
        read_opt(p, "iterations", c.pretrain.iterations, "pretrain");
        read_opt(p, "meta_batch_size", c.pretrain.meta_batch_size, "pretrain");
        read_opt(p, "inner_steps", c.pretrain.inner_steps, "pretrain");
        read_opt(p, "inner_lr", c.pretrain.inner_lr, "pretrain");
        read_opt(p, "outer_lr", c.pretrain.outer_lr, "pretrain");
        read_opt(p, "support_size", c.pretrain.support_size, "pretrain");
        read_opt(p, "query_size", c.pretrain.query_size, "pretrain");
        read_opt(p, "batch_size", c.pretrain.batch_size, "pretrain");
    }
    if (j.contains("collect")) {
        const json& p = j["collect"];
        detail::check_keys(p, "collect",
                           {"optimizer", "eta", "max_steps", "epoch_steps", "plateau_tolerance", "plateau_window",
                            "patience", "mode", "samples"});
        read_enum(p, "optimizer", c.collect.optimizer, "collect", parse_optimizer);
        read_opt(p, "eta", c.collect.eta, "collect");
        read_opt(p, "max_steps", c.collect.max_steps, "collect");
        read_opt(p, "epoch_steps", c.collect.epoch_steps, "collect");
        read_opt(p, "plateau_tolerance", c.collect.plateau_tolerance, "collect");
        read_opt(p, "plateau_window", c.collect.plateau_window, "collect");
        read_opt(p, "patience", c.collect.patience, "collect");
        read_enum(p, "mode", c.direction_mode, "collect", parse_direction_mode);
        read_opt(p, "samples", c.collect_samples, "collect");
    }
    if (j.contains("subspace")) {
        const json& p = j["subspace"];
        detail::check_keys(p, "subspace", {"rank", "weighting"});
        if (p.contains("rank") && !p["rank"].is_null()) {
            std::size_t r = 0;
            read_opt(p, "rank", r, "subspace");
            c.subspace_rank = r;
        }
        read_enum(p, "weighting", c.weighting, "subspace", parse_weighting);
    }
    if (j.contains("tune")) {
        const json& p = j["tune"];
        detail::check_keys(p, "tune", {"optimizer", "normalized", "epoch_steps", "etas", "steps", "statistic"});
        read_enum(p, "optimizer", c.finetune_optimizer, "tune", parse_optimizer);
        read_opt(p, "normalized", c.normalized, "tune");
        read_opt(p, "epoch_steps", c.epoch_steps, "tune");
        read_opt(p, "etas", c.grid.etas, "tune");
        read_opt(p, "steps", c.grid.steps, "tune");
        read_enum(p, "statistic", c.tune_statistic, "tune", [](const std::string& v) {
            if (v == "mean") return TuneStatistic::mean;
            if (v == "median") return TuneStatistic::median;
            throw ValidationError("expected mean or median");
        });
    }
    if (j.contains("evaluate")) {
        const json& p = j["evaluate"];
        detail::check_keys(p, "evaluate", {"methods", "support_sizes", "seeds", "query_size"});
        read_opt(p, "methods", c.methods, "evaluate");
        read_opt(p, "support_sizes", c.support_sizes, "evaluate");
        read_opt(p, "seeds", c.eval_seeds, "evaluate");
        read_opt(p, "query_size", c.query_size, "evaluate");
    }
    return c;
}

inline void validate_config(const RunConfig& c) {
    if (c.run_id.empty() || c.run_id.find_first_of(",\n\"") != std::string::npos)
        throw ConfigError("run_id must be non-empty and free of commas");
    if (c.train_tasks == 0 || c.validation_tasks == 0 || c.test_tasks == 0)
        throw ConfigError("task counts must be positive");
    try {
        c.pretrain.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    if (!(c.collect.eta > 0.0) || c.collect.max_steps == 0) throw ConfigError("collect: eta and max_steps must be positive");
    if (c.grid.etas.empty() || c.grid.steps.empty()) throw ConfigError("tune: empty grid");
    for (double e : c.grid.etas)
        if (!(e > 0.0)) throw ConfigError("tune: etas must be positive");
    for (auto s : c.grid.steps)
        if (s == 0) throw ConfigError("tune: steps must be >= 1");
    if (c.methods.empty()) throw ConfigError("evaluate: no methods");
    for (const auto& m : c.methods) {
        try {
            parse_method_label(m);
        } catch (const ValidationError& e) {
            throw ConfigError(std::string("evaluate.methods: ") + e.what());
        }
    }
    if (std::set<std::string>(c.methods.begin(), c.methods.end()).size() != c.methods.size())
        throw ConfigError("evaluate.methods: duplicate method");
    if (c.support_sizes.empty() || c.eval_seeds.empty()) throw ConfigError("evaluate: empty support sizes or seeds");
    for (auto s : c.support_sizes)
        if (s == 0) throw ConfigError("evaluate: support sizes must be >= 1");
    if (c.benchmark == "rlc")
        for (auto s : c.support_sizes)
            if (s > kRlcSequenceLength) throw ConfigError("evaluate: RLC support exceeds the sequence length");
    if (c.query_size == 0) throw ConfigError("evaluate: query_size must be >= 1");
}

/// Iteration counts and task numbers of the full-size experiments.
inline void apply_paper_scale(RunConfig& c) {
    c.paper_scale = true;
    if (c.pretrain.method != PretrainMethod::supervised) c.pretrain.iterations = 50000;
    if (c.benchmark == "rlc") {
        c.train_tasks = 512;
        c.test_tasks = 256;
        c.support_sizes = {10, 20, 30, 50, 70, 100};
    } else {
        c.support_sizes = {5, 10, 20};
    }
}

inline json to_json(const RunConfig& c) {
    json j;
    j["benchmark"] = c.benchmark;
    j["run_id"] = c.run_id;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir.string();
    if (!c.artifacts_from.empty()) j["artifacts_from"] = c.artifacts_from.string();
    j["paper_scale"] = c.paper_scale;
    j["tasks"] = {{"train", c.train_tasks}, {"validation", c.validation_tasks}, {"test", c.test_tasks}};
    j["pretrain"] = {{"method", to_string(c.pretrain.method)},
                     {"iterations", c.pretrain.iterations},
                     {"meta_batch_size", c.pretrain.meta_batch_size},
                     {"inner_steps", c.pretrain.inner_steps},
                     {"inner_lr", c.pretrain.inner_lr},
                     {"outer_lr", c.pretrain.outer_lr},
                     {"support_size", c.pretrain.support_size},
                     {"query_size", c.pretrain.query_size},
                     {"batch_size", c.pretrain.batch_size}};
    j["collect"] = {{"optimizer", to_string(c.collect.optimizer)},
                    {"eta", c.collect.eta},
                    {"max_steps", c.collect.max_steps},
                    {"epoch_steps", c.collect.epoch_steps},
                    {"plateau_tolerance", c.collect.plateau_tolerance},
                    {"plateau_window", c.collect.plateau_window},
                    {"patience", c.collect.patience},
                    {"mode", to_string(c.direction_mode)},
                    {"samples", c.collect_samples}};
    j["subspace"] = {{"rank", c.subspace_rank ? json(*c.subspace_rank) : json(nullptr)},
                     {"weighting", to_string(c.weighting)}};
    j["tune"] = {{"optimizer", to_string(c.finetune_optimizer)},
                 {"normalized", c.normalized},
                 {"epoch_steps", c.epoch_steps},
                 {"etas", c.grid.etas},
                 {"steps", c.grid.steps},
                 {"statistic", c.tune_statistic == TuneStatistic::mean ? "mean" : "median"}};
    j["evaluate"] = {{"methods", c.methods},
                     {"support_sizes", c.support_sizes},
                     {"seeds", c.eval_seeds},
                     {"query_size", c.query_size}};
    return j;
}

inline RunConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Artifacts

namespace artifact {
inline constexpr const char* theta0 = "theta0.ckpt";
inline constexpr const char* directions = "directions.bin";
inline constexpr const char* subspace = "subspace.bin";
inline constexpr const char* erank = "erank_curve.tsv";
inline constexpr const char* tune = "tune.json";
inline constexpr const char* records = "records.csv";
} // namespace artifact

inline std::string producing_stage(const std::string& name) {
    if (name == artifact::theta0) return "pretrain";
    if (name == artifact::directions) return "collect";
    if (name == artifact::subspace || name == artifact::erank) return "subspace";
    if (name == artifact::tune) return "tune";
    return "evaluate";
}

/// Location of an upstream artifact: the output directory first, then artifacts_from.
inline fs::path input_path(const RunConfig& c, const std::string& name) {
    const fs::path own = c.out_dir / name;
    if (fs::exists(own)) return own;
    if (!c.artifacts_from.empty() && fs::exists(c.artifacts_from / name)) return c.artifacts_from / name;
    throw ArtifactError("missing artifact '" + own.string() + "'; run `subgd " + producing_stage(name) +
                        " --config <same config>` first");
}

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
    return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

struct StageContext {
    RunConfig config;
    Logger log = stderr_logger();
};

namespace detail {

inline void log_resolved_config(const StageContext& ctx, Stage stage) {
    write_json_atomic(ctx.config.out_dir / (to_string(stage) + ".config.json"), to_json(ctx.config));
}

inline CheckpointMetadata theta_metadata(const RunConfig& c, const MlpConfig& m) {
    return {m.layer_sizes, to_string(m.activation), c.seed, "pretrain:" + to_string(c.pretrain.method), "subgd"};
}

inline SinusoidBenchmark sinusoid_of(const RunConfig& c) {
    SinusoidBenchmark b;
    b.seed = c.seed;
    b.train_tasks = c.train_tasks;
    b.query_size = c.query_size;
    b.collect_samples = c.collect_samples;
    b.epoch_steps = c.epoch_steps;
    return b;
}

inline MlpConfig network_of(const RunConfig& c) {
    return c.benchmark == "rlc" ? rlc_mlp_config() : sinusoid_mlp_config();
}

inline ParamVector load_theta0(const RunConfig& c) {
    const auto ck = checkpoint_load(input_path(c, artifact::theta0));
    if (ck.params.size() != network_of(c).param_count())
        throw ArtifactError("theta0 has " + std::to_string(ck.params.size()) + " parameters, the " + c.benchmark +
                            " network needs " + std::to_string(network_of(c).param_count()));
    return ck.params;
}

struct PreconditionerSources {
    std::optional<Subspace> subspace;
    std::optional<DirectionMatrix> directions;
};

inline Subspace with_weighting(Subspace s, Weighting w) {
    s.weighting = w;
    s.sigma = w == Weighting::unweighted ? std::vector<double>(s.rank(), 1.0) : s.eigenvalues;
    return s;
}

inline PreconditionerSources load_sources(const RunConfig& c) {
    PreconditionerSources src;
    for (const auto& m : c.methods) {
        const auto label = parse_method_label(m);
        if (label.kind == "sgd") continue;
        if (!src.subspace) {
            try {
                src.subspace = load_subspace(input_path(c, artifact::subspace));
            } catch (const ArtifactError& e) {
                throw ArtifactError(std::string(e.what()) + " (method '" + m + "' needs the SubGD subspace)");
            }
        }
        if (label.kind == "diagonal" && !src.directions) src.directions = load_directions(input_path(c, artifact::directions));
    }
    return src;
}

inline Preconditioner make_preconditioner(const RunConfig& c, const std::string& method, const PreconditionerSources& src) {
    const auto label = parse_method_label(method);
    if (label.kind == "sgd") return IdentityPreconditioner{};
    const Subspace& full = *src.subspace;
    const std::size_t r = std::min(label.rank.value_or(full.rank()), full.rank());
    if (label.kind == "subgd") return SubspacePreconditioner{with_weighting(truncate(full, r), Weighting::eigenvalue_weighted)};
    if (label.kind == "subgd_unweighted") return SubspacePreconditioner{with_weighting(truncate(full, r), Weighting::unweighted)};
    if (label.kind == "diagonal") {
        const std::size_t keep = label.rank ? std::min(*label.rank, src.directions->dim()) : src.directions->dim();
        return build_diagonal_preconditioner(*src.directions, keep);
    }
    Rng stream(derive_seed(derive_seed(c.seed, 13), r));
    return build_random_subspace(full.dim(), r, stream);
}

inline std::string tune_key(const std::string& method, std::size_t support) {
    return method + "|" + std::to_string(support);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline void stage_pretrain(const StageContext& ctx) {
    const RunConfig& c = ctx.config;
    const MlpConfig net = detail::network_of(c);
    Rng init(derive_seed(c.seed, 11));
    ParamVector theta = mlp_init(net, init);
    Rng stream(derive_seed(c.seed, 12));
    const auto& p = c.pretrain;
    ctx.log("[pretrain] " + c.benchmark + " " + to_string(p.method) + ", " + std::to_string(p.iterations) + " iterations");
    if (c.benchmark == "sinusoid") {
        auto b = detail::sinusoid_of(c);
        switch (p.method) {
        case PretrainMethod::supervised:
            theta = pretrain_supervised(theta, b.supervised_objective(p.batch_size), p.iterations, p.outer_lr, stream);
            break;
        case PretrainMethod::fomaml:
            theta = pretrain_fomaml(theta, b.meta_sampler(p.support_size, p.query_size), p, stream);
            break;
        case PretrainMethod::reptile:
            theta = pretrain_reptile(theta, b.meta_sampler(p.support_size, p.query_size), p, stream);
            break;
        }
    } else {
        const std::size_t n_train = p.method == PretrainMethod::supervised ? 0 : c.train_tasks;
        auto b = RlcBenchmark::create(c.seed, n_train, 0, 0);
        b.pretrain_batch = p.batch_size;
        b.meta_window = p.support_size;
        switch (p.method) {
        case PretrainMethod::supervised:
            theta = pretrain_supervised(theta, b.supervised_objective(), p.iterations, p.outer_lr, stream);
            break;
        case PretrainMethod::fomaml:
            theta = pretrain_fomaml(theta, b.meta_sampler(), p, stream);
            break;
        case PretrainMethod::reptile:
            theta = pretrain_reptile(theta, b.meta_sampler(), p, stream);
            break;
        }
    }
    checkpoint_save(c.out_dir / artifact::theta0, theta, detail::theta_metadata(c, net));
    detail::log_resolved_config(ctx, Stage::pretrain);
}

inline void stage_collect(const StageContext& ctx) {
    const RunConfig& c = ctx.config;
    const ParamVector theta = detail::load_theta0(c);
    ctx.log("[collect] fine-tuning " + std::to_string(c.train_tasks) + " training tasks (" + to_string(c.direction_mode) +
            " directions)");
    CollectResult res{DirectionMatrix(theta.size()), {}, {}};
    if (c.benchmark == "sinusoid") {
        const auto b = detail::sinusoid_of(c);
        res = collect_directions(theta, c.train_tasks, [&](std::size_t i) { return b.training_task(i); }, c.collect,
                                 c.direction_mode);
    } else {
        const auto b = RlcBenchmark::create(c.seed, c.train_tasks, 0, 0);
        res = collect_directions(theta, c.train_tasks, [&](std::size_t i) { return b.training_task(i); }, c.collect,
                                 c.direction_mode);
    }
    if (res.directions.count() == 0) throw DivergenceError("collect: every training task diverged");
    save_directions(c.out_dir / artifact::directions, res.directions, to_string(c.direction_mode), c.run_id);
    write_json_atomic(c.out_dir / "collect.json",
                      {{"columns", res.directions.count()}, {"steps", res.steps}, {"skipped", res.skipped}});
    detail::log_resolved_config(ctx, Stage::collect);
}

/// Prefix lengths at which the effective-rank curve is sampled.
inline std::vector<std::size_t> erank_grid(std::size_t count) {
    std::vector<std::size_t> ks;
    for (std::size_t k = 1; k <= count; k += (k < 10 ? 1 : 10)) ks.push_back(k);
    if (ks.back() != count) ks.push_back(count);
    return ks;
}

inline void stage_subspace(const StageContext& ctx) {
    const RunConfig& c = ctx.config;
    const DirectionMatrix d = load_directions(input_path(c, artifact::directions));
    ctx.log("[subspace] " + std::to_string(d.count()) + " directions in R^" + std::to_string(d.dim()));
    Subspace s = build_subspace(d, c.subspace_rank, c.weighting);
    s.source_run_ids = {c.run_id};
    save_subspace(c.out_dir / artifact::subspace, s);

    const auto ks = erank_grid(d.count());
    const auto task_curve = erank_at(d, ks);
    DirectionMatrix random(d.dim());
    Rng stream(derive_seed(c.seed, 14));
    for (std::size_t t = 0; t < d.count(); ++t) random.add(rng_gaussian(stream, d.dim()));
    const auto random_curve = erank_at(random, ks);
    std::string tsv = "k\terank_tasks\terank_random\n";
    for (std::size_t i = 0; i < ks.size(); ++i)
        tsv += std::to_string(ks[i]) + '\t' + format_double(task_curve[i]) + '\t' + format_double(random_curve[i]) + '\n';
    write_file_atomic(c.out_dir / artifact::erank, tsv);
    ctx.log("[subspace] rank " + std::to_string(s.rank()) + ", erank " + format_double(task_curve.back()));
    detail::log_resolved_config(ctx, Stage::subspace);
}

namespace detail {

/// Calls f(factory) with the benchmark's instance factory for a split.
template <class F>
auto with_factory(const RunConfig& c, Split split, F&& f) {
    if (c.benchmark == "sinusoid") {
        const auto b = sinusoid_of(c);
        return f(b.factory(split));
    }
    const auto b = RlcBenchmark::create(c.seed, 0, split == Split::validation ? c.validation_tasks : 0,
                                        split == Split::test ? c.test_tasks : 0);
    return f(b.factory(split));
}

} // namespace detail

inline void stage_tune(const StageContext& ctx) {
    const RunConfig& c = ctx.config;
    const ParamVector theta = detail::load_theta0(c);
    const auto src = detail::load_sources(c);
    json out = {{"run_id", c.run_id}, {"entries", json::array()}};
    detail::with_factory(c, Split::validation, [&](const InstanceFactory& factory) {
        for (std::size_t support : c.support_sizes) {
            for (const auto& m : c.methods) {
                const auto pc = detail::make_preconditioner(c, m, src);
                const auto t0 = std::chrono::steady_clock::now();
                const auto res = tune_hparams(theta, pc, c.validation_tasks, support, 0, factory, c.grid,
                                              c.finetune_optimizer, c.epoch_steps, c.tune_statistic);
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                json cells = json::array();
                for (const auto& cell : res.cells)
                    cells.push_back({{"eta", cell.eta}, {"steps", cell.steps}, {"score", format_double(cell.score)},
                                     {"diverged", cell.diverged}});
                out["entries"].push_back({{"method", m},
                                          {"support_size", support},
                                          {"eta", res.best.eta},
                                          {"steps", res.best.steps},
                                          {"score", res.best_score},
                                          {"cells", cells}});
                char buf[200];
                std::snprintf(buf, sizeof buf, "[tune] %s support %zu: eta %g, %zu steps, score %.4g (%.0fs)", m.c_str(),
                              support, res.best.eta, res.best.steps, res.best_score, secs);
                ctx.log(buf);
            }
        }
        return 0;
    });
    write_json_atomic(c.out_dir / artifact::tune, out);
    detail::log_resolved_config(ctx, Stage::tune);
}

inline void stage_evaluate(const StageContext& ctx) {
    const RunConfig& c = ctx.config;
    const ParamVector theta = detail::load_theta0(c);
    const auto src = detail::load_sources(c);
    const json tuned = read_json(input_path(c, artifact::tune));
    std::map<std::string, FinetuneSpec> specs;
    try {
        for (const auto& e : tuned.at("entries"))
            specs[detail::tune_key(e.at("method").get<std::string>(), e.at("support_size").get<std::size_t>())] =
                FinetuneSpec{c.finetune_optimizer, e.at("eta").get<double>(), e.at("steps").get<std::size_t>(),
                             c.epoch_steps, c.normalized};
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("tune.json: ") + e.what());
    }
    std::vector<EvalRecord> records;
    detail::with_factory(c, Split::test, [&](const InstanceFactory& factory) {
        for (std::size_t support : c.support_sizes) {
            std::vector<MethodSpec> methods;
            for (const auto& m : c.methods) {
                const auto it = specs.find(detail::tune_key(m, support));
                if (it == specs.end())
                    throw ArtifactError("tune.json has no entry for method '" + m + "' at support " +
                                        std::to_string(support) + "; re-run `subgd tune`");
                methods.push_back({m, detail::make_preconditioner(c, m, src), it->second});
            }
            ctx.log("[evaluate] support " + std::to_string(support) + ", " + std::to_string(c.test_tasks) + " test tasks");
            auto recs = evaluate_fewshot(theta, methods, c.test_tasks, {support}, c.eval_seeds, factory, c.benchmark,
                                         c.run_id);
            records.insert(records.end(), recs.begin(), recs.end());
        }
        return 0;
    });
    write_records_csv(c.out_dir / artifact::records, records);
    detail::log_resolved_config(ctx, Stage::evaluate);
}

inline void stage_report(const StageContext& ctx, bool plot_data) {
    const RunConfig& c = ctx.config;
    const auto records = read_records_csv(input_path(c, artifact::records));
    const Report rep = build_report(records, {0.01, c.seed, kBootstrapResamples});
    const fs::path dir = c.out_dir / "report";
    write_file_atomic(dir / "summary.csv", summary_csv(rep));
    write_file_atomic(dir / "comparisons.csv", comparisons_csv(rep));
    write_file_atomic(dir / "summary.md", summary_markdown(rep));
    if (plot_data) {
        const fs::path pd = dir / "plot";
        write_file_atomic(pd / "support_curve.tsv", support_curve_tsv(rep));
        std::size_t full_rank = 0;
        try {
            const fs::path sp = input_path(c, artifact::subspace);
            full_rank = load_subspace(sp).rank();
            const fs::path er = input_path(c, artifact::erank);
            write_file_atomic(pd / "erank_curve.tsv", read_file(er));
        } catch (const ArtifactError&) {
        }
        write_file_atomic(pd / "subspace_ablation.tsv", ablation_tsv(rep, full_rank));
    }
    ctx.log(summary_markdown(rep));
    detail::log_resolved_config(ctx, Stage::report);
}

inline void run_stage(const StageContext& ctx, Stage stage, bool plot_data = false) {
    validate_config(ctx.config);
    fs::create_directories(ctx.config.out_dir);
    switch (stage) {
    case Stage::pretrain: return stage_pretrain(ctx);
    case Stage::collect: return stage_collect(ctx);
    case Stage::subspace: return stage_subspace(ctx);
    case Stage::tune: return stage_tune(ctx);
    case Stage::evaluate: return stage_evaluate(ctx);
    case Stage::report: return stage_report(ctx, plot_data);
    }
}

/// All stages in order.
inline void run_pipeline(const StageContext& ctx) {
    for (const auto& [stage, name] : stage_names()) run_stage(ctx, stage);
}

/// CLI exit status for an error escaping a stage.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const ArtifactError*>(&e) || dynamic_cast<const IoError*>(&e)) return 3;
    if (dynamic_cast<const DivergenceError*>(&e) || dynamic_cast<const DegenerateSubspaceError*>(&e)) return 4;
    return 1;
}

} // namespace subgd
