// subgd <stage> --config path [--seed N] [--paper-scale] [--out dir]

#include <iostream>

#include <CLI11.hpp>

#include "subgd/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Few-shot fine-tuning in a subspace learned from training-task updates"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool paper_scale = false;
    std::string out_dir;
    bool plot_data = false;

    for (const auto& [stage, name] : subgd::stage_names()) {
        auto* sub = app.add_subcommand(name, "run the " + name + " stage");
        sub->add_option("--config", config_path, "run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "override the configured seed");
        sub->add_flag("--paper-scale", paper_scale, "full-size iteration and task counts");
        sub->add_option("--out", out_dir, "override the output directory");
        if (stage == subgd::Stage::report) sub->add_flag("--plot-data", plot_data, "also write per-figure TSV series");
    }
    auto* all = app.add_subcommand("all", "run every stage in order");
    all->add_option("--config", config_path, "run configuration (JSON)")->required();
    all->add_option("--seed", seed, "override the configured seed");
    all->add_flag("--paper-scale", paper_scale, "full-size iteration and task counts");
    all->add_option("--out", out_dir, "override the output directory");
    all->add_flag("--plot-data", plot_data, "also write per-figure TSV series");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        subgd::StageContext ctx{subgd::load_config(config_path), subgd::stderr_logger()};
        if (seed) ctx.config.seed = *seed;
        if (!out_dir.empty()) ctx.config.out_dir = out_dir;
        if (paper_scale) subgd::apply_paper_scale(ctx.config);

        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "all") {
            for (const auto& [stage, n] : subgd::stage_names())
                subgd::run_stage(ctx, stage, stage == subgd::Stage::report && plot_data);
        } else {
            subgd::run_stage(ctx, subgd::parse_stage(name), plot_data);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return subgd::exit_code_for(e);
    }
    return 0;
}
