// SPDX-License-Identifier: Apache-2.0
//
// moesim: deterministic capacity-constrained top-k MoE routing with
// Intra-GPU and Fill-in Rectification, on a simulated expert-parallel
// cluster. Subcommands emit machine-readable reports; see README.md.

#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

void add_common_flags(CLI::App* cmd, moe::cli::CliOptions& opts) {
    cmd->add_option("--k", opts.routing.k, "Routes per token")->check(CLI::PositiveNumber);
    cmd->add_option("--cf", opts.routing.capacity_factor, "Capacity factor (defaults to k)")
        ->check(CLI::PositiveNumber);
    cmd->add_flag("--ir", opts.routing.enable_ir, "Enable Intra-GPU Rectification");
    cmd->add_flag("--fr", opts.routing.enable_fr, "Enable Fill-in Rectification");
    cmd->add_flag("--st", opts.routing.straight_through,
                  "Straight-through backward for the combination weights");
    cmd->add_option("--aux-weight", opts.routing.aux_loss_weight,
                    "Load-balance loss weight (reporting only)");
    cmd->add_flag("--no-aux", opts.no_aux, "Report the balance loss with weight 0");
    cmd->add_option("--seed", opts.routing.seed, "Master seed");
    cmd->add_option("--n-tokens", opts.n_tokens, "Tokens per batch");
    cmd->add_option("--d-model", opts.d_model, "Hidden size");
    cmd->add_option("--n-experts", opts.n_experts, "Experts per layer");
    cmd->add_option("--output,-o", opts.output, "Report path (default: stdout)");
    cmd->add_option("--format", opts.format, "Report format: json or csv");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Capacity-constrained top-k MoE routing simulator with Rectify-Routers"};
    app.require_subcommand(1);

    moe::cli::CliOptions opts;

    CLI::App* route = app.add_subcommand("route", "Route one synthetic batch, write a report");
    add_common_flags(route, opts);
    route->add_option("--n-gpus", opts.n_gpus, "Simulated GPU count");

    CLI::App* sweep = app.add_subcommand("sweep-cf", "Stats per capacity factor and variant");
    add_common_flags(sweep, opts);
    sweep->add_option("--n-gpus", opts.n_gpus, "Simulated GPU count");
    sweep->add_option("--cf-grid", opts.cf_grid, "Capacity factors to sweep");

    CLI::App* sim = app.add_subcommand("sim", "Full simulated execution with reference experts");
    add_common_flags(sim, opts);
    CLI::Option* sim_gpus = sim->add_option("--n-gpus", opts.n_gpus, "Simulated GPU count");
    sim->add_option("--experts-per-gpu", opts.experts_per_gpu, "Experts hosted per GPU")
        ->check(CLI::PositiveNumber)
        ->excludes(sim_gpus);

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "Finite-difference check of the combination backward");
    add_common_flags(gradcheck, opts);
    gradcheck->add_option("--n-gpus", opts.n_gpus, "Simulated GPU count");

    CLI::App* bench = app.add_subcommand("bench", "Time the routing phase on seeded data");
    add_common_flags(bench, opts);
    bench->add_option("--n-gpus", opts.n_gpus, "Simulated GPU count");
    bench->add_option("--reps", opts.repetitions, "Timing repetitions (median is reported)")
        ->check(CLI::Range(3, 1000));

    // gradcheck works on a small instance by default; 4096x64 would make the
    // finite-difference sweep pointlessly slow.
    gradcheck->parse_complete_callback([&]() {
        if (gradcheck->count("--n-tokens") == 0) opts.n_tokens = 32;
        if (gradcheck->count("--d-model") == 0) opts.d_model = 16;
        if (gradcheck->count("--n-gpus") == 0) opts.n_gpus = 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    for (CLI::App* cmd : {route, sweep, sim, gradcheck, bench}) {
        if (cmd->parsed()) opts.cf_given = cmd->count("--cf") > 0;
    }

    try {
        if (route->parsed()) return moe::cli::run_route(opts);
        if (sweep->parsed()) return moe::cli::run_sweep_cf(opts);
        if (sim->parsed()) return moe::cli::run_sim(opts);
        if (gradcheck->parsed()) return moe::cli::run_gradcheck(opts);
        if (bench->parsed()) return moe::cli::run_bench(opts);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
