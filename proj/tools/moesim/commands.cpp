// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "moe/rng.hpp"

namespace moe::cli {

const std::vector<double> kDefaultCfGrid = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0};

void resolve(CliOptions& opts) {
    if (!opts.cf_given) opts.routing.capacity_factor = static_cast<double>(opts.routing.k);
    if (opts.no_aux) opts.routing.aux_loss_weight = 0.0;
    if (opts.experts_per_gpu > 0) {
        if (opts.n_experts % opts.experts_per_gpu != 0) {
            throw std::invalid_argument("--experts-per-gpu must divide --n-experts");
        }
        opts.n_gpus = opts.n_experts / opts.experts_per_gpu;
    }
    if (opts.format != "json" && opts.format != "csv") {
        throw std::invalid_argument("--format must be json or csv");
    }
    if (opts.n_tokens < 1 || opts.d_model < 1 || opts.n_gpus < 1) {
        throw std::invalid_argument("sizes must be >= 1");
    }
    if (opts.n_experts % opts.n_gpus != 0) {
        throw std::invalid_argument("--n-experts must be divisible by --n-gpus");
    }
    opts.routing.validate(opts.n_experts);
    if (opts.cf_grid.empty()) opts.cf_grid = kDefaultCfGrid;
    for (double cf : opts.cf_grid) {
        if (!(cf > 0.0)) throw std::invalid_argument("--cf-grid entries must be > 0");
    }
}

namespace {

struct Instance {
    TokenBatch batch;
    ScoreMatrix scores;
    GpuTopology topo;
    int capacity = 0;
};

Instance make_instance(const CliOptions& opts) {
    Instance inst;
    inst.batch = TokenBatch{
        gaussian_matrix(opts.n_tokens, opts.d_model, Rng::derive(opts.routing.seed, 0x01))};
    const RouterWeights router{
        gaussian_matrix(opts.n_experts, opts.d_model, Rng::derive(opts.routing.seed, 0x02))};
    inst.scores = compute_scores(inst.batch, router);
    inst.topo = build_topology(opts.n_gpus, opts.n_experts, opts.n_tokens, opts.routing.seed);
    inst.capacity = compute_capacity(opts.routing.capacity_factor, opts.n_tokens, opts.n_experts);
    return inst;
}

struct RoutedInstance {
    RoutingPlan plan;
    RectifyPlan rect;
    FillPlan fill;
    double seconds = 0.0;
};

RoutedInstance route_instance(const Instance& inst, const CliOptions& opts) {
    using Clock = std::chrono::steady_clock;
    RoutedInstance routed;
    const auto start = Clock::now();
    routed.plan = topk_assign(inst.scores, opts.routing.k, inst.capacity);
    if (opts.routing.enable_ir) {
        routed.rect = intra_gpu_rectify(routed.plan, inst.scores, inst.topo);
    }
    if (opts.routing.enable_fr) {
        routed.fill = fill_in_rectify(inst.scores, routed.plan, inst.capacity);
    }
    const auto stop = Clock::now();
    routed.seconds = std::chrono::duration<double>(stop - start).count();
    return routed;
}

RunReport finish_report(const CliOptions& opts, const Instance& inst,
                        const RoutedInstance& routed, const RoutingStats& stats) {
    RunReport report;
    report.config.routing = opts.routing;
    report.config.n_tokens = opts.n_tokens;
    report.config.d_model = opts.d_model;
    report.config.n_experts = opts.n_experts;
    report.config.n_gpus = opts.n_gpus;
    report.stats = stats;
    report.routing_seconds = routed.seconds;
    report.tokens_per_second = static_cast<double>(opts.n_tokens) / routed.seconds;
    (void)inst;
    return report;
}

void emit(const std::string& content, const std::string& path) {
    if (path.empty()) {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    out << content;
}

std::string render_report(const RunReport& report, const std::string& format) {
    if (format == "csv") return report_to_csv(report);
    return report_to_json(report).dump(2) + "\n";
}

void print_summary(const RoutingStats& s) {
    std::fprintf(stderr,
                 "drops=%lld padding=%lld fills=%lld inter_gpu=%lld intra_gpu=%lld "
                 "duplicates=%lld aux_loss=%.6f\n",
                 s.drops, s.padding, s.fills, s.inter_gpu_transfers, s.intra_gpu_transfers,
                 s.duplicate_pairs, s.aux_loss);
}

}  // namespace

RunReport build_route_report(const CliOptions& opts) {
    const Instance inst = make_instance(opts);
    const RoutedInstance routed = route_instance(inst, opts);
    const RoutingStats stats =
        collect_stats(routed.plan, opts.routing.enable_ir ? &routed.rect : nullptr,
                      opts.routing.enable_fr ? &routed.fill : nullptr, inst.scores, inst.topo);
    return finish_report(opts, inst, routed, stats);
}

RunReport build_sim_report(const CliOptions& opts) {
    const Instance inst = make_instance(opts);
    const RoutedInstance routed = route_instance(inst, opts);
    const std::vector<ReferenceExpert> experts =
        make_reference_experts(opts.n_experts, opts.d_model, Rng::derive(opts.routing.seed, 0x03));
    const ExecutionResult result =
        execute(inst.batch, routed.plan, opts.routing.enable_ir ? &routed.rect : nullptr,
                opts.routing.enable_fr ? &routed.fill : nullptr, experts, inst.topo, inst.scores);
    return finish_report(opts, inst, routed, result.stats);
}

std::vector<SweepRow> build_sweep_rows(const CliOptions& opts) {
    const Instance inst = make_instance(opts);
    return sweep_capacity_factor(inst.scores, opts.routing.k, opts.cf_grid, inst.topo);
}

GradcheckOutcome build_gradcheck(const CliOptions& opts) {
    GradcheckOutcome outcome;
    GradCheckReport check;
    bool found = false;
    std::uint64_t used_seed = opts.routing.seed;
    for (int attempt = 0; attempt < kGradcheckMaxReseeds; ++attempt) {
        used_seed = opts.routing.seed + static_cast<std::uint64_t>(attempt);
        try {
            check = moe::run_gradcheck(opts.n_tokens, opts.n_experts, opts.d_model,
                                       opts.routing.k, used_seed, kGradcheckStep,
                                       kGradcheckMarginDelta, kGradcheckTolerance);
            found = true;
            break;
        } catch (const MarginViolation& e) {
            outcome.diagnostic = e.what();
        }
    }
    if (!found) {
        outcome.margin_exhausted = true;
        outcome.diagnostic = "routing margin below " + format_real(kGradcheckMarginDelta) +
                             " after " + std::to_string(kGradcheckMaxReseeds) +
                             " reseeds; last: " + outcome.diagnostic;
        return outcome;
    }

    // Reproduce the checked instance for the stats block of the report.
    CliOptions used = opts;
    used.routing.seed = used_seed;
    const Instance inst = make_instance(used);
    const RoutedInstance routed = route_instance(inst, used);
    const RoutingStats stats =
        collect_stats(routed.plan, nullptr, nullptr, inst.scores, inst.topo);
    outcome.report = finish_report(used, inst, routed, stats);
    outcome.report.gradcheck = GradCheckSummary::from(check);

    nlohmann::ordered_json j = report_to_json(outcome.report);
    const auto matrix_rows = [](const Matrix& m) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (int r = 0; r < m.rows; ++r) {
            rows.push_back(std::vector<double>(m.row(r), m.row(r) + m.cols));
        }
        return rows;
    };
    j["gradcheck"]["analytic_standard"] = matrix_rows(check.analytic_standard);
    j["gradcheck"]["numeric_standard"] = matrix_rows(check.numeric_standard);
    j["gradcheck"]["analytic_st"] = matrix_rows(check.analytic_st);
    j["gradcheck"]["numeric_st"] = matrix_rows(check.numeric_st);
    outcome.full_json = j;
    return outcome;
}

std::string canonical_payload(const RunReport& report) {
    return report_to_json(report, false).dump(2) + "\n";
}

int run_route(CliOptions opts) {
    resolve(opts);
    const RunReport report = build_route_report(opts);
    emit(render_report(report, opts.format), opts.output);
    print_summary(report.stats);
    return 0;
}

int run_sim(CliOptions opts) {
    resolve(opts);
    const RunReport report = build_sim_report(opts);
    emit(render_report(report, opts.format), opts.output);
    print_summary(report.stats);
    return 0;
}

int run_sweep_cf(CliOptions opts) {
    resolve(opts);
    const std::vector<SweepRow> rows = build_sweep_rows(opts);
    if (opts.format == "csv") {
        emit(sweep_to_csv(rows), opts.output);
    } else {
        emit(sweep_to_json(rows).dump(2) + "\n", opts.output);
    }
    std::fprintf(stderr, "%zu sweep rows (%zu capacity factors x %zu variants)\n", rows.size(),
                 opts.cf_grid.size(), kSweepVariants.size());
    return 0;
}

int run_gradcheck(CliOptions opts) {
    resolve(opts);
    if (opts.format == "csv") {
        throw std::invalid_argument("gradcheck reports are JSON only");
    }
    const GradcheckOutcome outcome = build_gradcheck(opts);
    if (outcome.margin_exhausted) {
        std::fprintf(stderr, "gradcheck: %s\n", outcome.diagnostic.c_str());
        return 2;
    }
    emit(outcome.full_json.dump(2) + "\n", opts.output);
    const GradCheckSummary& g = *outcome.report.gradcheck;
    std::fprintf(stderr,
                 "gradcheck %s: margin=%.3g std_rel=%.3g st_rel=%.3g pathology(zero=%d, "
                 "st_nonzero=%d)\n",
                 g.passed ? "passed" : "FAILED", g.margin, g.std_max_rel_err, g.st_max_rel_err,
                 g.pathology_standard_zero ? 1 : 0, g.pathology_st_nonzero ? 1 : 0);
    return g.passed ? 0 : 3;
}

int run_bench(CliOptions opts) {
    resolve(opts);
    BenchParams params;
    params.n_tokens = opts.n_tokens;
    params.n_experts = opts.n_experts;
    params.k = opts.routing.k;
    params.capacity_factor = opts.routing.capacity_factor;
    params.repetitions = opts.repetitions;
    params.seed = opts.routing.seed;
    params.enable_ir = opts.routing.enable_ir;
    params.enable_fr = opts.routing.enable_fr;
    params.n_gpus = opts.n_gpus;
    const RunReport report = bench_routing(params);
    emit(render_report(report, opts.format), opts.output);
    std::fprintf(stderr, "bench: median %.6f s, %.0f tokens/s\n", report.routing_seconds,
                 report.tokens_per_second);
    return 0;
}

}  // namespace moe::cli
