// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moe/metrics.hpp"

namespace moe::cli {

// Default CF grid for sweeps.
extern const std::vector<double> kDefaultCfGrid;

// Gradcheck thresholds, fixed rather than flag-tunable.
inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckMarginDelta = 1e-4;
inline constexpr double kGradcheckTolerance = 1e-6;
inline constexpr int kGradcheckMaxReseeds = 8;

struct CliOptions {
    RoutingConfig routing;
    bool cf_given = false;  // when false, cf defaults to k
    bool no_aux = false;
    int n_tokens = 4096;
    int d_model = 64;
    int n_experts = 8;
    int n_gpus = 8;
    int experts_per_gpu = 0;  // 0 = unset; otherwise overrides n_gpus
    std::vector<double> cf_grid;
    std::string output;  // empty writes the report to stdout
    std::string format = "json";
    int repetitions = 5;
};

// Applies defaults (cf = k, experts-per-gpu -> n_gpus, --no-aux) and
// validates the combination; throws std::invalid_argument on bad flags.
void resolve(CliOptions& opts);

// Pure builders, shared by the CLI and the test suites.
RunReport build_route_report(const CliOptions& opts);
RunReport build_sim_report(const CliOptions& opts);
std::vector<SweepRow> build_sweep_rows(const CliOptions& opts);

// Gradcheck with up to kGradcheckMaxReseeds reseed attempts on margin
// failure; reports the instance actually checked. Full per-coordinate
// gradients go into the JSON under the gradcheck key.
struct GradcheckOutcome {
    RunReport report;
    nlohmann::ordered_json full_json;
    bool margin_exhausted = false;
    std::string diagnostic;
};
GradcheckOutcome build_gradcheck(const CliOptions& opts);

// Canonical fixture payload: the report without its timing block, pretty
// JSON, trailing newline.
std::string canonical_payload(const RunReport& report);

// Command entry points. Return process exit codes (0 ok, 2 validation
// error, 3 tolerance failure).
int run_route(CliOptions opts);
int run_sweep_cf(CliOptions opts);
int run_gradcheck(CliOptions opts);
int run_sim(CliOptions opts);
int run_bench(CliOptions opts);

}  // namespace moe::cli
