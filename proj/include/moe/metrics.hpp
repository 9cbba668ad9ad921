// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moe/core.hpp"
#include "moe/grad.hpp"
#include "moe/sim.hpp"

#include "json.hpp"

namespace moe {

inline constexpr int kReportSchemaVersion = 1;

// RoutingConfig plus the instance sizes, echoed into every report so a run
// can be reproduced from its output alone.
struct ReportConfig {
    RoutingConfig routing;
    int n_tokens = 4096;
    int d_model = 64;
    int n_experts = 8;
    int n_gpus = 8;
};

struct GradCheckSummary {
    double margin = 0.0;
    double tolerance = 0.0;
    double std_max_abs_err = 0.0;
    double std_max_rel_err = 0.0;
    double st_max_abs_err = 0.0;
    double st_max_rel_err = 0.0;
    bool pathology_standard_zero = false;
    bool pathology_st_nonzero = false;
    bool passed = false;

    static GradCheckSummary from(const GradCheckReport& rep);
};

struct RunReport {
    int schema_version = kReportSchemaVersion;
    ReportConfig config;
    RoutingStats stats;
    std::optional<GradCheckSummary> gradcheck;
    double routing_seconds = 0.0;
    double tokens_per_second = 0.0;

    bool operator==(const RunReport& other) const;
};

// JSON layout: top-level keys config, stats, optional gradcheck, plus
// schema_version and a timing block. Timing varies run to run, so fixtures
// are compared with include_timing = false.
nlohmann::ordered_json report_to_json(const RunReport& report, bool include_timing = true);
RunReport report_from_json(const nlohmann::json& j);

// Flat two-line CSV of the same report; real values rendered with 17
// significant digits so they parse back bit-exact.
std::string report_to_csv(const RunReport& report, bool include_timing = true);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);
nlohmann::ordered_json sweep_to_json(const std::vector<SweepRow>& rows);

// %.17g rendering used for every real in CSV output.
std::string format_real(double v);

struct BenchParams {
    int n_tokens = 65536;
    int n_experts = 8;
    int k = 2;
    double capacity_factor = 2.0;
    int repetitions = 5;
    std::uint64_t seed = 42;
    bool enable_ir = false;
    bool enable_fr = false;
    int n_gpus = 8;
};

// Times the routing phase (assignment plus any enabled rectifiers) over
// pre-built inputs and reports the median of the repetitions. Data
// generation happens before the timed region.
RunReport bench_routing(const BenchParams& params);

struct ReportDelta {
    std::string field;
    double a = 0.0;
    double b = 0.0;
    double delta = 0.0;  // b - a
    double ratio = 0.0;  // b / a, NaN when a == 0
};

// Field-wise numeric comparison of two reports. Throws on schema mismatch.
std::vector<ReportDelta> diff_reports(const RunReport& a, const RunReport& b);

}  // namespace moe
