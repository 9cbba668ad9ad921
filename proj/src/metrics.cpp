// SPDX-License-Identifier: Apache-2.0
#include "moe/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>

#include "moe/rng.hpp"

namespace moe {

using nlohmann::json;
using nlohmann::ordered_json;

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

GradCheckSummary GradCheckSummary::from(const GradCheckReport& rep) {
    GradCheckSummary s;
    s.margin = rep.margin;
    s.tolerance = rep.tolerance;
    s.std_max_abs_err = rep.std_max_abs_err;
    s.std_max_rel_err = rep.std_max_rel_err;
    s.st_max_abs_err = rep.st_max_abs_err;
    s.st_max_rel_err = rep.st_max_rel_err;
    s.pathology_standard_zero = rep.pathology_standard_zero;
    s.pathology_st_nonzero = rep.pathology_st_nonzero;
    s.passed = rep.passed;
    return s;
}

bool RunReport::operator==(const RunReport& other) const {
    auto summary_eq = [](const GradCheckSummary& a, const GradCheckSummary& b) {
        return a.margin == b.margin && a.tolerance == b.tolerance &&
               a.std_max_abs_err == b.std_max_abs_err && a.std_max_rel_err == b.std_max_rel_err &&
               a.st_max_abs_err == b.st_max_abs_err && a.st_max_rel_err == b.st_max_rel_err &&
               a.pathology_standard_zero == b.pathology_standard_zero &&
               a.pathology_st_nonzero == b.pathology_st_nonzero && a.passed == b.passed;
    };
    if (schema_version != other.schema_version) return false;
    const RoutingConfig& r = config.routing;
    const RoutingConfig& o = other.config.routing;
    if (r.k != o.k || r.capacity_factor != o.capacity_factor || r.enable_ir != o.enable_ir ||
        r.enable_fr != o.enable_fr || r.straight_through != o.straight_through ||
        r.aux_loss_weight != o.aux_loss_weight || r.seed != o.seed) {
        return false;
    }
    if (config.n_tokens != other.config.n_tokens || config.d_model != other.config.d_model ||
        config.n_experts != other.config.n_experts || config.n_gpus != other.config.n_gpus) {
        return false;
    }
    if (stats.drops != other.stats.drops || stats.padding != other.stats.padding ||
        stats.fills != other.stats.fills ||
        stats.inter_gpu_transfers != other.stats.inter_gpu_transfers ||
        stats.intra_gpu_transfers != other.stats.intra_gpu_transfers ||
        stats.duplicate_pairs != other.stats.duplicate_pairs ||
        stats.per_expert_load != other.stats.per_expert_load ||
        stats.extra_compute_ratio != other.stats.extra_compute_ratio ||
        stats.aux_loss != other.stats.aux_loss) {
        return false;
    }
    if (gradcheck.has_value() != other.gradcheck.has_value()) return false;
    if (gradcheck && !summary_eq(*gradcheck, *other.gradcheck)) return false;
    return routing_seconds == other.routing_seconds &&
           tokens_per_second == other.tokens_per_second;
}

namespace {

ordered_json config_to_json(const ReportConfig& c) {
    ordered_json j;
    j["k"] = c.routing.k;
    j["capacity_factor"] = c.routing.capacity_factor;
    j["enable_ir"] = c.routing.enable_ir;
    j["enable_fr"] = c.routing.enable_fr;
    j["straight_through"] = c.routing.straight_through;
    j["aux_loss_weight"] = c.routing.aux_loss_weight;
    j["seed"] = c.routing.seed;
    j["n_tokens"] = c.n_tokens;
    j["d_model"] = c.d_model;
    j["n_experts"] = c.n_experts;
    j["n_gpus"] = c.n_gpus;
    return j;
}

ordered_json stats_to_json(const RoutingStats& s) {
    ordered_json j;
    j["drops"] = s.drops;
    j["padding"] = s.padding;
    j["fills"] = s.fills;
    j["inter_gpu_transfers"] = s.inter_gpu_transfers;
    j["intra_gpu_transfers"] = s.intra_gpu_transfers;
    j["duplicate_pairs"] = s.duplicate_pairs;
    j["extra_compute_ratio"] = s.extra_compute_ratio;
    j["aux_loss"] = s.aux_loss;
    j["per_expert_load"] = s.per_expert_load;
    return j;
}

ordered_json gradcheck_to_json(const GradCheckSummary& g) {
    ordered_json j;
    j["margin"] = g.margin;
    j["tolerance"] = g.tolerance;
    j["std_max_abs_err"] = g.std_max_abs_err;
    j["std_max_rel_err"] = g.std_max_rel_err;
    j["st_max_abs_err"] = g.st_max_abs_err;
    j["st_max_rel_err"] = g.st_max_rel_err;
    j["pathology_standard_zero"] = g.pathology_standard_zero;
    j["pathology_st_nonzero"] = g.pathology_st_nonzero;
    j["passed"] = g.passed;
    return j;
}

}  // namespace

ordered_json report_to_json(const RunReport& report, bool include_timing) {
    ordered_json j;
    j["schema_version"] = report.schema_version;
    j["config"] = config_to_json(report.config);
    j["stats"] = stats_to_json(report.stats);
    if (report.gradcheck) j["gradcheck"] = gradcheck_to_json(*report.gradcheck);
    if (include_timing) {
        ordered_json t;
        t["routing_seconds"] = report.routing_seconds;
        t["tokens_per_second"] = report.tokens_per_second;
        j["timing"] = t;
    }
    return j;
}

RunReport report_from_json(const json& j) {
    RunReport r;
    r.schema_version = j.at("schema_version").get<int>();
    const json& c = j.at("config");
    r.config.routing.k = c.at("k").get<int>();
    r.config.routing.capacity_factor = c.at("capacity_factor").get<double>();
    r.config.routing.enable_ir = c.at("enable_ir").get<bool>();
    r.config.routing.enable_fr = c.at("enable_fr").get<bool>();
    r.config.routing.straight_through = c.at("straight_through").get<bool>();
    r.config.routing.aux_loss_weight = c.at("aux_loss_weight").get<double>();
    r.config.routing.seed = c.at("seed").get<std::uint64_t>();
    r.config.n_tokens = c.at("n_tokens").get<int>();
    r.config.d_model = c.at("d_model").get<int>();
    r.config.n_experts = c.at("n_experts").get<int>();
    r.config.n_gpus = c.at("n_gpus").get<int>();
    const json& s = j.at("stats");
    r.stats.drops = s.at("drops").get<long long>();
    r.stats.padding = s.at("padding").get<long long>();
    r.stats.fills = s.at("fills").get<long long>();
    r.stats.inter_gpu_transfers = s.at("inter_gpu_transfers").get<long long>();
    r.stats.intra_gpu_transfers = s.at("intra_gpu_transfers").get<long long>();
    r.stats.duplicate_pairs = s.at("duplicate_pairs").get<long long>();
    r.stats.extra_compute_ratio = s.at("extra_compute_ratio").get<double>();
    r.stats.aux_loss = s.at("aux_loss").get<double>();
    r.stats.per_expert_load = s.at("per_expert_load").get<std::vector<long long>>();
    if (j.contains("gradcheck")) {
        const json& g = j.at("gradcheck");
        GradCheckSummary gs;
        gs.margin = g.at("margin").get<double>();
        gs.tolerance = g.at("tolerance").get<double>();
        gs.std_max_abs_err = g.at("std_max_abs_err").get<double>();
        gs.std_max_rel_err = g.at("std_max_rel_err").get<double>();
        gs.st_max_abs_err = g.at("st_max_abs_err").get<double>();
        gs.st_max_rel_err = g.at("st_max_rel_err").get<double>();
        gs.pathology_standard_zero = g.at("pathology_standard_zero").get<bool>();
        gs.pathology_st_nonzero = g.at("pathology_st_nonzero").get<bool>();
        gs.passed = g.at("passed").get<bool>();
        r.gradcheck = gs;
    }
    if (j.contains("timing")) {
        r.routing_seconds = j.at("timing").at("routing_seconds").get<double>();
        r.tokens_per_second = j.at("timing").at("tokens_per_second").get<double>();
    }
    return r;
}

std::string report_to_csv(const RunReport& report, bool include_timing) {
    const ordered_json j = report_to_json(report, include_timing);
    std::string header;
    std::string row;
    const auto append = [&](const std::string& name, const std::string& value) {
        if (!header.empty()) {
            header += ',';
            row += ',';
        }
        header += name;
        row += value;
    };
    const std::function<void(const std::string&, const ordered_json&)> walk =
        [&](const std::string& prefix, const ordered_json& node) {
            for (const auto& [key, value] : node.items()) {
                const std::string name = prefix.empty() ? key : prefix + "." + key;
                if (value.is_object()) {
                    walk(name, value);
                } else if (value.is_array()) {
                    std::string joined;
                    for (const auto& item : value) {
                        if (!joined.empty()) joined += ';';
                        joined += item.is_number_float() ? format_real(item.get<double>())
                                                         : item.dump();
                    }
                    append(name, joined);
                } else if (value.is_number_float()) {
                    append(name, format_real(value.get<double>()));
                } else {
                    append(name, value.dump());
                }
            }
        };
    walk("", j);
    return header + "\n" + row + "\n";
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::string out = "cf,variant,drops,padding,fills,inter_transfers,extra_compute_ratio,aux_loss\n";
    for (const SweepRow& r : rows) {
        out += format_real(r.cf);
        out += ',' + r.variant;
        out += ',' + std::to_string(r.stats.drops);
        out += ',' + std::to_string(r.stats.padding);
        out += ',' + std::to_string(r.stats.fills);
        out += ',' + std::to_string(r.stats.inter_gpu_transfers);
        out += ',' + format_real(r.stats.extra_compute_ratio);
        out += ',' + format_real(r.stats.aux_loss);
        out += '\n';
    }
    return out;
}

ordered_json sweep_to_json(const std::vector<SweepRow>& rows) {
    ordered_json arr = ordered_json::array();
    for (const SweepRow& r : rows) {
        ordered_json j;
        j["cf"] = r.cf;
        j["variant"] = r.variant;
        j["drops"] = r.stats.drops;
        j["padding"] = r.stats.padding;
        j["fills"] = r.stats.fills;
        j["inter_transfers"] = r.stats.inter_gpu_transfers;
        j["extra_compute_ratio"] = r.stats.extra_compute_ratio;
        j["aux_loss"] = r.stats.aux_loss;
        arr.push_back(j);
    }
    return arr;
}

RunReport bench_routing(const BenchParams& params) {
    if (params.repetitions < 3) {
        throw std::invalid_argument("bench_routing: repetitions must be >= 3");
    }
    // Inputs are built before the timed region; the timer sees assignment
    // and rectification only.
    const ScoreMatrix scores{
        gaussian_matrix(params.n_tokens, params.n_experts, Rng::derive(params.seed, 0x5c0))};
    const GpuTopology topo =
        build_topology(params.n_gpus, params.n_experts, params.n_tokens, params.seed);
    const int capacity =
        compute_capacity(params.capacity_factor, params.n_tokens, params.n_experts);

    using Clock = std::chrono::steady_clock;
    std::vector<double> seconds;
    seconds.reserve(params.repetitions);
    RoutingPlan plan;
    RectifyPlan rect;
    FillPlan fill;
    for (int rep = 0; rep < params.repetitions; ++rep) {
        const auto start = Clock::now();
        plan = topk_assign(scores, params.k, capacity);
        if (params.enable_ir) rect = intra_gpu_rectify(plan, scores, topo);
        if (params.enable_fr) fill = fill_in_rectify(scores, plan, capacity);
        const auto stop = Clock::now();
        seconds.push_back(std::chrono::duration<double>(stop - start).count());
    }
    std::sort(seconds.begin(), seconds.end());
    const std::size_t mid = seconds.size() / 2;
    const double median = seconds.size() % 2 == 1
                              ? seconds[mid]
                              : 0.5 * (seconds[mid - 1] + seconds[mid]);

    RunReport report;
    report.config.routing.k = params.k;
    report.config.routing.capacity_factor = params.capacity_factor;
    report.config.routing.enable_ir = params.enable_ir;
    report.config.routing.enable_fr = params.enable_fr;
    report.config.routing.seed = params.seed;
    report.config.n_tokens = params.n_tokens;
    report.config.n_experts = params.n_experts;
    report.config.n_gpus = params.n_gpus;
    report.stats = collect_stats(plan, params.enable_ir ? &rect : nullptr,
                                 params.enable_fr ? &fill : nullptr, scores, topo);
    report.routing_seconds = median;
    report.tokens_per_second = params.n_tokens / median;
    return report;
}

std::vector<ReportDelta> diff_reports(const RunReport& a, const RunReport& b) {
    if (a.schema_version != b.schema_version) {
        throw std::invalid_argument("diff_reports: schema version mismatch");
    }
    const json fa = json(report_to_json(a, true)).flatten();
    const json fb = json(report_to_json(b, true)).flatten();
    std::vector<ReportDelta> deltas;
    for (const auto& [key, va] : fa.items()) {
        if (!fb.contains(key)) {
            throw std::invalid_argument("diff_reports: field " + key + " missing from b");
        }
        const json& vb = fb.at(key);
        double x;
        double y;
        if (va.is_number()) {
            x = va.get<double>();
            y = vb.get<double>();
        } else if (va.is_boolean()) {
            x = va.get<bool>() ? 1.0 : 0.0;
            y = vb.get<bool>() ? 1.0 : 0.0;
        } else {
            continue;
        }
        ReportDelta d;
        d.field = key;
        d.a = x;
        d.b = y;
        d.delta = y - x;
        d.ratio = x != 0.0 ? y / x : std::numeric_limits<double>::quiet_NaN();
        deltas.push_back(d);
    }
    return deltas;
}

}  // namespace moe
