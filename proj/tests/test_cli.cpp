// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "commands.hpp"

using namespace moe;
using namespace moe::cli;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "cannot open " << path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fixture_path(const std::string& name) {
    return std::string(MOESIM_FIXTURE_DIR) + "/" + name;
}

CliOptions default_opts() {
    CliOptions opts;
    resolve(opts);
    return opts;
}

}  // namespace

TEST_CASE("defaults resolve to the documented configuration") {
    const CliOptions opts = default_opts();
    CHECK(opts.routing.k == 1);
    CHECK(opts.routing.capacity_factor == 1.0);
    CHECK(opts.routing.aux_loss_weight == 0.01);
    CHECK(opts.routing.seed == 42);
    CHECK(opts.n_tokens == 4096);
    CHECK(opts.d_model == 64);
    CHECK(opts.n_experts == 8);
    CHECK(opts.n_gpus == 8);
    CHECK(opts.cf_grid == kDefaultCfGrid);
}

TEST_CASE("cf defaults to k unless given") {
    CliOptions opts;
    opts.routing.k = 2;
    resolve(opts);
    CHECK(opts.routing.capacity_factor == 2.0);

    CliOptions given;
    given.routing.k = 2;
    given.routing.capacity_factor = 0.5;
    given.cf_given = true;
    resolve(given);
    CHECK(given.routing.capacity_factor == 0.5);
}

TEST_CASE("invalid flag combinations are rejected") {
    CliOptions fr_k_full;
    fr_k_full.routing.k = 8;
    fr_k_full.routing.enable_fr = true;
    CHECK_THROWS_AS(resolve(fr_k_full), std::invalid_argument);

    CliOptions bad_gpus;
    bad_gpus.n_gpus = 3;  // 8 experts not divisible
    CHECK_THROWS_AS(resolve(bad_gpus), std::invalid_argument);

    CliOptions bad_format;
    bad_format.format = "xml";
    CHECK_THROWS_AS(resolve(bad_format), std::invalid_argument);

    CliOptions bad_epg;
    bad_epg.experts_per_gpu = 3;
    CHECK_THROWS_AS(resolve(bad_epg), std::invalid_argument);
}

TEST_CASE("route with cf = k reports equal drops and padding") {
    CliOptions opts;
    opts.routing.k = 1;
    opts.routing.enable_ir = true;
    opts.routing.enable_fr = true;
    opts.routing.capacity_factor = 1.0;
    opts.cf_given = true;
    resolve(opts);
    const RunReport report = build_route_report(opts);
    CHECK(report.stats.drops == report.stats.padding);
    CHECK(report.stats.fills > 0);
}

TEST_CASE("route on a single GPU has no inter-GPU traffic") {
    CliOptions opts;
    opts.routing.k = 2;
    opts.routing.enable_ir = true;
    opts.n_gpus = 1;
    resolve(opts);
    const RunReport report = build_route_report(opts);
    CHECK(report.stats.inter_gpu_transfers == 0);
}

TEST_CASE("experts-per-gpu controls the topology") {
    CliOptions one;
    one.experts_per_gpu = 1;
    one.routing.enable_ir = true;
    resolve(one);
    CHECK(one.n_gpus == 8);
    CliOptions four;
    four.experts_per_gpu = 4;
    four.routing.enable_ir = true;
    resolve(four);
    CHECK(four.n_gpus == 2);

    // Same seed: identical base plan, different rescue targets show up as
    // different transfer splits and duplicate counts.
    const RunReport a = build_sim_report(one);
    const RunReport b = build_sim_report(four);
    CHECK(a.stats.drops == b.stats.drops);
    CHECK(a.stats.padding == b.stats.padding);
    CHECK(a.stats.inter_gpu_transfers != b.stats.inter_gpu_transfers);
}

TEST_CASE("--no-aux zeroes the weight but still reports the loss") {
    CliOptions opts;
    opts.no_aux = true;
    resolve(opts);
    CHECK(opts.routing.aux_loss_weight == 0.0);
    const RunReport report = build_route_report(opts);
    CHECK(report.config.routing.aux_loss_weight == 0.0);
    CHECK(report.stats.aux_loss > 0.0);
}

TEST_CASE("default route payload matches the golden fixture byte for byte") {
    const CliOptions opts = default_opts();
    const RunReport first = build_route_report(opts);
    const RunReport second = build_route_report(opts);
    CHECK(canonical_payload(first) == canonical_payload(second));
    CHECK(canonical_payload(first) == read_file(fixture_path("route_default.json")));
}

TEST_CASE("default sim payload matches the golden fixture byte for byte") {
    const CliOptions opts = default_opts();
    const RunReport report = build_sim_report(opts);
    CHECK(canonical_payload(report) == read_file(fixture_path("sim_default.json")));
}

TEST_CASE("default sweep CSV matches the golden fixture byte for byte") {
    const CliOptions opts = default_opts();
    const std::string csv = sweep_to_csv(build_sweep_rows(opts));
    CHECK(csv == read_file(fixture_path("sweep_default.csv")));
    CHECK(csv.substr(0, csv.find('\n')) ==
          "cf,variant,drops,padding,fills,inter_transfers,extra_compute_ratio,aux_loss");
}

TEST_CASE("sweep JSON and CSV encode identical values") {
    CliOptions opts;
    opts.cf_grid = {0.5, 1.0};
    resolve(opts);
    const auto rows = build_sweep_rows(opts);
    const auto j = sweep_to_json(rows);
    REQUIRE(j.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(j[i].at("drops").get<long long>() == rows[i].stats.drops);
        CHECK(j[i].at("aux_loss").get<double>() == rows[i].stats.aux_loss);
        CHECK(j[i].at("variant").get<std::string>() == rows[i].variant);
    }
}

TEST_CASE("report diff of the frozen cf pair") {
    // cf 1.0 vs 0.5 on the default seed; expected deltas pinned from the
    // sweep fixture (drops 357 -> 2048, padding 357 -> 0).
    CliOptions high;
    high.routing.capacity_factor = 1.0;
    high.cf_given = true;
    resolve(high);
    CliOptions low = high;
    low.routing.capacity_factor = 0.5;
    const auto deltas = diff_reports(build_route_report(high), build_route_report(low));
    double drop_delta = 0.0;
    double pad_delta = 0.0;
    for (const ReportDelta& d : deltas) {
        if (d.field == "/stats/drops") drop_delta = d.delta;
        if (d.field == "/stats/padding") pad_delta = d.delta;
    }
    CHECK(drop_delta == 1691.0);
    CHECK(pad_delta == -357.0);
}

TEST_CASE("gradcheck outcome passes and reports the pathology flags") {
    CliOptions opts;
    opts.n_tokens = 32;
    opts.d_model = 16;
    opts.n_gpus = 1;
    resolve(opts);
    const GradcheckOutcome outcome = build_gradcheck(opts);
    REQUIRE_FALSE(outcome.margin_exhausted);
    REQUIRE(outcome.report.gradcheck.has_value());
    CHECK(outcome.report.gradcheck->passed);
    CHECK(outcome.report.gradcheck->pathology_standard_zero);
    CHECK(outcome.report.gradcheck->pathology_st_nonzero);
    CHECK(outcome.full_json.at("gradcheck").contains("analytic_standard"));
}

#ifdef MOESIM_BINARY
TEST_CASE("binary smoke: exit codes and determinism") {
    const std::string bin = MOESIM_BINARY;
    const std::string out_a = std::string(std::getenv("TMPDIR") ? std::getenv("TMPDIR") : "/tmp") +
                              "/moesim_route_a.json";
    const std::string out_b = std::string(std::getenv("TMPDIR") ? std::getenv("TMPDIR") : "/tmp") +
                              "/moesim_route_b.json";

    CHECK(std::system((bin + " route -o " + out_a + " 2>/dev/null").c_str()) == 0);
    CHECK(std::system((bin + " route -o " + out_b + " 2>/dev/null").c_str()) == 0);
    // Timing differs between runs; payloads must not.
    const auto ja = nlohmann::json::parse(read_file(out_a));
    const auto jb = nlohmann::json::parse(read_file(out_b));
    CHECK(ja.at("config") == jb.at("config"));
    CHECK(ja.at("stats") == jb.at("stats"));

    // FR with k = n_experts is a validation error: exit code 2.
    const int rc = std::system((bin + " route --k 8 --fr -o /dev/null 2>/dev/null").c_str());
    CHECK(WEXITSTATUS(rc) == 2);
}
#endif
