// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moe/core.hpp"
#include "moe/rectify.hpp"
#include "moe/topology.hpp"

namespace moe {

// Deterministic stand-in for a real FFN expert: two dense layers with a
// squared-ReLU between them. Cheap, nonlinear, and distinct per seed.
struct ReferenceExpert {
    int index = 0;
    Matrix w1;  // d_model x d_hidden
    Matrix w2;  // d_hidden x d_model

    std::vector<double> forward(const double* x, int d_model) const;
};

std::vector<ReferenceExpert> make_reference_experts(int n_experts, int d_model,
                                                    std::uint64_t seed, int d_hidden = 0);

// Full accounting of one routed batch. Transfer counters tally every
// realized route: base and fill routes are inter- or intra-GPU by token
// home vs expert placement, rectified routes are intra-GPU by construction,
// so inter + intra equals the total realized route count.
struct RoutingStats {
    long long drops = 0;
    long long padding = 0;  // of the base plan, before any fills
    long long fills = 0;
    long long inter_gpu_transfers = 0;
    long long intra_gpu_transfers = 0;
    long long duplicate_pairs = 0;  // IR routes re-targeting an expert already serving the token
    std::vector<long long> per_expert_load;  // base + fill + IR, may exceed capacity via IR
    double extra_compute_ratio = 0.0;  // (drop multiplicities + fills) / (k * n_tokens)
    double aux_loss = 0.0;
};

struct LoadBalanceTerm {
    std::vector<double> token_fraction;     // f_e
    std::vector<double> mean_router_prob;   // P_e
    double loss = 0.0;                      // n_experts * sum_e f_e * P_e
};

// Switch-style balance term. f_e counts rank-1 nominations by default (the
// convention for k >= 2 is not pinned anywhere authoritative; all_ranks
// switches to counting every rank-1..k nomination instead).
LoadBalanceTerm load_balance_loss(const ScoreMatrix& scores, const RoutingPlan& plan,
                                  bool all_ranks = false);

// Stats for a base plan plus optional rectify/fill plans. Pass nullptr for
// plans that are not in play. Verifies IR locality against the topology.
RoutingStats collect_stats(const RoutingPlan& plan, const RectifyPlan* rect,
                           const FillPlan* fill, const ScoreMatrix& scores,
                           const GpuTopology& topo);

struct ExecutionResult {
    Matrix outputs;  // n_tokens x d_model
    RoutingStats stats;
};

// Runs every realized route through its expert exactly once and combines the
// results under the weight rule implied by which plans are present (vanilla,
// rescue-scaled, fill-extended, or both). Throws if any rectified route
// lands off its token's home GPU.
ExecutionResult execute(const TokenBatch& batch, const RoutingPlan& plan,
                        const RectifyPlan* rect, const FillPlan* fill,
                        const std::vector<ReferenceExpert>& experts, const GpuTopology& topo,
                        const ScoreMatrix& scores);

struct SweepRow {
    double cf;
    std::string variant;  // one of base, +IR, +FR, +FR+IR
    RoutingStats stats;
};

extern const std::vector<std::string> kSweepVariants;

// One stats row per (variant, cf) cell over a fixed score matrix and
// topology. Routing bookkeeping only; experts are not invoked.
std::vector<SweepRow> sweep_capacity_factor(const ScoreMatrix& scores, int k,
                                            const std::vector<double>& cf_grid,
                                            const GpuTopology& topo);

}  // namespace moe
