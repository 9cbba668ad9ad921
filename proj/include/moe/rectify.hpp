// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moe/core.hpp"
#include "moe/topology.hpp"

namespace moe {

// Rescue route for a dropped token: one dispatch to the best-scoring expert
// on the token's home GPU. multiplicity records how many of the token's k
// routes were dropped; the combining weight of this route is scaled by it.
struct RectifyRoute {
    int token;
    int expert;
    double score;      // raw routing score of (token, expert)
    int multiplicity;  // k - |R_i|, always >= 1
    int home_gpu;
};

// Padding replacement: a token admitted to its rank-(k+1) expert.
struct FillRoute {
    int token;
    int expert;
    double score;  // the token's rank-(k+1) score
};

struct RectifyPlan {
    std::vector<RectifyRoute> routes;
    std::vector<int> added_load;  // per expert, one per route (not multiplicity)
};

struct FillPlan {
    std::vector<FillRoute> routes;
    std::vector<int> added_load;  // per expert, never pushes past capacity
};

// Intra-GPU Rectification. Each token with at least one drop gets exactly one
// rescue route to the argmax-score expert among the experts co-located on its
// home GPU (ties to the lower expert index). No capacity check applies, and
// the chosen expert may already serve the token; such duplicates are counted
// by the simulator, not forbidden. With a single GPU this degenerates to
// unconstrained top-1 routing.
RectifyPlan intra_gpu_rectify(const RoutingPlan& plan, const ScoreMatrix& scores,
                              const GpuTopology& topo);

// Combining weights with the rescue term: surviving route j keeps e^{a_ij},
// the rescue route h contributes multiplicity * e^{a_ih}, all normalized by
// their sum. Tokens without drops reduce bit-identically to the vanilla
// weights.
CombineWeights combine_weights_with_ir(const RoutingPlan& plan, const RectifyPlan& rect,
                                       const ScoreMatrix& scores);

// Fill-in Rectification, two stages: every token nominates its rank-(k+1)
// expert, then each expert with spare slots admits nominees by descending
// score (ties to the lower token index) until it reaches capacity.
FillPlan fill_in_rectify(const ScoreMatrix& scores, const RoutingPlan& plan, int capacity);

// Equivalent formulation used as a cross-check: run the assignment with k+1
// ranks at the capacity budgeted for k. Ranks 1..k reproduce the base plan
// and the rank-(k+1) routes coincide exactly with fill_in_rectify's output.
RoutingPlan fill_in_via_extended_topk(const ScoreMatrix& scores, int k, int capacity);

// Base plan plus admitted fill routes as rank-(k+1) entries. occupancy picks
// up the fills; drop_count is untouched (fills do not undo drops).
RoutingPlan merge_fill_routes(const RoutingPlan& plan, const FillPlan& fill);

// Fill routes join the softmax of their token like ordinary routes of the
// extended top-(k+1) router.
CombineWeights combine_weights_with_fr(const RoutingPlan& plan_with_fills,
                                       const ScoreMatrix& scores);

}  // namespace moe
