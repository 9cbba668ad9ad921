// SPDX-License-Identifier: Apache-2.0
#include "moe/rectify.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace moe {

RectifyPlan intra_gpu_rectify(const RoutingPlan& plan, const ScoreMatrix& scores,
                              const GpuTopology& topo) {
    topo.validate();
    if (topo.n_experts() != plan.n_experts || topo.n_tokens() != plan.n_tokens) {
        throw std::invalid_argument("intra_gpu_rectify: topology/plan shape mismatch");
    }

    RectifyPlan rect;
    rect.added_load.assign(plan.n_experts, 0);
    for (int i = 0; i < plan.n_tokens; ++i) {
        if (plan.drop_count[i] == 0) continue;
        const int gpu = topo.token_home[i];
        const double* row = scores.a.row(i);
        int best = -1;
        for (int e : topo.gpu_experts[gpu]) {
            if (best < 0 || row[e] > row[best]) best = e;  // ties: first (lowest) index
        }
        rect.routes.push_back({i, best, row[best], plan.drop_count[i], gpu});
        rect.added_load[best] += 1;
    }
    return rect;
}

CombineWeights combine_weights_with_ir(const RoutingPlan& plan, const RectifyPlan& rect,
                                       const ScoreMatrix& scores) {
    if (plan.n_tokens != scores.n_tokens()) {
        throw std::invalid_argument("combine_weights_with_ir: plan/scores shape mismatch");
    }
    std::vector<const RectifyRoute*> by_token(plan.n_tokens, nullptr);
    for (const RectifyRoute& r : rect.routes) {
        if (r.multiplicity != plan.drop_count[r.token]) {
            throw std::logic_error("combine_weights_with_ir: multiplicity " +
                                   std::to_string(r.multiplicity) + " != drop_count " +
                                   std::to_string(plan.drop_count[r.token]) + " for token " +
                                   std::to_string(r.token));
        }
        by_token[r.token] = &r;
    }

    CombineWeights out(plan.n_tokens);
    std::vector<double> route_scores;
    for (int i = 0; i < plan.n_tokens; ++i) {
        route_scores.clear();
        for (int p = plan.token_offset[i]; p < plan.token_offset[i + 1]; ++p) {
            route_scores.push_back(plan.routes[p].score);
        }
        const RectifyRoute* rr = by_token[i];
        const std::vector<double> w =
            rr ? normalized_exp_weights(route_scores, &rr->score, rr->multiplicity)
               : normalized_exp_weights(route_scores);

        TokenWeights& tw = out[i];
        tw.reserve(w.size());
        int wi = 0;
        for (int p = plan.token_offset[i]; p < plan.token_offset[i + 1]; ++p) {
            const Route& r = plan.routes[p];
            const RouteKind kind = r.rank > plan.k ? RouteKind::kFill : RouteKind::kBase;
            tw.push_back({r.expert, r.rank, kind, w[wi++]});
        }
        if (rr) tw.push_back({rr->expert, 0, RouteKind::kRectify, w[wi]});
    }
    return out;
}

FillPlan fill_in_rectify(const ScoreMatrix& scores, const RoutingPlan& plan, int capacity) {
    const int n = plan.n_tokens;
    const int m = plan.n_experts;
    const int k = plan.k;
    if (k + 1 > m) {
        throw std::invalid_argument("fill_in_rectify: needs k + 1 <= n_experts");
    }
    if (plan.capacity != capacity) {
        throw std::invalid_argument("fill_in_rectify: capacity mismatch with plan");
    }

    // Stage 1: one nominee per token, the rank-(k+1) expert.
    struct Nominee {
        int token;
        double score;
    };
    std::vector<std::vector<Nominee>> queue(m);
    for (int i = 0; i < n; ++i) {
        const std::vector<int> order = expert_order_for_token(scores, i);
        const int e = order[k];
        queue[e].push_back({i, scores.a.at(i, e)});
    }

    // Stage 2: fill the padding, highest scores first.
    FillPlan fill;
    fill.added_load.assign(m, 0);
    for (int e = 0; e < m; ++e) {
        auto& q = queue[e];
        std::sort(q.begin(), q.end(), [](const Nominee& a, const Nominee& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.token < b.token;
        });
        const int slots = capacity - plan.occupancy[e];
        const int admit = std::min<int>(slots, static_cast<int>(q.size()));
        for (int p = 0; p < admit; ++p) {
            fill.routes.push_back({q[p].token, e, q[p].score});
        }
        fill.added_load[e] = admit;
    }
    std::sort(fill.routes.begin(), fill.routes.end(),
              [](const FillRoute& a, const FillRoute& b) { return a.token < b.token; });
    return fill;
}

RoutingPlan fill_in_via_extended_topk(const ScoreMatrix& scores, int k, int capacity) {
    if (k + 1 > scores.n_experts()) {
        throw std::invalid_argument("fill_in_via_extended_topk: needs k + 1 <= n_experts");
    }
    RoutingPlan plan = topk_assign(scores, k + 1, capacity);
    plan.k = k;  // rank k+1 entries are fill routes, not base routes
    return plan;
}

RoutingPlan merge_fill_routes(const RoutingPlan& plan, const FillPlan& fill) {
    RoutingPlan merged = plan;
    for (const FillRoute& f : fill.routes) {
        merged.routes.push_back({f.token, f.expert, plan.k + 1, f.score});
        merged.occupancy[f.expert] += 1;
        if (merged.occupancy[f.expert] > merged.capacity) {
            throw std::logic_error("merge_fill_routes: fill pushed expert past capacity");
        }
    }
    std::sort(merged.routes.begin(), merged.routes.end(), [](const Route& a, const Route& b) {
        if (a.token != b.token) return a.token < b.token;
        return a.rank < b.rank;
    });
    merged.token_offset.assign(merged.n_tokens + 1, 0);
    for (const Route& r : merged.routes) merged.token_offset[r.token + 1] += 1;
    for (int i = 0; i < merged.n_tokens; ++i) merged.token_offset[i + 1] += merged.token_offset[i];
    return merged;
}

CombineWeights combine_weights_with_fr(const RoutingPlan& plan_with_fills,
                                       const ScoreMatrix& scores) {
    // Fill routes are ordinary members of their token's softmax.
    return combine_weights_vanilla(plan_with_fills, scores);
}

}  // namespace moe
