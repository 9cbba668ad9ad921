// SPDX-License-Identifier: Apache-2.0
#include "moe/sim.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "moe/grad.hpp"
#include "moe/rng.hpp"

namespace moe {

std::vector<double> ReferenceExpert::forward(const double* x, int d_model) const {
    if (w1.rows != d_model) {
        throw std::invalid_argument("ReferenceExpert: input dimension mismatch");
    }
    const int h = w1.cols;
    std::vector<double> hidden(h, 0.0);
    for (int c = 0; c < d_model; ++c) {
        const double xv = x[c];
        const double* w = w1.row(c);
        for (int j = 0; j < h; ++j) hidden[j] += xv * w[j];
    }
    for (double& v : hidden) v = v > 0.0 ? v * v : 0.0;  // squared ReLU

    std::vector<double> out(d_model, 0.0);
    for (int j = 0; j < h; ++j) {
        const double hv = hidden[j];
        if (hv == 0.0) continue;
        const double* w = w2.row(j);
        for (int c = 0; c < d_model; ++c) out[c] += hv * w[c];
    }
    return out;
}

std::vector<ReferenceExpert> make_reference_experts(int n_experts, int d_model,
                                                    std::uint64_t seed, int d_hidden) {
    if (d_hidden <= 0) d_hidden = d_model;
    std::vector<ReferenceExpert> experts;
    experts.reserve(n_experts);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(d_hidden));
    for (int e = 0; e < n_experts; ++e) {
        ReferenceExpert x;
        x.index = e;
        x.w1 = gaussian_matrix(d_model, d_hidden, Rng::derive(seed, 0x100 + 2 * e));
        x.w2 = gaussian_matrix(d_hidden, d_model, Rng::derive(seed, 0x101 + 2 * e));
        for (double& v : x.w1.data) v *= s1;
        for (double& v : x.w2.data) v *= s2;
        experts.push_back(std::move(x));
    }
    return experts;
}

LoadBalanceTerm load_balance_loss(const ScoreMatrix& scores, const RoutingPlan& plan,
                                  bool all_ranks) {
    const int n = scores.n_tokens();
    const int m = scores.n_experts();
    if (plan.n_tokens != n || plan.n_experts != m) {
        throw std::invalid_argument("load_balance_loss: plan/scores shape mismatch");
    }

    // f_e is built from nominations (what tokens asked for), not admissions,
    // so drops do not mask imbalance.
    LoadBalanceTerm term;
    term.token_fraction.assign(m, 0.0);
    term.mean_router_prob.assign(m, 0.0);
    const int ranks = all_ranks ? plan.k : 1;
    for (int i = 0; i < n; ++i) {
        const std::vector<int> order = expert_order_for_token(scores, i);
        for (int r = 0; r < ranks; ++r) term.token_fraction[order[r]] += 1.0;
    }
    const double nominations = static_cast<double>(n) * ranks;
    for (double& f : term.token_fraction) f /= nominations;

    const NormalizedScores g = normalize_all(scores);
    for (int i = 0; i < n; ++i) {
        for (int e = 0; e < m; ++e) term.mean_router_prob[e] += g.g.at(i, e);
    }
    for (double& p : term.mean_router_prob) p /= n;

    double dot = 0.0;
    for (int e = 0; e < m; ++e) dot += term.token_fraction[e] * term.mean_router_prob[e];
    term.loss = static_cast<double>(m) * dot;
    return term;
}

RoutingStats collect_stats(const RoutingPlan& plan, const RectifyPlan* rect,
                           const FillPlan* fill, const ScoreMatrix& scores,
                           const GpuTopology& topo) {
    const int n = plan.n_tokens;
    const int m = plan.n_experts;
    RoutingStats stats;
    stats.per_expert_load.assign(m, 0);
    stats.drops = plan.total_drops();
    stats.padding = plan.total_padding();

    for (const Route& r : plan.routes) {
        stats.per_expert_load[r.expert] += 1;
        if (topo.token_home[r.token] == topo.expert_to_gpu[r.expert]) {
            stats.intra_gpu_transfers += 1;
        } else {
            stats.inter_gpu_transfers += 1;
        }
    }

    // Realized base experts per token, for IR duplicate detection.
    std::vector<std::vector<int>> serving(n);
    for (const Route& r : plan.routes) serving[r.token].push_back(r.expert);

    long long fill_count = 0;
    if (fill != nullptr) {
        for (const FillRoute& f : fill->routes) {
            stats.per_expert_load[f.expert] += 1;
            serving[f.token].push_back(f.expert);
            if (topo.token_home[f.token] == topo.expert_to_gpu[f.expert]) {
                stats.intra_gpu_transfers += 1;
            } else {
                stats.inter_gpu_transfers += 1;
            }
        }
        fill_count = static_cast<long long>(fill->routes.size());
    }
    stats.fills = fill_count;

    long long drop_multiplicity = 0;
    if (rect != nullptr) {
        for (const RectifyRoute& r : rect->routes) {
            if (topo.expert_to_gpu[r.expert] != topo.token_home[r.token]) {
                throw std::logic_error("collect_stats: rectified route for token " +
                                       std::to_string(r.token) + " left its home GPU");
            }
            stats.per_expert_load[r.expert] += 1;
            stats.intra_gpu_transfers += 1;
            drop_multiplicity += r.multiplicity;
            const auto& s = serving[r.token];
            if (std::find(s.begin(), s.end(), r.expert) != s.end()) {
                stats.duplicate_pairs += 1;
            }
        }
    }

    const double budget = static_cast<double>(plan.k) * n;
    stats.extra_compute_ratio =
        (static_cast<double>(drop_multiplicity) + static_cast<double>(fill_count)) / budget;
    stats.aux_loss = load_balance_loss(scores, plan).loss;
    return stats;
}

ExecutionResult execute(const TokenBatch& batch, const RoutingPlan& plan,
                        const RectifyPlan* rect, const FillPlan* fill,
                        const std::vector<ReferenceExpert>& experts, const GpuTopology& topo,
                        const ScoreMatrix& scores) {
    const int n = plan.n_tokens;
    const int d = batch.d_model();
    if (batch.n_tokens() != n) {
        throw std::invalid_argument("execute: batch/plan token count mismatch");
    }
    if (static_cast<int>(experts.size()) != plan.n_experts) {
        throw std::invalid_argument("execute: expected " + std::to_string(plan.n_experts) +
                                    " experts, got " + std::to_string(experts.size()));
    }
    topo.validate();

    const RoutingPlan* effective = &plan;
    RoutingPlan merged;
    if (fill != nullptr) {
        merged = merge_fill_routes(plan, *fill);
        effective = &merged;
    }
    const CombineWeights weights =
        rect != nullptr ? combine_weights_with_ir(*effective, *rect, scores)
                        : combine_weights_vanilla(*effective, scores);

    ExecutionResult result;
    result.outputs = Matrix(n, d);
    for (int i = 0; i < n; ++i) {
        double* o = result.outputs.row(i);
        for (const WeightedRoute& wr : weights[i]) {
            const std::vector<double> y = experts[wr.expert].forward(batch.values.row(i), d);
            for (int c = 0; c < d; ++c) o[c] += wr.weight * y[c];
        }
    }
    result.stats = collect_stats(plan, rect, fill, scores, topo);
    return result;
}

const std::vector<std::string> kSweepVariants = {"base", "+IR", "+FR", "+FR+IR"};

std::vector<SweepRow> sweep_capacity_factor(const ScoreMatrix& scores, int k,
                                            const std::vector<double>& cf_grid,
                                            const GpuTopology& topo) {
    if (cf_grid.empty()) {
        throw std::invalid_argument("sweep_capacity_factor: empty grid");
    }
    std::vector<SweepRow> rows;
    rows.reserve(cf_grid.size() * kSweepVariants.size());
    for (double cf : cf_grid) {
        const int capacity = compute_capacity(cf, scores.n_tokens(), scores.n_experts());
        const RoutingPlan plan = topk_assign(scores, k, capacity);
        const RectifyPlan rect = intra_gpu_rectify(plan, scores, topo);
        const FillPlan fill = fill_in_rectify(scores, plan, capacity);
        for (const std::string& variant : kSweepVariants) {
            const bool ir = variant == "+IR" || variant == "+FR+IR";
            const bool fr = variant == "+FR" || variant == "+FR+IR";
            rows.push_back({cf, variant,
                            collect_stats(plan, ir ? &rect : nullptr, fr ? &fill : nullptr,
                                          scores, topo)});
        }
    }
    return rows;
}

}  // namespace moe
