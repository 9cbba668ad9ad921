// SPDX-License-Identifier: Apache-2.0
#include "moe/core.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace moe {

void RoutingConfig::validate(int n_experts) const {
    if (k < 1) {
        throw std::invalid_argument("RoutingConfig: k must be >= 1");
    }
    if (enable_fr) {
        if (k >= n_experts) {
            throw std::invalid_argument(
                "RoutingConfig: Fill-in Rectification needs k < n_experts (k=" +
                std::to_string(k) + ", n_experts=" + std::to_string(n_experts) + ")");
        }
    } else if (k > n_experts) {
        throw std::invalid_argument("RoutingConfig: k must be <= n_experts");
    }
    if (!(capacity_factor > 0.0)) {
        throw std::invalid_argument("RoutingConfig: capacity_factor must be > 0");
    }
    if (aux_loss_weight < 0.0) {
        throw std::invalid_argument("RoutingConfig: aux_loss_weight must be >= 0");
    }
}

ScoreMatrix compute_scores(const TokenBatch& batch, const RouterWeights& weights) {
    if (batch.d_model() != weights.d_model()) {
        throw std::invalid_argument("compute_scores: d_model mismatch (" +
                                    std::to_string(batch.d_model()) + " vs " +
                                    std::to_string(weights.d_model()) + ")");
    }
    if (batch.n_tokens() < 1 || weights.n_experts() < 2) {
        throw std::invalid_argument("compute_scores: need >= 1 token and >= 2 experts");
    }
    if (!batch.values.all_finite() || !weights.values.all_finite()) {
        throw std::invalid_argument("compute_scores: non-finite input");
    }

    const int n = batch.n_tokens();
    const int m = weights.n_experts();
    const int d = batch.d_model();
    ScoreMatrix s{Matrix(n, m)};
    for (int i = 0; i < n; ++i) {
        const double* x = batch.values.row(i);
        for (int j = 0; j < m; ++j) {
            const double* w = weights.values.row(j);
            double acc = 0.0;
            for (int c = 0; c < d; ++c) acc += x[c] * w[c];
            s.a.at(i, j) = acc;
        }
    }
    return s;
}

int compute_capacity(double capacity_factor, int n_tokens, int n_experts) {
    if (!(capacity_factor > 0.0)) {
        throw std::invalid_argument("compute_capacity: capacity_factor must be > 0");
    }
    if (n_tokens < 1 || n_experts < 1) {
        throw std::invalid_argument("compute_capacity: counts must be >= 1");
    }
    const double raw = capacity_factor * static_cast<double>(n_tokens) / n_experts;
    const int cap = static_cast<int>(std::ceil(raw));
    return std::max(cap, 1);
}

std::vector<int> expert_order_for_token(const ScoreMatrix& scores, int token) {
    const int m = scores.n_experts();
    std::vector<int> order(m);
    for (int j = 0; j < m; ++j) order[j] = j;
    const double* row = scores.a.row(token);
    std::sort(order.begin(), order.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    return order;
}

namespace {

struct Nomination {
    int token;
    double score;
};

}  // namespace

RoutingPlan topk_assign(const ScoreMatrix& scores, int k, int capacity) {
    const int n = scores.n_tokens();
    const int m = scores.n_experts();
    if (k < 1 || k > m) {
        throw std::invalid_argument("topk_assign: k must be in [1, n_experts]");
    }
    if (capacity < 1) {
        throw std::invalid_argument("topk_assign: capacity must be >= 1");
    }

    std::vector<std::vector<int>> order(n);
    for (int i = 0; i < n; ++i) order[i] = expert_order_for_token(scores, i);

    RoutingPlan plan;
    plan.n_tokens = n;
    plan.n_experts = m;
    plan.k = k;
    plan.capacity = capacity;
    plan.drop_count.assign(n, 0);
    plan.occupancy.assign(m, 0);
    plan.routes.reserve(static_cast<std::size_t>(n) * k);

    std::vector<std::vector<Nomination>> queue(m);
    for (int r = 0; r < k; ++r) {
        for (auto& q : queue) q.clear();
        for (int i = 0; i < n; ++i) {
            const int e = order[i][r];
            queue[e].push_back({i, scores.a.at(i, e)});
        }
        for (int e = 0; e < m; ++e) {
            auto& q = queue[e];
            std::sort(q.begin(), q.end(), [](const Nomination& a, const Nomination& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.token < b.token;
            });
            const int remaining = capacity - plan.occupancy[e];
            const int admit = std::min<int>(remaining, static_cast<int>(q.size()));
            for (int p = 0; p < admit; ++p) {
                plan.routes.push_back({q[p].token, e, r + 1, q[p].score});
            }
            plan.occupancy[e] += admit;
            for (std::size_t p = admit; p < q.size(); ++p) {
                plan.drop_count[q[p].token] += 1;
            }
        }
    }

    std::sort(plan.routes.begin(), plan.routes.end(), [](const Route& a, const Route& b) {
        if (a.token != b.token) return a.token < b.token;
        return a.rank < b.rank;
    });
    plan.token_offset.assign(n + 1, 0);
    for (const Route& r : plan.routes) plan.token_offset[r.token + 1] += 1;
    for (int i = 0; i < n; ++i) plan.token_offset[i + 1] += plan.token_offset[i];
    return plan;
}

std::vector<double> normalized_exp_weights(const std::vector<double>& scores,
                                           const double* extra_score,
                                           int extra_multiplicity) {
    const bool has_extra = extra_score != nullptr && extra_multiplicity > 0;
    std::vector<double> w;
    w.reserve(scores.size() + (has_extra ? 1 : 0));
    if (scores.empty() && !has_extra) return w;

    double peak = has_extra ? *extra_score : scores[0];
    for (double s : scores) peak = std::max(peak, s);

    double z = 0.0;
    for (double s : scores) {
        const double e = std::exp(s - peak);
        w.push_back(e);
        z += e;
    }
    if (has_extra) {
        const double e = extra_multiplicity * std::exp(*extra_score - peak);
        w.push_back(e);
        z += e;
    }
    for (double& v : w) v /= z;
    return w;
}

CombineWeights combine_weights_vanilla(const RoutingPlan& plan, const ScoreMatrix& scores) {
    if (plan.n_tokens != scores.n_tokens() || plan.n_experts != scores.n_experts()) {
        throw std::invalid_argument("combine_weights_vanilla: plan/scores shape mismatch");
    }
    CombineWeights out(plan.n_tokens);
    std::vector<double> route_scores;
    for (int i = 0; i < plan.n_tokens; ++i) {
        route_scores.clear();
        for (int p = plan.token_offset[i]; p < plan.token_offset[i + 1]; ++p) {
            route_scores.push_back(plan.routes[p].score);
        }
        const std::vector<double> w = normalized_exp_weights(route_scores);
        TokenWeights& tw = out[i];
        tw.reserve(w.size());
        for (int p = plan.token_offset[i]; p < plan.token_offset[i + 1]; ++p) {
            const Route& r = plan.routes[p];
            const RouteKind kind = r.rank > plan.k ? RouteKind::kFill : RouteKind::kBase;
            tw.push_back({r.expert, r.rank, kind, w[p - plan.token_offset[i]]});
        }
    }
    return out;
}

}  // namespace moe
