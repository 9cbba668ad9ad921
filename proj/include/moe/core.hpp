// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moe/matrix.hpp"

namespace moe {

// Hidden states entering the MoE layer, one row per token.
struct TokenBatch {
    Matrix values;  // n_tokens x d_model

    int n_tokens() const { return values.rows; }
    int d_model() const { return values.cols; }
};

// Router embedding vectors, one row per expert.
struct RouterWeights {
    Matrix values;  // n_experts x d_model

    int n_experts() const { return values.rows; }
    int d_model() const { return values.cols; }
};

// Raw token-to-expert affinities a[i][j] = w_j . x_i. Assignment works on
// the raw logits; softmax ordering equals raw ordering, so there is no
// normalization at selection time.
struct ScoreMatrix {
    Matrix a;  // n_tokens x n_experts

    int n_tokens() const { return a.rows; }
    int n_experts() const { return a.cols; }
};

struct RoutingConfig {
    int k = 1;
    double capacity_factor = 1.0;
    bool enable_ir = false;
    bool enable_fr = false;
    bool straight_through = false;
    double aux_loss_weight = 0.01;
    std::uint64_t seed = 42;

    // Throws std::invalid_argument on bad combinations. FR consumes the
    // rank-(k+1) choice, so it needs k < n_experts.
    void validate(int n_experts) const;
};

// One realized token->expert assignment. rank is 1-based; rank k+1 marks a
// fill-in route added by Fill-in Rectification.
struct Route {
    int token;
    int expert;
    int rank;
    double score;
};

// Output of the capacity-constrained assignment. routes is sorted by
// (token, rank); token_offset[i]..token_offset[i+1] spans token i's routes.
struct RoutingPlan {
    int n_tokens = 0;
    int n_experts = 0;
    int k = 0;
    int capacity = 0;
    std::vector<Route> routes;
    std::vector<int> drop_count;    // per token, rejections among ranks <= k
    std::vector<int> occupancy;     // per expert
    std::vector<int> token_offset;  // n_tokens + 1 entries into routes

    long long total_drops() const {
        long long s = 0;
        for (int d : drop_count) s += d;
        return s;
    }
    long long total_padding() const {
        long long s = 0;
        for (int o : occupancy) s += capacity - o;
        return s;
    }
};

enum class RouteKind { kBase, kFill, kRectify };

struct WeightedRoute {
    int expert;
    int rank;  // 0 for rectify routes
    RouteKind kind;
    double weight;
};

// Per-token combining weights. Tokens whose every route was dropped get an
// empty entry: they pass through on the residual path and contribute a zero
// combination output.
using TokenWeights = std::vector<WeightedRoute>;
using CombineWeights = std::vector<TokenWeights>;

// a[i][j] = <batch row i, weights row j>, computed exactly as written (plain
// double-precision dot products, no softmax).
ScoreMatrix compute_scores(const TokenBatch& batch, const RouterWeights& weights);

// ceil(cf * n_tokens / n_experts), clamped to at least one slot so no expert
// has zero capacity.
int compute_capacity(double capacity_factor, int n_tokens, int n_experts);

// Rank-sequential greedy assignment. For each rank r = 1..k, every token
// nominates its rank-r expert by descending score (ties to the lower expert
// index); each expert then admits nominations by descending score (ties to
// the lower token index) until capacity runs out. Rejected nominations count
// as drops. Nominations depend only on scores, never on earlier admissions.
RoutingPlan topk_assign(const ScoreMatrix& scores, int k, int capacity);

// Combining weights of the plain top-k router: softmax of the raw scores
// over each token's realized route set.
CombineWeights combine_weights_vanilla(const RoutingPlan& plan, const ScoreMatrix& scores);

// Shared normalization kernel: exp-weights over `scores`, with an optional
// multiplicity-scaled extra term appended last. Every combining-weight
// routine funnels through this so that the no-drop / no-fill cases reduce
// bit-identically to the vanilla weights.
std::vector<double> normalized_exp_weights(const std::vector<double>& scores,
                                           const double* extra_score = nullptr,
                                           int extra_multiplicity = 0);

// Expert preference order of one token: expert indices sorted by descending
// score, ties to the lower index. Position r-1 holds the rank-r expert.
std::vector<int> expert_order_for_token(const ScoreMatrix& scores, int token);

}  // namespace moe
