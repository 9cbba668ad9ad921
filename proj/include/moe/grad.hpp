// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moe/core.hpp"

namespace moe {

// Row-wise softmax of the raw scores over all experts.
struct NormalizedScores {
    Matrix g;  // n_tokens x n_experts, rows sum to 1
};

NormalizedScores normalize_all(const ScoreMatrix& scores);

// Everything the backward pass needs to replay the combination. Immutable
// after combine_forward returns.
struct CombineTape {
    std::vector<std::vector<int>> routes;  // realized expert set per token
    Matrix g;
    std::vector<std::vector<std::vector<double>>> expert_outputs;  // [token][route][dim]
    Matrix outputs;                          // combined o_i
    std::vector<double> route_g_sum;         // S_i = sum of g over realized routes
    std::vector<std::vector<double>> weights;  // per-route combining weights
    bool straight_through = false;
    int d_model = 0;
};

// o_i = sum_{j in R_i} (g_ij / S_i) E_j(x_i). Tokens with an empty route set
// produce a zero output (they ride the residual path). The forward pass is
// identical in both modes; straight_through only changes the backward rule.
CombineTape combine_forward(const std::vector<std::vector<int>>& routes,
                            const NormalizedScores& g,
                            const std::vector<std::vector<std::vector<double>>>& expert_outputs,
                            bool straight_through);

struct CombineGradients {
    Matrix d_scores;  // wrt raw a_ij, all experts
    std::vector<std::vector<std::vector<double>>> d_expert_outputs;
};

// Standard mode differentiates the renormalized weights in full, including
// through S_i; when |R_i| = 1 the weight is the constant 1 and every score
// gradient of that token vanishes. Straight-through mode treats S_i as a
// constant, so gradient still flows through the numerator g_ij and the
// softmax Jacobian of g, keeping single-route tokens trainable.
CombineGradients combine_backward(const CombineTape& tape, const Matrix& upstream);

struct MarginReport {
    bool pass = false;
    double min_margin = 0.0;  // smallest asserted gap
    int offending_token = -1;
    std::string detail;
};

// Checks that the routing decision is stable: every token's rank-k /
// rank-(k+1) score gap and every contested within-expert admission boundary
// must exceed delta. capacity < 0 means the cf = k default budget.
MarginReport assert_routing_margin(const ScoreMatrix& scores, int k, double delta,
                                   int capacity = -1);

class MarginViolation : public std::runtime_error {
  public:
    explicit MarginViolation(const std::string& what) : std::runtime_error(what) {}
};

// Central differences of a scalar loss wrt every score entry. The realized
// route set is the caller's to freeze inside the evaluator; the margin check
// makes that sound, and a violation raises MarginViolation instead of
// returning a gradient of a discontinuous selection.
Matrix finite_difference_grad(const std::function<double(const ScoreMatrix&)>& loss,
                              const ScoreMatrix& scores, int k, double step,
                              double margin_delta, int capacity = -1);

struct GradCheckReport {
    double margin = 0.0;
    double tolerance = 0.0;
    double std_max_abs_err = 0.0;
    double std_max_rel_err = 0.0;
    double st_max_abs_err = 0.0;
    double st_max_rel_err = 0.0;
    Matrix analytic_standard;
    Matrix numeric_standard;
    Matrix analytic_st;
    Matrix numeric_st;
    bool pathology_standard_zero = false;  // |R_i|=1 score grads exactly zero
    bool pathology_st_nonzero = false;     // same token, nonzero under ST
    bool passed = false;
};

// End-to-end gradient check on a seeded instance: fixed linear experts,
// loss = 1/2 sum ||o_i||^2, standard mode against plain finite differences
// and straight-through mode against the denominator-frozen surrogate.
// Raises MarginViolation when the seed lands on an unstable routing margin.
GradCheckReport run_gradcheck(int n_tokens, int n_experts, int d_model, int k,
                              std::uint64_t seed, double step, double margin_delta,
                              double tolerance);

}  // namespace moe
