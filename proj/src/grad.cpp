// SPDX-License-Identifier: Apache-2.0
#include "moe/grad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "moe/rng.hpp"

namespace moe {

NormalizedScores normalize_all(const ScoreMatrix& scores) {
    if (!scores.a.all_finite()) {
        throw std::invalid_argument("normalize_all: non-finite scores");
    }
    const int n = scores.n_tokens();
    const int m = scores.n_experts();
    NormalizedScores out{Matrix(n, m)};
    for (int i = 0; i < n; ++i) {
        const double* row = scores.a.row(i);
        double peak = row[0];
        for (int j = 1; j < m; ++j) peak = std::max(peak, row[j]);
        double z = 0.0;
        for (int j = 0; j < m; ++j) {
            const double e = std::exp(row[j] - peak);
            out.g.at(i, j) = e;
            z += e;
        }
        for (int j = 0; j < m; ++j) out.g.at(i, j) /= z;
    }
    return out;
}

CombineTape combine_forward(const std::vector<std::vector<int>>& routes,
                            const NormalizedScores& g,
                            const std::vector<std::vector<std::vector<double>>>& expert_outputs,
                            bool straight_through) {
    const int n = static_cast<int>(routes.size());
    if (g.g.rows != n || static_cast<int>(expert_outputs.size()) != n) {
        throw std::invalid_argument("combine_forward: per-token input sizes disagree");
    }
    int d = 0;
    for (int i = 0; i < n && d == 0; ++i) {
        if (!expert_outputs[i].empty()) d = static_cast<int>(expert_outputs[i][0].size());
    }

    CombineTape tape;
    tape.routes = routes;
    tape.g = g.g;
    tape.expert_outputs = expert_outputs;
    tape.straight_through = straight_through;
    tape.d_model = d;
    tape.outputs = Matrix(n, d);
    tape.route_g_sum.assign(n, 0.0);
    tape.weights.resize(n);

    for (int i = 0; i < n; ++i) {
        const auto& r = routes[i];
        if (expert_outputs[i].size() != r.size()) {
            throw std::invalid_argument("combine_forward: route/output count mismatch at token " +
                                        std::to_string(i));
        }
        if (r.empty()) continue;  // residual-only token, zero output
        double s = 0.0;
        for (int e : r) s += tape.g.at(i, e);
        tape.route_g_sum[i] = s;
        auto& w = tape.weights[i];
        w.resize(r.size());
        double* o = tape.outputs.row(i);
        for (std::size_t p = 0; p < r.size(); ++p) {
            if (static_cast<int>(expert_outputs[i][p].size()) != d) {
                throw std::invalid_argument("combine_forward: ragged expert output dimension");
            }
            w[p] = tape.g.at(i, r[p]) / s;
            const double* e = expert_outputs[i][p].data();
            for (int c = 0; c < d; ++c) o[c] += w[p] * e[c];
        }
    }
    return tape;
}

CombineGradients combine_backward(const CombineTape& tape, const Matrix& upstream) {
    if (!upstream.same_shape(tape.outputs)) {
        throw std::invalid_argument("combine_backward: upstream shape mismatch");
    }
    const int n = tape.g.rows;
    const int m = tape.g.cols;
    const int d = tape.d_model;

    CombineGradients grads;
    grads.d_scores = Matrix(n, m);
    grads.d_expert_outputs.resize(n);

    std::vector<double> d_g(m);
    for (int i = 0; i < n; ++i) {
        const auto& r = tape.routes[i];
        grads.d_expert_outputs[i].assign(r.size(), std::vector<double>(d, 0.0));
        if (r.empty()) continue;

        const double* up = upstream.row(i);
        const double s = tape.route_g_sum[i];
        const auto& w = tape.weights[i];

        // u_p = <upstream, E_p>; expert-output grads are weight-scaled upstream.
        std::vector<double> u(r.size());
        for (std::size_t p = 0; p < r.size(); ++p) {
            const double* e = tape.expert_outputs[i][p].data();
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                acc += up[c] * e[c];
                grads.d_expert_outputs[i][p][c] = w[p] * up[c];
            }
            u[p] = acc;
        }

        std::fill(d_g.begin(), d_g.end(), 0.0);
        if (tape.straight_through) {
            // S_i frozen: d w_p / d g_p = 1 / S_i only.
            for (std::size_t p = 0; p < r.size(); ++p) d_g[r[p]] += u[p] / s;
        } else {
            double common = 0.0;
            for (std::size_t p = 0; p < r.size(); ++p) common += u[p] * w[p];
            for (std::size_t p = 0; p < r.size(); ++p) d_g[r[p]] += (u[p] - common) / s;
        }

        // Through the softmax Jacobian of g over all experts:
        // d a_l = g_l (d g_l - sum_p d g_p g_p).
        double inner = 0.0;
        for (int l = 0; l < m; ++l) inner += d_g[l] * tape.g.at(i, l);
        for (int l = 0; l < m; ++l) {
            grads.d_scores.at(i, l) = tape.g.at(i, l) * (d_g[l] - inner);
        }
    }
    return grads;
}

MarginReport assert_routing_margin(const ScoreMatrix& scores, int k, double delta,
                                   int capacity) {
    const int n = scores.n_tokens();
    const int m = scores.n_experts();
    if (capacity < 0) capacity = compute_capacity(static_cast<double>(k), n, m);

    MarginReport rep;
    rep.min_margin = std::numeric_limits<double>::infinity();
    rep.pass = true;

    auto flag = [&](double gap, int token, const std::string& what) {
        rep.min_margin = std::min(rep.min_margin, gap);
        if (rep.pass && gap <= delta) {
            rep.pass = false;
            rep.offending_token = token;
            rep.detail = what + " gap " + std::to_string(gap) + " <= delta at token " +
                         std::to_string(token);
        }
    };

    std::vector<std::vector<int>> order(n);
    for (int i = 0; i < n; ++i) {
        order[i] = expert_order_for_token(scores, i);
        if (k < m) {
            const double gap = scores.a.at(i, order[i][k - 1]) - scores.a.at(i, order[i][k]);
            flag(gap, i, "rank-k selection");
        }
    }

    // Replay the admission rounds and measure every contested boundary.
    struct Nominee {
        int token;
        double score;
    };
    std::vector<int> occupancy(m, 0);
    std::vector<std::vector<Nominee>> queue(m);
    for (int r = 0; r < k; ++r) {
        for (auto& q : queue) q.clear();
        for (int i = 0; i < n; ++i) {
            const int e = order[i][r];
            queue[e].push_back({i, scores.a.at(i, e)});
        }
        for (int e = 0; e < m; ++e) {
            auto& q = queue[e];
            std::sort(q.begin(), q.end(), [](const Nominee& a, const Nominee& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.token < b.token;
            });
            const int remaining = capacity - occupancy[e];
            const int admit = std::min<int>(remaining, static_cast<int>(q.size()));
            if (admit > 0 && admit < static_cast<int>(q.size())) {
                flag(q[admit - 1].score - q[admit].score, q[admit].token, "admission boundary");
            }
            occupancy[e] += admit;
        }
    }
    return rep;
}

Matrix finite_difference_grad(const std::function<double(const ScoreMatrix&)>& loss,
                              const ScoreMatrix& scores, int k, double step,
                              double margin_delta, int capacity) {
    const MarginReport margin = assert_routing_margin(scores, k, margin_delta, capacity);
    if (!margin.pass) {
        throw MarginViolation("finite_difference_grad: routing margin too small (" +
                              margin.detail + "); gradient of a flipping selection is undefined");
    }

    const int n = scores.n_tokens();
    const int m = scores.n_experts();
    Matrix grad(n, m);
    ScoreMatrix probe = scores;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            const double saved = probe.a.at(i, j);
            probe.a.at(i, j) = saved + step;
            const double up = loss(probe);
            probe.a.at(i, j) = saved - step;
            const double down = loss(probe);
            probe.a.at(i, j) = saved;
            grad.at(i, j) = (up - down) / (2.0 * step);
        }
    }
    return grad;
}

namespace {

// Fixed linear experts so the end-to-end check isolates the combination math.
std::vector<Matrix> linear_experts(int n_experts, int d_model, std::uint64_t seed) {
    std::vector<Matrix> maps;
    maps.reserve(n_experts);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (int e = 0; e < n_experts; ++e) {
        Matrix a = gaussian_matrix(d_model, d_model, Rng::derive(seed, 0xe0 + e));
        for (double& v : a.data) v *= scale;
        maps.push_back(std::move(a));
    }
    return maps;
}

std::vector<double> apply_linear(const Matrix& a, const double* x) {
    std::vector<double> y(a.rows, 0.0);
    for (int r = 0; r < a.rows; ++r) {
        const double* w = a.row(r);
        double acc = 0.0;
        for (int c = 0; c < a.cols; ++c) acc += w[c] * x[c];
        y[r] = acc;
    }
    return y;
}

double half_squared_norm(const Matrix& o) {
    double acc = 0.0;
    for (double v : o.data) acc += v * v;
    return 0.5 * acc;
}

struct ErrStats {
    double max_abs = 0.0;
    double max_rel = 0.0;
};

// Relative error with a unit floor: tiny coordinates are judged absolutely.
ErrStats compare(const Matrix& analytic, const Matrix& numeric) {
    ErrStats s;
    for (std::size_t p = 0; p < analytic.data.size(); ++p) {
        const double a = analytic.data[p];
        const double b = numeric.data[p];
        const double abs_err = std::fabs(a - b);
        const double denom = std::max({std::fabs(a), std::fabs(b), 1.0});
        s.max_abs = std::max(s.max_abs, abs_err);
        s.max_rel = std::max(s.max_rel, abs_err / denom);
    }
    return s;
}

struct Pathology {
    bool standard_zero = false;
    bool st_nonzero = false;
};

// Two tokens, three experts, k=2, capacity 1: each token keeps exactly one
// of its two routes, the textbook single-survivor case.
Pathology pathology_witness(int d_model, std::uint64_t seed) {
    ScoreMatrix scores{Matrix(2, 3)};
    scores.a.at(0, 0) = 5.0;
    scores.a.at(0, 1) = 4.0;
    scores.a.at(0, 2) = 0.0;
    scores.a.at(1, 0) = 6.0;
    scores.a.at(1, 1) = 3.0;
    scores.a.at(1, 2) = 0.0;

    const RoutingPlan plan = topk_assign(scores, 2, 1);
    std::vector<std::vector<int>> routes(2);
    for (const Route& r : plan.routes) routes[r.token].push_back(r.expert);

    const Matrix batch = gaussian_matrix(2, d_model, Rng::derive(seed, 0x9a));
    const std::vector<Matrix> experts = linear_experts(3, d_model, Rng::derive(seed, 0x9b));
    std::vector<std::vector<std::vector<double>>> outputs(2);
    for (int i = 0; i < 2; ++i) {
        for (int e : routes[i]) outputs[i].push_back(apply_linear(experts[e], batch.row(i)));
    }

    const NormalizedScores g = normalize_all(scores);
    const CombineTape std_tape = combine_forward(routes, g, outputs, false);
    const CombineTape st_tape = combine_forward(routes, g, outputs, true);
    const CombineGradients std_grads = combine_backward(std_tape, std_tape.outputs);
    const CombineGradients st_grads = combine_backward(st_tape, st_tape.outputs);

    Pathology p;
    p.standard_zero = true;
    for (double v : std_grads.d_scores.data) {
        if (v != 0.0) p.standard_zero = false;
    }
    double st_peak = 0.0;
    for (double v : st_grads.d_scores.data) st_peak = std::max(st_peak, std::fabs(v));
    p.st_nonzero = st_peak > 1e-12;
    return p;
}

}  // namespace

GradCheckReport run_gradcheck(int n_tokens, int n_experts, int d_model, int k,
                              std::uint64_t seed, double step, double margin_delta,
                              double tolerance) {
    const TokenBatch batch{gaussian_matrix(n_tokens, d_model, Rng::derive(seed, 0x01))};
    const RouterWeights router{gaussian_matrix(n_experts, d_model, Rng::derive(seed, 0x02))};
    const ScoreMatrix scores = compute_scores(batch, router);
    const int capacity = compute_capacity(static_cast<double>(k), n_tokens, n_experts);

    const MarginReport margin = assert_routing_margin(scores, k, margin_delta, capacity);
    if (!margin.pass) {
        throw MarginViolation("run_gradcheck: " + margin.detail);
    }

    const RoutingPlan plan = topk_assign(scores, k, capacity);
    std::vector<std::vector<int>> routes(n_tokens);
    for (const Route& r : plan.routes) routes[r.token].push_back(r.expert);

    const std::vector<Matrix> experts = linear_experts(n_experts, d_model, seed);
    std::vector<std::vector<std::vector<double>>> outputs(n_tokens);
    for (int i = 0; i < n_tokens; ++i) {
        for (int e : routes[i]) outputs[i].push_back(apply_linear(experts[e], batch.values.row(i)));
    }

    const NormalizedScores g0 = normalize_all(scores);
    const CombineTape std_tape = combine_forward(routes, g0, outputs, false);
    const CombineTape st_tape = combine_forward(routes, g0, outputs, true);

    // Loss = 1/2 sum ||o_i||^2, so the upstream gradient is o itself.
    const CombineGradients analytic_std = combine_backward(std_tape, std_tape.outputs);
    const CombineGradients analytic_st = combine_backward(st_tape, st_tape.outputs);

    auto standard_loss = [&](const ScoreMatrix& s) {
        const NormalizedScores g = normalize_all(s);
        const CombineTape t = combine_forward(routes, g, outputs, false);
        return half_squared_norm(t.outputs);
    };
    // Surrogate for the straight-through rule: the per-token normalizer is
    // frozen at its unperturbed value.
    auto st_surrogate_loss = [&](const ScoreMatrix& s) {
        const NormalizedScores g = normalize_all(s);
        Matrix o(n_tokens, d_model);
        for (int i = 0; i < n_tokens; ++i) {
            if (routes[i].empty()) continue;
            const double s0 = std_tape.route_g_sum[i];
            double* row = o.row(i);
            for (std::size_t p = 0; p < routes[i].size(); ++p) {
                const double w = g.g.at(i, routes[i][p]) / s0;
                const double* e = outputs[i][p].data();
                for (int c = 0; c < d_model; ++c) row[c] += w * e[c];
            }
        }
        return half_squared_norm(o);
    };

    GradCheckReport rep;
    rep.margin = margin.min_margin;
    rep.tolerance = tolerance;
    rep.analytic_standard = analytic_std.d_scores;
    rep.analytic_st = analytic_st.d_scores;
    rep.numeric_standard =
        finite_difference_grad(standard_loss, scores, k, step, margin_delta, capacity);
    rep.numeric_st =
        finite_difference_grad(st_surrogate_loss, scores, k, step, margin_delta, capacity);

    const ErrStats se = compare(rep.analytic_standard, rep.numeric_standard);
    const ErrStats te = compare(rep.analytic_st, rep.numeric_st);
    rep.std_max_abs_err = se.max_abs;
    rep.std_max_rel_err = se.max_rel;
    rep.st_max_abs_err = te.max_abs;
    rep.st_max_rel_err = te.max_rel;

    const Pathology p = pathology_witness(d_model, seed);
    rep.pathology_standard_zero = p.standard_zero;
    rep.pathology_st_nonzero = p.st_nonzero;

    rep.passed = rep.std_max_rel_err < tolerance && rep.st_max_rel_err < tolerance &&
                 rep.pathology_standard_zero && rep.pathology_st_nonzero;
    return rep;
}

}  // namespace moe
