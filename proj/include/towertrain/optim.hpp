#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "towertrain/evaluation.hpp"
#include "towertrain/objective.hpp"

namespace towertrain {

// Backtracking line search with sufficient decrease
//   L(theta + delta*s) <= L(theta) + eta*delta*(s . grad)
// trying delta_init, delta_init/2, ...  max_steps trials.  On exhaustion the
// search either aborts (default) or accepts the smallest trial.
struct LineSearchConfig {
    double eta = 1e-4;
    int max_steps = 60;
    int init_doubling_period = 5;  // full-gradient warm start doubles every N iterations
    bool accept_on_failure = false;
};

struct CGConfig {
    double xi = 0.1;  // stop once residual norm <= xi * initial residual norm
    int max_iters = 30;
};

struct SgConfig {
    double rho = 0.01;      // sampled fraction per step
    double alpha = 0.1;     // Gramian smoothing weight
    double step_size = 0.0; // 0 resolves to 2^-25 plain / 0.01 diagonally scaled
};

// Running sum of squared gradient entries for diagonal scaling.
struct AdaGradState {
    Vec accum;
    double mu = 1e-8;
};

// Updates accum += g*g elementwise, then returns -g / sqrt(mu + accum).
Vec diag_scale(const Vec& g, AdaGradState& state);

struct LineSearchResult {
    double delta = 0.0;
    double objective = 0.0;
    std::size_t evals = 0;
    bool accepted = false;
    Vec theta;           // theta + delta*s of the accepted trial
    GramianCache cache;  // evaluation cache at the accepted point
};

// evaluate(theta_trial, cache) must return the objective at theta_trial and
// fill the cache.  Requires g_dot_s < 0.
LineSearchResult line_search(
    std::span<const double> theta, std::span<const double> s, double g_dot_s, double objective,
    const std::function<double(const Vec&, GramianCache&)>& evaluate, double delta_init,
    const LineSearchConfig& cfg);

struct CGResult {
    Vec s;
    std::size_t iters = 0;
    bool negative_curvature = false;
    double residual0 = 0.0;  // initial residual norm (gradient norm)
    double residual = 0.0;   // final residual norm
};

// Conjugate gradient on G s = -g for a positive definite operator.  Stops at
// the tolerance or iteration cap; on nonpositive curvature it returns the
// iterate built so far (steepest descent when that is still zero).
// lambda_floor > 0 enables a warning when d.Gd < lambda_floor*|d|^2, which a
// positive definite model forbids.
CGResult cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& g,
                  const CGConfig& cfg, double lambda_floor = 0.0);

enum class Method {
    gd,
    gd_diag,
    newton,
    sampling,
    sampling_diag,
    sg_doubly,
    sogram,
    sogram_diag,
};

Method parse_method(const std::string& name);
const char* method_name(Method m);
bool is_full_batch(Method m);
bool is_diag_scaled(Method m);

// ---- stochastic gradient estimators ----
// All three return estimates of the full-objective gradient (lambda*theta
// included) built from per-step samples; each is unbiased over its sampling
// scheme, which enumeration tests verify exactly.

// Entity-block estimator: towers run over sampled row entities rows_u and
// column entities cols_v only.  Observed pairs falling in the block are
// scaled by (m*n)/(|rows_u|*|cols_v|); the all-pairs part scales its inner
// Gramians by n/|cols_v| (resp. m/|rows_u|) and the outer entity sums by
// m/|rows_u| (resp. n/|cols_v|).
Vec sg_block_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                      std::span<const std::size_t> rows_u, std::span<const std::size_t> cols_v);

// Per-pair estimator: o1 and o2 index observed pairs (row order).  o2 builds
// the Gramian estimates with weights a_i/|O_i| (resp. b_j/|O_j|) scaled by
// |O|/|o2|; o1 drives the outer sum scaled by |O|/|o1|.  With symmetrize the
// two sets swap roles and the estimates are averaged.
Vec sg_doubly_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                       std::span<const std::size_t> o1, std::span<const std::size_t> o2,
                       bool symmetrize = true);

// Smoothed Gramians for the one-sided per-pair estimator.
struct SogramState {
    DenseMatrix pc, qc, phat, qhat;  // zero-initialized k x k
    explicit SogramState(std::size_t k) : pc(k, k), qc(k, k), phat(k, k), qhat(k, k) {}
};

// Updates state <- (1-alpha)*state + alpha*(o2 Gramian estimate) before the
// step, then returns the o1-side estimate using the smoothed Gramians.
// alpha = 1 reproduces the one-sided per-pair estimate exactly.
Vec sogram_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                    std::span<const std::size_t> o1, std::span<const std::size_t> o2,
                    double alpha, SogramState& state);

// ---- outer loop ----

struct RunOptions {
    Method method = Method::gd;
    LineSearchConfig ls;
    CGConfig cg;
    SgConfig sg;
    std::size_t max_passes = 10;
    std::uint64_t seed = 1;
    std::size_t map_every = 1;  // evaluate ranking every N passes; 0 = never
    bool exclude_train = true;
    std::size_t map_k = 5;
    double time_budget_s = 0.0;  // stop after this much training time; 0 = none
};

struct RunResult {
    double initial_objective = 0.0;
    std::vector<TraceRecord> trace;
    Vec theta;
};

// Full-gradient methods log one row per iteration; per-pair methods log one
// row per data pass.  Wall times cover training work only (ranking metric
// and per-pass logging evaluations are excluded).
RunResult run(const PairwiseObjective& engine, Vec theta0, const RunOptions& opt,
              const SparseMatrixDual* test = nullptr);

}  // namespace towertrain
