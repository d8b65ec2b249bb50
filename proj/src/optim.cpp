#include "towertrain/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <unordered_set>

namespace towertrain {

Vec diag_scale(const Vec& g, AdaGradState& state) {
    if (state.accum.empty()) state.accum.assign(g.size(), 0.0);
    if (state.accum.size() != g.size()) throw DimensionError("diag_scale: state size mismatch");
    Vec s(g.size());
#pragma omp parallel for schedule(static)
    for (std::size_t t = 0; t < g.size(); ++t) {
        state.accum[t] += g[t] * g[t];
        s[t] = -g[t] / std::sqrt(state.mu + state.accum[t]);
    }
    return s;
}

LineSearchResult line_search(
    std::span<const double> theta, std::span<const double> s, double g_dot_s, double objective,
    const std::function<double(const Vec&, GramianCache&)>& evaluate, double delta_init,
    const LineSearchConfig& cfg) {
    if (theta.size() != s.size()) throw DimensionError("line_search: size mismatch");
    if (!(g_dot_s < 0.0))
        throw NumericError("line_search: requires a descent direction (s . grad < 0)");
    if (!(delta_init > 0.0)) throw ConfigError("line_search: delta_init must be positive");

    LineSearchResult out;
    out.theta.resize(theta.size());
    double delta = delta_init;
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    for (int trial = 0; trial < cfg.max_steps; ++trial) {
#pragma omp parallel for schedule(static)
        for (std::size_t t = 0; t < theta.size(); ++t) out.theta[t] = theta[t] + delta * s[t];
        double value = std::numeric_limits<double>::infinity();
        try {
            value = evaluate(out.theta, out.cache);
        } catch (const NumericError&) {
            // Overflow at a long step: treat as a rejected trial.
        }
        ++out.evals;
        if (std::isfinite(value)) last_finite = value;
        if (value <= objective + cfg.eta * delta * g_dot_s) {
            out.delta = delta;
            out.objective = value;
            out.accepted = true;
            return out;
        }
        delta *= 0.5;
    }
    if (cfg.accept_on_failure && std::isfinite(last_finite)) {
        out.delta = delta * 2.0;  // the smallest trial actually evaluated
        out.objective = last_finite;
        out.accepted = false;
        return out;
    }
    throw NumericError("line_search: no sufficient decrease within " +
                       std::to_string(cfg.max_steps) + " trials");
}

CGResult cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& g,
                  const CGConfig& cfg, double lambda_floor) {
    if (!(cfg.xi >= 0.0)) throw ConfigError("cg_solve: xi must be nonnegative");
    if (cfg.max_iters < 1) throw ConfigError("cg_solve: max_iters must be positive");

    CGResult out;
    out.s.assign(g.size(), 0.0);
    Vec r(g.size());
    for (std::size_t t = 0; t < g.size(); ++t) r[t] = -g[t];
    Vec d = r;
    double gamma = dot(r, r);
    const double gamma0 = gamma;
    out.residual0 = std::sqrt(gamma0);
    out.residual = out.residual0;
    if (gamma0 == 0.0) return out;

    bool warned = false;
    for (int it = 1; it <= cfg.max_iters; ++it) {
        const Vec gd = apply(d);
        const double dgd = dot(d, gd);
        if (lambda_floor > 0.0 && !warned && dgd < lambda_floor * dot(d, d)) {
            std::fprintf(stderr,
                         "warning: curvature %.6g below the ridge floor; the curvature model "
                         "may have lost positive definiteness\n",
                         dgd);
            warned = true;
        }
        if (dgd <= 0.0) {
            out.negative_curvature = true;
            if (it == 1) out.s = r;  // fall back to steepest descent
            break;
        }
        const double t = gamma / dgd;
        axpy(t, d, out.s);
        axpy(-t, gd, r);
        const double gamma_new = dot(r, r);
        out.iters = std::size_t(it);
        out.residual = std::sqrt(gamma_new);
        if (out.residual <= cfg.xi * out.residual0) break;
        const double beta = gamma_new / gamma;
#pragma omp parallel for schedule(static)
        for (std::size_t tt = 0; tt < d.size(); ++tt) d[tt] = r[tt] + beta * d[tt];
        gamma = gamma_new;
    }
    return out;
}

Method parse_method(const std::string& name) {
    if (name == "gd") return Method::gd;
    if (name == "gd-diag") return Method::gd_diag;
    if (name == "newton") return Method::newton;
    if (name == "sampling") return Method::sampling;
    if (name == "sampling-diag") return Method::sampling_diag;
    if (name == "sg-doubly") return Method::sg_doubly;
    if (name == "sogram") return Method::sogram;
    if (name == "sogram-diag") return Method::sogram_diag;
    throw ConfigError("unknown method '" + name + "'");
}

const char* method_name(Method m) {
    switch (m) {
        case Method::gd: return "gd";
        case Method::gd_diag: return "gd-diag";
        case Method::newton: return "newton";
        case Method::sampling: return "sampling";
        case Method::sampling_diag: return "sampling-diag";
        case Method::sg_doubly: return "sg-doubly";
        case Method::sogram: return "sogram";
        case Method::sogram_diag: return "sogram-diag";
    }
    return "?";
}

bool is_full_batch(Method m) {
    return m == Method::gd || m == Method::gd_diag || m == Method::newton;
}

bool is_diag_scaled(Method m) {
    return m == Method::gd_diag || m == Method::sampling_diag || m == Method::sogram_diag;
}

namespace {

void check_entity_sample(std::span<const std::size_t> ids, std::size_t bound, const char* what) {
    if (ids.empty()) throw ConfigError(std::string(what) + ": empty sample");
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= bound) throw DimensionError(std::string(what) + ": id out of range");
        if (t > 0 && ids[t] <= ids[t - 1])
            throw DimensionError(std::string(what) + ": ids must be ascending and distinct");
    }
}

void add_scaled_row(double* dst, const double* src, double w, std::size_t k) {
    for (std::size_t c = 0; c < k; ++c) dst[c] += w * src[c];
}

// dst += w * (row . mat), mat k x k row-major.
void add_row_times(double* dst, const double* row, const DenseMatrix& mat, double w,
                   std::size_t k) {
    for (std::size_t d = 0; d < k; ++d) {
        const double v = w * row[d];
        const double* mrow = mat.row(d);
        for (std::size_t c = 0; c < k; ++c) dst[c] += v * mrow[c];
    }
}

}  // namespace

Vec sg_block_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                      std::span<const std::size_t> rows_u, std::span<const std::size_t> cols_v) {
    const ProblemData& d = engine.data();
    check_entity_sample(rows_u, d.m(), "sg_block: rows");
    check_entity_sample(cols_v, d.n(), "sg_block: cols");
    const std::size_t k = d.k();
    const double fu = double(d.m()) / double(rows_u.size());
    const double fv = double(d.n()) / double(cols_v.size());

    ForwardTape tape_u, tape_v;
    const DenseMatrix p = engine.tower_u().forward(engine.theta_u(theta), d.feats_u, rows_u,
                                                   &tape_u);
    const DenseMatrix q = engine.tower_v().forward(engine.theta_v(theta), d.feats_v, cols_v,
                                                   &tape_v);

    DenseMatrix cu(rows_u.size(), k), cv(cols_v.size(), k);

    // Observed pairs inside the sampled block, scaled by (m*n)/(mhat*nhat).
    std::vector<std::ptrdiff_t> col_pos(d.n(), -1);
    for (std::size_t c = 0; c < cols_v.size(); ++c) col_pos[cols_v[c]] = std::ptrdiff_t(c);
    const auto rp = d.observed.row_ptr();
    const auto ci = d.observed.col_idx();
    const auto labels = d.observed.values();
    const double fobs = fu * fv;
    for (std::size_t r = 0; r < rows_u.size(); ++r) {
        const std::size_t i = rows_u[r];
        for (std::size_t pp = rp[i]; pp < rp[i + 1]; ++pp) {
            const std::ptrdiff_t c = col_pos[ci[pp]];
            if (c < 0) continue;
            const std::size_t j = ci[pp];
            double yhat = 0.0;
            for (std::size_t cc = 0; cc < k; ++cc) yhat += p(r, cc) * q(std::size_t(c), cc);
            const LossTerms lt = loss_terms(d.loss, labels[pp], yhat);
            const double x =
                fobs * (lt.first + d.omega * d.a[i] * d.b[j] * (d.imputed_labels[pp] - yhat));
            add_scaled_row(cu.row(r), q.row(std::size_t(c)), x, k);
            add_scaled_row(cv.row(std::size_t(c)), p.row(r), x, k);
        }
    }

    if (d.omega != 0.0) {
        // Block Gramians: inner sums scaled by n/nhat (resp. m/mhat), outer
        // entity sums by m/mhat (resp. n/nhat).
        Vec wa(rows_u.size()), wb(cols_v.size());
        DenseMatrix pt(rows_u.size(), k), qt(cols_v.size(), k);
        for (std::size_t r = 0; r < rows_u.size(); ++r) {
            wa[r] = fu * d.a[rows_u[r]];
            for (std::size_t c = 0; c < k; ++c) pt(r, c) = d.imput_p(rows_u[r], c);
        }
        for (std::size_t ccc = 0; ccc < cols_v.size(); ++ccc) {
            wb[ccc] = fv * d.b[cols_v[ccc]];
            for (std::size_t c = 0; c < k; ++c) qt(ccc, c) = d.imput_q(cols_v[ccc], c);
        }
        const DenseMatrix qc = weighted_gram(q, wb, q);      // ~ Q^T B Q
        const DenseMatrix qhat = weighted_gram(q, wb, qt);   // ~ Qtilde^T B Q
        const DenseMatrix pc = weighted_gram(p, wa, p);
        const DenseMatrix phat = weighted_gram(p, wa, pt);
        for (std::size_t r = 0; r < rows_u.size(); ++r) {
            const double w = d.omega * fu * d.a[rows_u[r]];
            add_row_times(cu.row(r), p.row(r), qc, w, k);
            add_row_times(cu.row(r), pt.row(r), qhat, -w, k);
        }
        for (std::size_t c = 0; c < cols_v.size(); ++c) {
            const double w = d.omega * fv * d.b[cols_v[c]];
            add_row_times(cv.row(c), q.row(c), pc, w, k);
            add_row_times(cv.row(c), qt.row(c), phat, -w, k);
        }
    }

    Vec grad = engine.tower_u().vjp(engine.theta_u(theta), d.feats_u, tape_u, cu);
    Vec gv = engine.tower_v().vjp(engine.theta_v(theta), d.feats_v, tape_v, cv);
    grad.insert(grad.end(), gv.begin(), gv.end());
    if (d.lambda != 0.0) axpy(d.lambda, theta, grad);
    if (!all_finite(grad)) throw NumericError("sg_block: non-finite estimate");
    return grad;
}

namespace {

struct PairSides {
    std::vector<std::size_t> rows, cols;  // distinct ascending entity ids
    std::vector<std::size_t> rpos, cpos;  // per pair: position within rows/cols
};

PairSides pair_sides(const ProblemData& d, std::span<const std::size_t> pairs,
                     const char* what) {
    if (pairs.empty()) throw ConfigError(std::string(what) + ": empty sample");
    PairSides s;
    s.rows.reserve(pairs.size());
    s.cols.reserve(pairs.size());
    const auto ci = d.observed.col_idx();
    for (std::size_t p : pairs) {
        if (p >= d.observed.nnz())
            throw DimensionError(std::string(what) + ": pair index out of range");
        s.rows.push_back(d.pair_row[p]);
        s.cols.push_back(ci[p]);
    }
    std::sort(s.rows.begin(), s.rows.end());
    s.rows.erase(std::unique(s.rows.begin(), s.rows.end()), s.rows.end());
    std::sort(s.cols.begin(), s.cols.end());
    s.cols.erase(std::unique(s.cols.begin(), s.cols.end()), s.cols.end());
    s.rpos.reserve(pairs.size());
    s.cpos.reserve(pairs.size());
    for (std::size_t p : pairs) {
        s.rpos.push_back(std::size_t(
            std::lower_bound(s.rows.begin(), s.rows.end(), d.pair_row[p]) - s.rows.begin()));
        s.cpos.push_back(
            std::size_t(std::lower_bound(s.cols.begin(), s.cols.end(), ci[p]) - s.cols.begin()));
    }
    return s;
}

struct PairGramians {
    DenseMatrix pc, qc, phat, qhat;
};

// Gramian estimates over a pair sample: sum of abar_i p_i p_i^T etc. scaled
// by count/|sample|.
PairGramians pair_gramians(const PairwiseObjective& engine, std::span<const double> theta,
                           std::span<const std::size_t> pairs) {
    const ProblemData& d = engine.data();
    const PairSides sides = pair_sides(d, pairs, "pair_gramians");
    const std::size_t k = d.k();
    const double scale = double(d.observed.nnz()) / double(pairs.size());
    const auto ci = d.observed.col_idx();

    const DenseMatrix p =
        engine.tower_u().forward(engine.theta_u(theta), d.feats_u, sides.rows, nullptr);
    const DenseMatrix q =
        engine.tower_v().forward(engine.theta_v(theta), d.feats_v, sides.cols, nullptr);

    DenseMatrix pg(pairs.size(), k), ptg(pairs.size(), k), qg(pairs.size(), k),
        qtg(pairs.size(), k);
    Vec wa(pairs.size()), wb(pairs.size());
    for (std::size_t t = 0; t < pairs.size(); ++t) {
        const std::size_t pair = pairs[t];
        const std::size_t i = d.pair_row[pair];
        const std::size_t j = ci[pair];
        wa[t] = scale * d.a_bar[i];
        wb[t] = scale * d.b_bar[j];
        const double* prow = p.row(sides.rpos[t]);
        const double* qrow = q.row(sides.cpos[t]);
        for (std::size_t c = 0; c < k; ++c) {
            pg(t, c) = prow[c];
            qg(t, c) = qrow[c];
            ptg(t, c) = d.imput_p(i, c);
            qtg(t, c) = d.imput_q(j, c);
        }
    }
    PairGramians g;
    g.pc = weighted_gram(pg, wa, pg);
    g.phat = weighted_gram(pg, wa, ptg);
    g.qc = weighted_gram(qg, wb, qg);
    g.qhat = weighted_gram(qg, wb, qtg);
    return g;
}

// Outer estimate over a pair sample given Gramian estimates; excludes the
// ridge term.
Vec pair_outer(const PairwiseObjective& engine, std::span<const double> theta,
               std::span<const std::size_t> pairs, const PairGramians& g) {
    const ProblemData& d = engine.data();
    const PairSides sides = pair_sides(d, pairs, "pair_outer");
    const std::size_t k = d.k();
    const double scale = double(d.observed.nnz()) / double(pairs.size());
    const auto ci = d.observed.col_idx();
    const auto labels = d.observed.values();

    ForwardTape tape_u, tape_v;
    const DenseMatrix p =
        engine.tower_u().forward(engine.theta_u(theta), d.feats_u, sides.rows, &tape_u);
    const DenseMatrix q =
        engine.tower_v().forward(engine.theta_v(theta), d.feats_v, sides.cols, &tape_v);

    DenseMatrix cu(sides.rows.size(), k), cv(sides.cols.size(), k);
    std::vector<std::size_t> row_hits(sides.rows.size(), 0), col_hits(sides.cols.size(), 0);
    for (std::size_t t = 0; t < pairs.size(); ++t) {
        const std::size_t pair = pairs[t];
        const std::size_t i = d.pair_row[pair];
        const std::size_t j = ci[pair];
        const std::size_t r = sides.rpos[t];
        const std::size_t c = sides.cpos[t];
        double yhat = 0.0;
        for (std::size_t cc = 0; cc < k; ++cc) yhat += p(r, cc) * q(c, cc);
        const LossTerms lt = loss_terms(d.loss, labels[pair], yhat);
        const double x =
            scale * (lt.first + d.omega * d.a[i] * d.b[j] * (d.imputed_labels[pair] - yhat));
        add_scaled_row(cu.row(r), q.row(c), x, k);
        add_scaled_row(cv.row(c), p.row(r), x, k);
        ++row_hits[r];
        ++col_hits[c];
    }
    if (d.omega != 0.0) {
        for (std::size_t r = 0; r < sides.rows.size(); ++r) {
            const std::size_t i = sides.rows[r];
            const double w = scale * d.omega * d.a_bar[i] * double(row_hits[r]);
            add_row_times(cu.row(r), p.row(r), g.qc, w, k);
            add_row_times(cu.row(r), d.imput_p.row(i), g.qhat, -w, k);
        }
        for (std::size_t c = 0; c < sides.cols.size(); ++c) {
            const std::size_t j = sides.cols[c];
            const double w = scale * d.omega * d.b_bar[j] * double(col_hits[c]);
            add_row_times(cv.row(c), q.row(c), g.pc, w, k);
            add_row_times(cv.row(c), d.imput_q.row(j), g.phat, -w, k);
        }
    }

    Vec grad = engine.tower_u().vjp(engine.theta_u(theta), d.feats_u, tape_u, cu);
    Vec gv = engine.tower_v().vjp(engine.theta_v(theta), d.feats_v, tape_v, cv);
    grad.insert(grad.end(), gv.begin(), gv.end());
    return grad;
}

}  // namespace

Vec sg_doubly_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                       std::span<const std::size_t> o1, std::span<const std::size_t> o2,
                       bool symmetrize) {
    Vec grad = pair_outer(engine, theta, o1, pair_gramians(engine, theta, o2));
    if (symmetrize) {
        const Vec swapped = pair_outer(engine, theta, o2, pair_gramians(engine, theta, o1));
        for (std::size_t t = 0; t < grad.size(); ++t) grad[t] = 0.5 * (grad[t] + swapped[t]);
    }
    const ProblemData& d = engine.data();
    if (d.lambda != 0.0) axpy(d.lambda, theta, grad);
    if (!all_finite(grad)) throw NumericError("sg_doubly: non-finite estimate");
    return grad;
}

Vec sogram_gradient(const PairwiseObjective& engine, std::span<const double> theta,
                    std::span<const std::size_t> o1, std::span<const std::size_t> o2,
                    double alpha, SogramState& state) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("sogram: alpha must lie in [0, 1]");
    const std::size_t k = engine.data().k();
    if (state.pc.rows() != k) throw DimensionError("sogram: state width mismatch");

    const PairGramians fresh = pair_gramians(engine, theta, o2);
    const auto blend = [alpha](DenseMatrix& acc, const DenseMatrix& upd) {
        for (std::size_t t = 0; t < acc.size(); ++t)
            acc.data()[t] = (1.0 - alpha) * acc.data()[t] + alpha * upd.data()[t];
    };
    blend(state.pc, fresh.pc);
    blend(state.qc, fresh.qc);
    blend(state.phat, fresh.phat);
    blend(state.qhat, fresh.qhat);

    PairGramians smoothed;
    smoothed.pc = state.pc;
    smoothed.qc = state.qc;
    smoothed.phat = state.phat;
    smoothed.qhat = state.qhat;
    Vec grad = pair_outer(engine, theta, o1, smoothed);
    const ProblemData& d = engine.data();
    if (d.lambda != 0.0) axpy(d.lambda, theta, grad);
    if (!all_finite(grad)) throw NumericError("sogram: non-finite estimate");
    return grad;
}

namespace {

std::size_t uniform_below(std::mt19937_64& eng, std::size_t bound) {
    const std::uint64_t span = std::uint64_t(bound);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t v;
    do {
        v = eng();
    } while (v >= limit);
    return std::size_t(v % span);
}

// Uniform sample without replacement, ascending.
std::vector<std::size_t> sample_indices(std::mt19937_64& eng, std::size_t n,
                                        std::size_t count) {
    count = std::min(count, n);
    std::unordered_set<std::size_t> chosen;
    chosen.reserve(count * 2);
    for (std::size_t j = n - count; j < n; ++j) {
        const std::size_t t = uniform_below(eng, j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::vector<std::size_t> out(chosen.begin(), chosen.end());
    std::sort(out.begin(), out.end());
    return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunResult run(const PairwiseObjective& engine, Vec theta0, const RunOptions& opt,
              const SparseMatrixDual* test) {
    if (theta0.size() != engine.dim()) throw DimensionError("run: theta size mismatch");

    RunResult res;
    res.theta = std::move(theta0);
    const ProblemData& data = engine.data();
    GramianCache cache;
    std::uint64_t next_version = 0;
    double train_time = 0.0;
    using clock = std::chrono::steady_clock;

    const auto maybe_map = [&](TraceRecord& rec, std::size_t pass) {
        if (!test || opt.map_every == 0 || pass % opt.map_every != 0) return;
        rec.map_at_5 = map_at_k(cache.P.values, cache.Q.values, *test, opt.map_k,
                                opt.exclude_train ? &data.observed : nullptr);
    };

    if (is_full_batch(opt.method)) {
        auto t0 = clock::now();
        double value = engine.objective(res.theta, next_version++, cache);
        res.initial_objective = value;
        AdaGradState ada;
        ada.accum.assign(engine.dim(), 0.0);
        double delta_prev = 1.0;
        for (std::size_t iter = 1; iter <= opt.max_passes; ++iter) {
            t0 = clock::now();
            const std::uint64_t at = cache.theta_version;
            Vec g = engine.gradient(res.theta, at, cache);
            Vec s;
            std::size_t ncg = 0;
            if (opt.method == Method::gd) {
                s.resize(g.size());
                for (std::size_t t = 0; t < g.size(); ++t) s[t] = -g[t];
            } else if (opt.method == Method::gd_diag) {
                s = diag_scale(g, ada);
            } else {
                const auto apply = [&](const Vec& dvec) {
                    return engine.gn_product(res.theta, dvec, at, cache);
                };
                CGResult cg = cg_solve(apply, g, opt.cg, data.lambda);
                s = std::move(cg.s);
                ncg = cg.iters;
            }
            const double gs = dot(g, s);
            if (gs == 0.0) {
                // Stationary point: log the null step and stop.
                train_time += seconds_since(t0);
                TraceRecord rec;
                rec.pass = iter;
                rec.step = iter;
                rec.wall_time_s = train_time;
                rec.objective = value;
                rec.n_cg = ncg;
                maybe_map(rec, iter);
                res.trace.push_back(rec);
                break;
            }

            double dinit = 1.0;
            if (opt.method != Method::newton) {
                dinit = delta_prev;
                if (opt.ls.init_doubling_period > 0 &&
                    iter % std::size_t(opt.ls.init_doubling_period) == 0)
                    dinit *= 2.0;
            }
            const auto evaluate = [&](const Vec& th, GramianCache& c) {
                return engine.objective(th, next_version++, c);
            };
            LineSearchResult lsr = line_search(res.theta, s, gs, value, evaluate, dinit, opt.ls);
            res.theta = std::move(lsr.theta);
            cache = std::move(lsr.cache);
            value = lsr.objective;
            delta_prev = lsr.delta;
            train_time += seconds_since(t0);

            TraceRecord rec;
            rec.pass = iter;
            rec.step = iter;
            rec.wall_time_s = train_time;
            rec.objective = value;
            rec.step_size = lsr.delta;
            rec.n_line_search = lsr.evals;
            rec.n_cg = ncg;
            rec.dir_dot_grad = gs;
            maybe_map(rec, iter);
            res.trace.push_back(rec);
            if (opt.time_budget_s > 0.0 && train_time >= opt.time_budget_s) break;
        }
        return res;
    }

    // Per-pair / per-block stochastic methods.
    const std::size_t nnz = data.observed.nnz();
    const bool entity_block =
        opt.method == Method::sampling || opt.method == Method::sampling_diag;
    if (!entity_block && nnz == 0)
        throw DataError("run: per-pair methods need at least one observed pair");
    if (!(opt.sg.rho > 0.0 && opt.sg.rho <= 1.0))
        throw ConfigError("run: sampling fraction must lie in (0, 1]");

    const double delta =
        opt.sg.step_size > 0.0 ? opt.sg.step_size
                               : (is_diag_scaled(opt.method) ? 0.01 : std::pow(2.0, -25));
    std::size_t rows_per_step = 0, cols_per_step = 0, pairs_per_step = 0, steps_per_pass = 0;
    if (entity_block) {
        rows_per_step = std::max<std::size_t>(1, std::size_t(std::llround(opt.sg.rho * double(data.m()))));
        cols_per_step = std::max<std::size_t>(1, std::size_t(std::llround(opt.sg.rho * double(data.n()))));
        steps_per_pass = std::size_t(std::ceil(1.0 / opt.sg.rho));
    } else {
        pairs_per_step = std::max<std::size_t>(1, std::size_t(std::llround(opt.sg.rho * double(nnz))));
        steps_per_pass = (nnz + pairs_per_step - 1) / pairs_per_step;
    }

    res.initial_objective = engine.objective(res.theta, next_version, cache);
    std::mt19937_64 eng(opt.seed);
    AdaGradState ada;
    ada.accum.assign(engine.dim(), 0.0);
    SogramState sg_state(data.k());
    std::size_t steps = 0;
    for (std::size_t pass = 1; pass <= opt.max_passes; ++pass) {
        const auto t0 = clock::now();
        for (std::size_t t = 0; t < steps_per_pass; ++t) {
            Vec ghat;
            if (entity_block) {
                const auto rows = sample_indices(eng, data.m(), rows_per_step);
                const auto cols = sample_indices(eng, data.n(), cols_per_step);
                ghat = sg_block_gradient(engine, res.theta, rows, cols);
            } else {
                const auto o1 = sample_indices(eng, nnz, pairs_per_step);
                const auto o2 = sample_indices(eng, nnz, pairs_per_step);
                if (opt.method == Method::sg_doubly)
                    ghat = sg_doubly_gradient(engine, res.theta, o1, o2, true);
                else
                    ghat = sogram_gradient(engine, res.theta, o1, o2, opt.sg.alpha, sg_state);
            }
            if (is_diag_scaled(opt.method)) {
                const Vec s = diag_scale(ghat, ada);
                axpy(delta, s, res.theta);
            } else {
                axpy(-delta, ghat, res.theta);
            }
            ++next_version;
            ++steps;
        }
        train_time += seconds_since(t0);

        TraceRecord rec;
        rec.pass = pass;
        rec.step = steps;
        rec.wall_time_s = train_time;
        rec.objective = engine.objective(res.theta, next_version, cache);
        rec.step_size = delta;
        maybe_map(rec, pass);
        res.trace.push_back(rec);
        if (opt.time_budget_s > 0.0 && train_time >= opt.time_budget_s) break;
    }
    return res;
}

}  // namespace towertrain
