#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "towertrain/optim.hpp"
#include "towertrain/synth.hpp"

using namespace towertrain;

namespace {

double urand(std::mt19937_64& eng) { return double(eng() >> 11) * 0x1p-53; }

Vec random_vec(std::mt19937_64& eng, std::size_t n) {
    Vec v(n);
    for (double& x : v) x = 2.0 * urand(eng) - 1.0;
    return v;
}

double rel_gap(const Vec& got, const Vec& want) {
    REQUIRE(got.size() == want.size());
    Vec diff(got.size());
    for (std::size_t t = 0; t < got.size(); ++t) diff[t] = got[t] - want[t];
    return norm2(diff) / std::max(1.0, norm2(want));
}

std::vector<std::size_t> iota_ids(std::size_t n) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return ids;
}

// Regularizer-only problem: no observed pairs and no all-pairs term, so the
// objective is exactly lambda/2 * |theta|^2.
PairwiseObjective quadratic_engine(double lambda) {
    TowerSpec s;
    s.input_mode = InputMode::one_hot;
    s.input_dim = 3;
    s.output_dim = 2;
    return PairwiseObjective(
        s, s,
        make_problem(SparseMatrixDual(3, 3, {}), FeatureSet::one_hot(3), FeatureSet::one_hot(3),
                     Vec(3, 1.0), Vec(3, 1.0), DenseMatrix(3, 2), DenseMatrix(3, 2), 0.0, lambda,
                     LossKind::logistic));
}

}  // namespace

TEST_CASE("diagonal scaling") {
    AdaGradState st;
    const Vec s1 = diag_scale(Vec{3.0, 4.0}, st);
    CHECK(s1[0] == doctest::Approx(-1.0).epsilon(1e-8));
    CHECK(s1[1] == doctest::Approx(-1.0).epsilon(1e-8));
    CHECK(st.accum == Vec{9.0, 16.0});
    const Vec s2 = diag_scale(Vec{3.0, 0.0}, st);
    CHECK(s2[0] == doctest::Approx(-3.0 / std::sqrt(18.0 + st.mu)).epsilon(1e-14));
    CHECK(s2[1] == 0.0);
    CHECK(st.accum == Vec{18.0, 16.0});
    const Vec s3 = diag_scale(Vec{0.0, 0.0}, st);
    CHECK(s3 == Vec{0.0, 0.0});
    CHECK(st.accum == Vec{18.0, 16.0});
    CHECK_THROWS_AS(diag_scale(Vec{1.0, 2.0, 3.0}, st), DimensionError);
}

TEST_CASE("line search") {
    // f(x) = 1/2 |x|^2 evaluated through the callback.
    const auto quad = [](const Vec& th, GramianCache&) {
        double v = 0.0;
        for (double x : th) v += 0.5 * x * x;
        return v;
    };
    LineSearchConfig cfg;

    SUBCASE("full step accepted at once") {
        const Vec theta{2.0, 0.0}, s{-2.0, 0.0};
        const auto r = line_search(theta, s, -4.0, 2.0, quad, 1.0, cfg);
        CHECK(r.accepted);
        CHECK(r.delta == 1.0);
        CHECK(r.evals == 1);
        CHECK(r.objective == 0.0);
        CHECK(r.theta == Vec{0.0, 0.0});
    }
    SUBCASE("halves an overlong step") {
        const Vec theta{4.0}, s{-8.0};  // delta=1 overshoots to -4, delta=1/2 lands at 0
        const auto r = line_search(theta, s, -32.0, 8.0, quad, 1.0, cfg);
        CHECK(r.accepted);
        CHECK(r.delta == 0.5);
        CHECK(r.evals == 2);
        CHECK(r.objective == 0.0);
    }
    SUBCASE("rejects ascent directions and bad steps") {
        const Vec theta{1.0}, s{1.0};
        CHECK_THROWS_AS(line_search(theta, s, 4.0, 0.5, quad, 1.0, cfg), NumericError);
        CHECK_THROWS_AS(line_search(theta, Vec{-1.0}, -1.0, 0.5, quad, 0.0, cfg), ConfigError);
    }
    SUBCASE("an overflow trial counts as rejected") {
        const auto fragile = [&](const Vec& th, GramianCache& c) {
            if (std::abs(th[0]) > 1.5) throw NumericError("boom");
            return quad(th, c);
        };
        const Vec theta{1.0}, s{-4.0};  // delta=1 -> -3 (throws), 1/2 -> -1, 1/4 -> 0
        const auto r = line_search(theta, s, -4.0, 0.5, fragile, 1.0, cfg);
        CHECK(r.accepted);
        CHECK(r.delta == 0.25);
        CHECK(r.evals == 3);
        CHECK(r.objective == 0.0);
    }
    SUBCASE("exhaustion throws unless told to accept") {
        const auto flat = [](const Vec&, GramianCache&) { return 1.0; };
        const Vec theta{1.0}, s{-1.0};
        cfg.max_steps = 4;
        CHECK_THROWS_AS(line_search(theta, s, -1.0, 1.0, flat, 1.0, cfg), NumericError);
        cfg.accept_on_failure = true;
        const auto r = line_search(theta, s, -1.0, 1.0, flat, 1.0, cfg);
        CHECK_FALSE(r.accepted);
        CHECK(r.evals == 4);
        CHECK(r.delta == doctest::Approx(0.125).epsilon(1e-15));  // smallest trial tried
        CHECK(r.objective == 1.0);
        // ... but a search that never saw a finite value still aborts.
        const auto always = [](const Vec&, GramianCache&) -> double {
            throw NumericError("boom");
        };
        CHECK_THROWS_AS(line_search(theta, s, -1.0, 1.0, always, 1.0, cfg), NumericError);
    }
}

TEST_CASE("conjugate gradient") {
    CGConfig cfg;
    SUBCASE("identity solves in one iteration") {
        const Vec g{1.0, -2.0, 3.0};
        const auto r = cg_solve([](const Vec& d) { return d; }, g, cfg);
        CHECK(r.iters == 1);
        CHECK_FALSE(r.negative_curvature);
        for (std::size_t t = 0; t < g.size(); ++t)
            CHECK(r.s[t] == doctest::Approx(-g[t]).epsilon(1e-14));
        CHECK(r.residual <= 1e-12 * r.residual0);
    }
    SUBCASE("two-dimensional diagonal system is exact in two iterations") {
        cfg.xi = 1e-14;
        const auto apply = [](const Vec& d) { return Vec{d[0], 4.0 * d[1]}; };
        const auto r = cg_solve(apply, Vec{1.0, 1.0}, cfg);
        CHECK(r.iters == 2);
        CHECK(r.s[0] == doctest::Approx(-1.0).epsilon(1e-12));
        CHECK(r.s[1] == doctest::Approx(-0.25).epsilon(1e-12));
    }
    SUBCASE("residual contract on random positive definite systems") {
        std::mt19937_64 eng(5);
        for (int rep = 0; rep < 20; ++rep) {
            const std::size_t n = 8 + eng() % 25;
            DenseMatrix A(n, n);
            for (std::size_t t = 0; t < A.size(); ++t) A.data()[t] = 2.0 * urand(eng) - 1.0;
            DenseMatrix G(n, n);  // A + A^T + 2n I is diagonally dominant SPD
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c)
                    G(r, c) = A(r, c) + A(c, r) + (r == c ? 2.0 * double(n) : 0.0);
            const auto apply = [&](const Vec& d) {
                Vec out(n, 0.0);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < n; ++c) out[r] += G(r, c) * d[c];
                return out;
            };
            const Vec g = random_vec(eng, n);
            const auto res = cg_solve(apply, g, cfg);
            CHECK_FALSE(res.negative_curvature);
            // reported residual must meet the tolerance or the cap
            const bool ok = res.residual <= cfg.xi * res.residual0 ||
                            res.iters == std::size_t(cfg.max_iters);
            CHECK(ok);
            // and it must agree with the actual residual -g - G s
            Vec actual = apply(res.s);
            for (std::size_t t = 0; t < n; ++t) actual[t] += g[t];
            CHECK(norm2(actual) <= res.residual + 1e-8 * (1.0 + res.residual0));
        }
    }
    SUBCASE("negative curvature falls back to steepest descent") {
        const Vec g{1.0, 2.0};
        const auto r = cg_solve([](const Vec& d) { return Vec{-d[0], -d[1]}; }, g, cfg);
        CHECK(r.negative_curvature);
        CHECK(r.s[0] == -1.0);
        CHECK(r.s[1] == -2.0);
    }
    SUBCASE("zero gradient returns the zero step") {
        const auto r = cg_solve([](const Vec& d) { return d; }, Vec{0.0, 0.0}, cfg);
        CHECK(r.iters == 0);
        CHECK(r.s == Vec{0.0, 0.0});
    }
}

TEST_CASE("method names") {
    const char* names[] = {"gd",            "gd-diag", "newton", "sampling",
                           "sampling-diag", "sg-doubly", "sogram", "sogram-diag"};
    for (const char* n : names) CHECK(std::string(method_name(parse_method(n))) == n);
    CHECK_THROWS_AS(parse_method("adam"), ConfigError);
    CHECK(is_full_batch(Method::gd));
    CHECK(is_full_batch(Method::newton));
    CHECK_FALSE(is_full_batch(Method::sogram));
    CHECK(is_diag_scaled(Method::sampling_diag));
    CHECK_FALSE(is_diag_scaled(Method::sg_doubly));
}

TEST_CASE("entity-block estimator") {
    const TinyInstance inst = random_tiny_instance(21, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
    GramianCache cache;
    const Vec full = engine.gradient(inst.theta, 0, cache);
    const std::size_t m = inst.data.m(), n = inst.data.n();

    SUBCASE("whole-population block reproduces the gradient") {
        const Vec got = sg_block_gradient(engine, inst.theta, iota_ids(m), iota_ids(n));
        CHECK(rel_gap(got, full) <= 1e-12);
    }
    SUBCASE("singleton enumeration averages back to the gradient") {
        Vec mean(engine.dim(), 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t ri[] = {i}, cj[] = {j};
                const Vec est = sg_block_gradient(engine, inst.theta, ri, cj);
                axpy(1.0 / double(m * n), est, mean);
            }
        CHECK(rel_gap(mean, full) <= 1e-10);
    }
    SUBCASE("sample validation") {
        const std::size_t bad_order[] = {1, 0};
        const std::size_t dup[] = {0, 0};
        const std::size_t oob[] = {m + 5};
        CHECK_THROWS_AS(sg_block_gradient(engine, inst.theta, {}, iota_ids(n)), ConfigError);
        if (m >= 2) {
            CHECK_THROWS_AS(sg_block_gradient(engine, inst.theta, bad_order, iota_ids(n)),
                            DimensionError);
            CHECK_THROWS_AS(sg_block_gradient(engine, inst.theta, dup, iota_ids(n)),
                            DimensionError);
        }
        CHECK_THROWS_AS(sg_block_gradient(engine, inst.theta, oob, iota_ids(n)),
                        DimensionError);
    }
}

TEST_CASE("per-pair estimator") {
    const TinyInstance inst = random_tiny_instance(33, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
    GramianCache cache;
    const Vec full = engine.gradient(inst.theta, 0, cache);
    const std::size_t nnz = inst.data.observed.nnz();
    REQUIRE(nnz >= 2);

    SUBCASE("whole observed set reproduces the gradient") {
        const auto all = iota_ids(nnz);
        const Vec one_sided = sg_doubly_gradient(engine, inst.theta, all, all, false);
        CHECK(rel_gap(one_sided, full) <= 1e-10);
        const Vec sym = sg_doubly_gradient(engine, inst.theta, all, all, true);
        CHECK(rel_gap(sym, full) <= 1e-10);
    }
    SUBCASE("singleton enumeration averages back to the gradient") {
        for (const bool sym : {false, true}) {
            Vec mean(engine.dim(), 0.0);
            for (std::size_t p1 = 0; p1 < nnz; ++p1)
                for (std::size_t p2 = 0; p2 < nnz; ++p2) {
                    const std::size_t o1[] = {p1}, o2[] = {p2};
                    const Vec est = sg_doubly_gradient(engine, inst.theta, o1, o2, sym);
                    axpy(1.0 / double(nnz * nnz), est, mean);
                }
            CHECK(rel_gap(mean, full) <= 1e-10);
        }
    }
}

TEST_CASE("smoothed per-pair estimator") {
    const TinyInstance inst = random_tiny_instance(47, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
    const std::size_t nnz = inst.data.observed.nnz();
    const std::size_t k = inst.data.k();
    const auto all = iota_ids(nnz);
    const std::size_t o1[] = {0}, o2[] = {nnz - 1};

    SUBCASE("no smoothing reproduces the one-sided estimate bit for bit") {
        SogramState st(k);
        const Vec got = sogram_gradient(engine, inst.theta, o1, o2, 1.0, st);
        const Vec want = sg_doubly_gradient(engine, inst.theta, o1, o2, false);
        CHECK(got == want);
    }
    SUBCASE("state blends geometrically") {
        SogramState fresh(k);
        (void)sogram_gradient(engine, inst.theta, o1, o2, 1.0, fresh);  // state = M
        SogramState st(k);
        (void)sogram_gradient(engine, inst.theta, o1, o2, 0.5, st);  // 0.5 M
        (void)sogram_gradient(engine, inst.theta, o1, o2, 0.5, st);  // 0.75 M
        for (std::size_t t = 0; t < st.pc.size(); ++t) {
            CHECK(st.pc.data()[t] == doctest::Approx(0.75 * fresh.pc.data()[t]).epsilon(1e-13));
            CHECK(st.qc.data()[t] == doctest::Approx(0.75 * fresh.qc.data()[t]).epsilon(1e-13));
            CHECK(st.phat.data()[t] ==
                  doctest::Approx(0.75 * fresh.phat.data()[t]).epsilon(1e-13));
            CHECK(st.qhat.data()[t] ==
                  doctest::Approx(0.75 * fresh.qhat.data()[t]).epsilon(1e-13));
        }
    }
    SUBCASE("fully smoothed estimates over the whole set match the gradient") {
        GramianCache cache;
        const Vec full = engine.gradient(inst.theta, 0, cache);
        SogramState st(k);
        const Vec got = sogram_gradient(engine, inst.theta, all, all, 1.0, st);
        CHECK(rel_gap(got, full) <= 1e-10);
    }
    SUBCASE("bad smoothing weight") {
        SogramState st(k);
        CHECK_THROWS_AS(sogram_gradient(engine, inst.theta, o1, o2, -0.1, st), ConfigError);
        CHECK_THROWS_AS(sogram_gradient(engine, inst.theta, o1, o2, 1.5, st), ConfigError);
    }
}

TEST_CASE("full-gradient driver") {
    const TinyInstance inst = random_tiny_instance(61, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);

    SUBCASE("descent with sufficient decrease at every accepted step") {
        for (const Method method : {Method::gd, Method::gd_diag, Method::newton}) {
            RunOptions opt;
            opt.method = method;
            opt.max_passes = 8;
            opt.map_every = 0;
            const RunResult res = run(engine, inst.theta, opt);
            REQUIRE(!res.trace.empty());
            double prev = res.initial_objective;
            for (const TraceRecord& rec : res.trace) {
                if (rec.step_size == 0.0) break;  // stationary tail row
                CHECK(rec.dir_dot_grad < 0.0);
                CHECK(rec.objective <=
                      prev + opt.ls.eta * rec.step_size * rec.dir_dot_grad);
                CHECK(rec.objective <= prev);
                prev = rec.objective;
            }
        }
    }
    SUBCASE("trace bookkeeping") {
        RunOptions opt;
        opt.max_passes = 5;
        opt.map_every = 0;
        const RunResult res = run(engine, inst.theta, opt);
        REQUIRE(res.trace.size() == 5);
        for (std::size_t t = 0; t < res.trace.size(); ++t) {
            CHECK(res.trace[t].pass == t + 1);
            CHECK(res.trace[t].step == t + 1);
            CHECK(res.trace[t].n_line_search >= 1);
            CHECK_FALSE(res.trace[t].map_at_5.has_value());
        }
        GramianCache cache;
        CHECK(res.initial_objective == engine.objective(inst.theta, 0, cache));
    }
    SUBCASE("same seed, same trajectory") {
        RunOptions opt;
        opt.max_passes = 4;
        const RunResult r1 = run(engine, inst.theta, opt);
        const RunResult r2 = run(engine, inst.theta, opt);
        REQUIRE(r1.trace.size() == r2.trace.size());
        CHECK(r1.theta == r2.theta);
        for (std::size_t t = 0; t < r1.trace.size(); ++t) {
            CHECK(r1.trace[t].objective == r2.trace[t].objective);
            CHECK(r1.trace[t].step_size == r2.trace[t].step_size);
        }
    }
    SUBCASE("stationary start logs a null step and stops") {
        const PairwiseObjective quad = quadratic_engine(0.7);
        RunOptions opt;
        opt.max_passes = 6;
        const RunResult res = run(quad, Vec(quad.dim(), 0.0), opt);
        REQUIRE(res.trace.size() == 1);
        CHECK(res.trace[0].step_size == 0.0);
        CHECK(res.trace[0].objective == 0.0);
        CHECK(res.theta == Vec(quad.dim(), 0.0));
    }
    SUBCASE("curvature steps solve a pure quadratic in one iteration") {
        const PairwiseObjective quad = quadratic_engine(0.5);
        std::mt19937_64 eng(7);
        const Vec theta0 = random_vec(eng, quad.dim());
        RunOptions opt;
        opt.method = Method::newton;
        opt.max_passes = 6;
        const RunResult res = run(quad, theta0, opt);
        REQUIRE(res.trace.size() == 2);  // the solving step, then the stationary row
        CHECK(res.trace[0].n_cg == 1);
        CHECK(res.trace[0].step_size == 1.0);
        CHECK(res.trace[0].objective == 0.0);
        CHECK(res.trace[1].step_size == 0.0);
        CHECK(res.theta == Vec(quad.dim(), 0.0));
    }
    SUBCASE("wrong parameter size") {
        RunOptions opt;
        CHECK_THROWS_AS(run(engine, Vec(engine.dim() + 1, 0.0), opt), DimensionError);
    }
}

TEST_CASE("stochastic driver") {
    const TinyInstance inst = random_tiny_instance(73, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
    const std::size_t nnz = inst.data.observed.nnz();

    SUBCASE("pass bookkeeping for per-pair methods") {
        RunOptions opt;
        opt.method = Method::sg_doubly;
        opt.max_passes = 3;
        opt.sg.rho = 0.5;
        opt.map_every = 0;
        const RunResult res = run(engine, inst.theta, opt);
        REQUIRE(res.trace.size() == 3);
        const std::size_t pps = std::max<std::size_t>(
            1, std::size_t(std::llround(0.5 * double(nnz))));
        const std::size_t spp = (nnz + pps - 1) / pps;
        for (std::size_t t = 0; t < 3; ++t) {
            CHECK(res.trace[t].pass == t + 1);
            CHECK(res.trace[t].step == (t + 1) * spp);
            CHECK(res.trace[t].step_size == std::pow(2.0, -25));
            CHECK(std::isfinite(res.trace[t].objective));
        }
    }
    SUBCASE("entity-block bookkeeping and default step size") {
        RunOptions opt;
        opt.method = Method::sampling_diag;
        opt.max_passes = 2;
        opt.sg.rho = 0.5;
        opt.map_every = 0;
        const RunResult res = run(engine, inst.theta, opt);
        REQUIRE(res.trace.size() == 2);
        CHECK(res.trace[0].step == 2);  // ceil(1/0.5) steps per pass
        CHECK(res.trace[0].step_size == 0.01);
    }
    SUBCASE("deterministic under the seed") {
        for (const Method method : {Method::sampling, Method::sg_doubly, Method::sogram,
                                    Method::sogram_diag}) {
            RunOptions opt;
            opt.method = method;
            opt.max_passes = 2;
            opt.sg.rho = 0.5;
            opt.seed = 99;
            opt.map_every = 0;
            const RunResult r1 = run(engine, inst.theta, opt);
            const RunResult r2 = run(engine, inst.theta, opt);
            CHECK(r1.theta == r2.theta);
            REQUIRE(r1.trace.size() == r2.trace.size());
            for (std::size_t t = 0; t < r1.trace.size(); ++t)
                CHECK(r1.trace[t].objective == r2.trace[t].objective);
        }
    }
    SUBCASE("small steps keep the objective finite and near the start") {
        RunOptions opt;
        opt.method = Method::sogram;
        opt.max_passes = 4;
        opt.sg.rho = 0.5;
        opt.map_every = 0;
        const RunResult res = run(engine, inst.theta, opt);
        for (const TraceRecord& rec : res.trace)
            CHECK(std::abs(rec.objective - res.initial_objective) <=
                  0.5 * (1.0 + std::abs(res.initial_objective)));
    }
    SUBCASE("validation") {
        RunOptions opt;
        opt.method = Method::sg_doubly;
        opt.sg.rho = 0.0;
        CHECK_THROWS_AS(run(engine, inst.theta, opt), ConfigError);
        opt.sg.rho = 1.5;
        CHECK_THROWS_AS(run(engine, inst.theta, opt), ConfigError);
        opt.sg.rho = 0.5;
        const PairwiseObjective empty = quadratic_engine(0.5);
        CHECK_THROWS_AS(run(empty, Vec(empty.dim(), 0.0), opt), DataError);
    }
}

TEST_CASE("ranking metric hookup") {
    const TinyInstance inst = random_tiny_instance(85, /*full_coverage=*/true);
    const PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
    const SparseMatrixDual test(inst.data.m(), inst.data.n(),
                                {{0, inst.data.n() - 1, 1.0}});
    RunOptions opt;
    opt.max_passes = 4;
    opt.map_every = 2;
    opt.exclude_train = false;
    const RunResult res = run(engine, inst.theta, opt, &test);
    REQUIRE(res.trace.size() == 4);
    CHECK_FALSE(res.trace[0].map_at_5.has_value());
    CHECK(res.trace[1].map_at_5.has_value());
    CHECK_FALSE(res.trace[2].map_at_5.has_value());
    CHECK(res.trace[3].map_at_5.has_value());
    CHECK(*res.trace[1].map_at_5 >= 0.0);
    CHECK(*res.trace[1].map_at_5 <= 1.0);
}
