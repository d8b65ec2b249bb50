#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <random>

#include "doctest.h"
#include "towertrain/tower.hpp"

using namespace towertrain;

namespace {

double urand(std::mt19937_64& eng) { return double(eng() >> 11) * 0x1p-53; }
double rrand(std::mt19937_64& eng, double lo, double hi) { return lo + (hi - lo) * urand(eng); }

TowerSpec random_spec(std::mt19937_64& eng, std::size_t entities) {
    TowerSpec s;
    if (eng() % 2) {
        s.input_mode = InputMode::one_hot;
        s.input_dim = entities;
    } else {
        s.input_mode = InputMode::dense;
        s.input_dim = 1 + eng() % 4;
    }
    const std::size_t layers = eng() % 3;
    for (std::size_t l = 0; l < layers; ++l) s.hidden.push_back(1 + eng() % 5);
    s.output_dim = 1 + eng() % 4;
    return s;
}

FeatureSet random_feats(std::mt19937_64& eng, const TowerSpec& s, std::size_t entities) {
    if (s.input_mode == InputMode::one_hot) return FeatureSet::one_hot(entities);
    DenseMatrix rows(entities, s.input_dim);
    for (std::size_t t = 0; t < rows.size(); ++t) rows.data()[t] = rrand(eng, -1.5, 1.5);
    return FeatureSet::dense(std::move(rows));
}

Vec random_params(std::mt19937_64& eng, const Tower& t) {
    Vec th = t.init_params(eng());
    for (double& x : th) x += rrand(eng, -0.5, 0.5);
    return th;
}

}  // namespace

TEST_CASE("parameter layout and counting") {
    TowerSpec s;
    s.input_mode = InputMode::dense;
    s.input_dim = 3;
    s.hidden = {2};
    s.output_dim = 1;
    Tower t(s);
    CHECK(t.param_count() == 11);  // 3*2+2 + 2*1+1
    REQUIRE(t.layer_count() == 2);
    CHECK(t.layers()[0].w_off == 0);
    CHECK(t.layers()[0].b_off == 6);
    CHECK(t.layers()[0].in == 3);
    CHECK(t.layers()[0].out == 2);
    CHECK(t.layers()[1].w_off == 8);
    CHECK(t.layers()[1].b_off == 10);

    TowerSpec bad = s;
    bad.output_dim = 0;
    CHECK_THROWS_AS((void)Tower{bad}, ConfigError);
}

TEST_CASE("initialization") {
    TowerSpec s;
    s.input_mode = InputMode::one_hot;
    s.input_dim = 5;
    s.hidden = {4};
    s.output_dim = 3;
    Tower t(s);
    const Vec a = t.init_params(42), b = t.init_params(42), c = t.init_params(43);
    CHECK(a == b);
    CHECK(a != c);
    for (const auto& l : t.layers()) {
        const double bound = std::sqrt(6.0 / double(l.in + l.out));
        for (std::size_t w = 0; w < l.in * l.out; ++w) {
            CHECK(std::abs(a[l.w_off + w]) <= bound);
        }
        for (std::size_t bb = 0; bb < l.out; ++bb) CHECK(a[l.b_off + bb] == 0.0);
    }
}

TEST_CASE("forward evaluation") {
    SUBCASE("single linear layer, dense scalar input") {
        TowerSpec s;
        s.input_mode = InputMode::dense;
        s.input_dim = 1;
        s.output_dim = 1;
        Tower t(s);
        const Vec theta = {2.0, 0.0};  // weight, bias
        const FeatureSet f = FeatureSet::dense(DenseMatrix(1, 1, {3.0}));
        const auto p = t.forward_all(theta, f, nullptr);
        CHECK(p(0, 0) == 6.0);
    }
    SUBCASE("zero parameters give zero embeddings") {
        TowerSpec s;
        s.input_mode = InputMode::one_hot;
        s.input_dim = 4;
        s.hidden = {3};
        s.output_dim = 2;
        Tower t(s);
        const Vec theta(t.param_count(), 0.0);
        const auto p = t.forward_all(theta, FeatureSet::one_hot(4), nullptr);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.data()[i] == 0.0);
    }
    SUBCASE("hidden activation: identity for x >= 0, exp(x)-1 below") {
        // one dense input feeding one hidden unit with unit weight, zero bias,
        // then a unit output layer: embedding = elu(input).
        TowerSpec s;
        s.input_mode = InputMode::dense;
        s.input_dim = 1;
        s.hidden = {1};
        s.output_dim = 1;
        Tower t(s);
        const Vec theta = {1.0, 0.0, 1.0, 0.0};
        const auto at = [&](double x) {
            const FeatureSet f = FeatureSet::dense(DenseMatrix(1, 1, {x}));
            return t.forward_all(theta, f, nullptr)(0, 0);
        };
        CHECK(at(2.5) == 2.5);
        CHECK(at(0.0) == 0.0);
        CHECK(at(-1.0) == doctest::Approx(std::expm1(-1.0)).epsilon(1e-15));
        CHECK(at(-40.0) == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("batch ids must be ascending, distinct, in range") {
        TowerSpec s;
        s.input_mode = InputMode::one_hot;
        s.input_dim = 4;
        s.output_dim = 1;
        Tower t(s);
        const Vec theta(t.param_count(), 0.1);
        const FeatureSet f = FeatureSet::one_hot(4);
        const std::vector<std::size_t> ok = {0, 2, 3};
        CHECK(t.forward(theta, f, ok, nullptr).rows() == 3);
        const std::vector<std::size_t> dup = {0, 0};
        CHECK_THROWS_AS(t.forward(theta, f, dup, nullptr), DimensionError);
        const std::vector<std::size_t> desc = {2, 1};
        CHECK_THROWS_AS(t.forward(theta, f, desc, nullptr), DimensionError);
        const std::vector<std::size_t> oob = {5};
        CHECK_THROWS_AS(t.forward(theta, f, oob, nullptr), DimensionError);
    }
    SUBCASE("a batch subset matches the corresponding full rows") {
        std::mt19937_64 eng(5);
        TowerSpec s = random_spec(eng, 6);
        Tower t(s);
        const FeatureSet f = random_feats(eng, s, 6);
        const Vec theta = random_params(eng, t);
        const auto full = t.forward_all(theta, f, nullptr);
        const std::vector<std::size_t> ids = {1, 4, 5};
        const auto part = t.forward(theta, f, ids, nullptr);
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t c = 0; c < s.output_dim; ++c)
                CHECK(part(r, c) == full(ids[r], c));
    }
    SUBCASE("one-hot mode equals dense one-hot rows") {
        std::mt19937_64 eng(9);
        TowerSpec s;
        s.input_mode = InputMode::one_hot;
        s.input_dim = 5;
        s.hidden = {3, 2};
        s.output_dim = 2;
        Tower t(s);
        const Vec theta = random_params(eng, t);

        TowerSpec sd = s;
        sd.input_mode = InputMode::dense;
        Tower td(sd);
        DenseMatrix eye(5, 5);
        for (std::size_t i = 0; i < 5; ++i) eye(i, i) = 1.0;
        const auto a = t.forward_all(theta, FeatureSet::one_hot(5), nullptr);
        const auto b = td.forward_all(theta, FeatureSet::dense(std::move(eye)), nullptr);
        for (std::size_t i = 0; i < a.size(); ++i)
            CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("vjp") {
    SUBCASE("hand case: single linear layer") {
        TowerSpec s;
        s.input_mode = InputMode::dense;
        s.input_dim = 1;
        s.output_dim = 1;
        Tower t(s);
        const Vec theta = {1.5, 0.0};
        const FeatureSet f = FeatureSet::dense(DenseMatrix(1, 1, {2.0}));
        ForwardTape tape;
        t.forward_all(theta, f, &tape);
        DenseMatrix cot(1, 1, {3.0});
        const Vec g = t.vjp(theta, f, tape, cot);
        CHECK(g[0] == 6.0);  // d<w*u, c>/dw = u*c
        CHECK(g[1] == 3.0);  // bias picks up the cotangent
    }
    SUBCASE("zero cotangents give zero gradient") {
        std::mt19937_64 eng(13);
        TowerSpec s = random_spec(eng, 5);
        Tower t(s);
        const FeatureSet f = random_feats(eng, s, 5);
        const Vec theta = random_params(eng, t);
        ForwardTape tape;
        t.forward_all(theta, f, &tape);
        const Vec g = t.vjp(theta, f, tape, DenseMatrix(5, s.output_dim));
        for (double x : g) CHECK(x == 0.0);
    }
    SUBCASE("matches finite differences of <forward, cotangent>") {
        std::mt19937_64 eng(21);
        for (int rep = 0; rep < 15; ++rep) {
            const std::size_t entities = 1 + eng() % 6;
            TowerSpec s = random_spec(eng, entities);
            Tower t(s);
            const FeatureSet f = random_feats(eng, s, entities);
            const Vec theta = random_params(eng, t);
            DenseMatrix cot(entities, s.output_dim);
            for (std::size_t i = 0; i < cot.size(); ++i) cot.data()[i] = rrand(eng, -1, 1);

            ForwardTape tape;
            t.forward_all(theta, f, &tape);
            const Vec g = t.vjp(theta, f, tape, cot);

            const auto value = [&](const Vec& th) {
                return frobenius_inner(t.forward_all(th, f, nullptr), cot);
            };
            const double eps = 1e-6;
            for (std::size_t d = 0; d < g.size(); ++d) {
                Vec plus = theta, minus = theta;
                plus[d] += eps;
                minus[d] -= eps;
                const double fd = (value(plus) - value(minus)) / (2 * eps);
                CHECK(std::abs(fd - g[d]) <=
                      1e-6 * std::max({std::abs(fd), std::abs(g[d]), 1e-3}));
            }
        }
    }
}

TEST_CASE("jvp") {
    SUBCASE("hand case: single linear layer") {
        TowerSpec s;
        s.input_mode = InputMode::dense;
        s.input_dim = 1;
        s.output_dim = 1;
        Tower t(s);
        const Vec theta = {2.0, 0.0};
        const FeatureSet f = FeatureSet::dense(DenseMatrix(1, 1, {3.0}));
        ForwardTape tape;
        t.forward_all(theta, f, &tape);
        CHECK(t.jvp(theta, f, tape, Vec{1.0, 0.0})(0, 0) == 3.0);  // weight direction
        CHECK(t.jvp(theta, f, tape, Vec{0.0, 1.0})(0, 0) == 1.0);  // bias direction
    }
    SUBCASE("zero direction gives zero matrix") {
        std::mt19937_64 eng(27);
        TowerSpec s = random_spec(eng, 4);
        Tower t(s);
        const FeatureSet f = random_feats(eng, s, 4);
        const Vec theta = random_params(eng, t);
        ForwardTape tape;
        t.forward_all(theta, f, &tape);
        const auto w = t.jvp(theta, f, tape, Vec(t.param_count(), 0.0));
        for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.data()[i] == 0.0);
    }
    SUBCASE("matches central differences of the forward map") {
        std::mt19937_64 eng(33);
        for (int rep = 0; rep < 15; ++rep) {
            const std::size_t entities = 1 + eng() % 6;
            TowerSpec s = random_spec(eng, entities);
            Tower t(s);
            const FeatureSet f = random_feats(eng, s, entities);
            const Vec theta = random_params(eng, t);
            Vec d(t.param_count());
            for (double& x : d) x = rrand(eng, -1, 1);

            ForwardTape tape;
            t.forward_all(theta, f, &tape);
            const auto w = t.jvp(theta, f, tape, d);

            const double eps = 1e-6;
            Vec plus = theta, minus = theta;
            for (std::size_t i = 0; i < d.size(); ++i) {
                plus[i] += eps * d[i];
                minus[i] -= eps * d[i];
            }
            const auto fp = t.forward_all(plus, f, nullptr);
            const auto fm = t.forward_all(minus, f, nullptr);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double fd = (fp.data()[i] - fm.data()[i]) / (2 * eps);
                CHECK(std::abs(fd - w.data()[i]) <=
                      1e-6 * std::max({std::abs(fd), std::abs(w.data()[i]), 1e-3}));
            }
        }
    }
    SUBCASE("duality <jvp(d), M> = d . vjp(M)") {
        std::mt19937_64 eng(39);
        for (int rep = 0; rep < 40; ++rep) {
            const std::size_t entities = 1 + eng() % 6;
            TowerSpec s = random_spec(eng, entities);
            Tower t(s);
            const FeatureSet f = random_feats(eng, s, entities);
            const Vec theta = random_params(eng, t);
            Vec d(t.param_count());
            for (double& x : d) x = rrand(eng, -1, 1);
            DenseMatrix cot(entities, s.output_dim);
            for (std::size_t i = 0; i < cot.size(); ++i) cot.data()[i] = rrand(eng, -1, 1);

            ForwardTape tape;
            t.forward_all(theta, f, &tape);
            const double lhs = frobenius_inner(t.jvp(theta, f, tape, d), cot);
            const double rhs = dot(d, t.vjp(theta, f, tape, cot));
            CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max({std::abs(lhs), std::abs(rhs), 1e-6}));
        }
    }
    SUBCASE("direction length is validated") {
        TowerSpec s;
        s.input_mode = InputMode::one_hot;
        s.input_dim = 2;
        s.output_dim = 1;
        Tower t(s);
        const Vec theta(t.param_count(), 0.5);
        const FeatureSet f = FeatureSet::one_hot(2);
        ForwardTape tape;
        t.forward_all(theta, f, &tape);
        CHECK_THROWS_AS(t.jvp(theta, f, tape, Vec{1.0}), DimensionError);
    }
}

TEST_CASE("checkpoint round trip") {
    std::mt19937_64 eng(45);
    TowerSpec su = random_spec(eng, 7);
    TowerSpec sv = random_spec(eng, 4);
    Tower tu(su), tv(sv);
    Vec theta = random_params(eng, tu);
    const Vec tvp = random_params(eng, tv);
    theta.insert(theta.end(), tvp.begin(), tvp.end());

    const std::string path = "/tmp/towertrain_test_ckpt.bin";
    save_checkpoint(path, su, sv, theta);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.spec_u.input_mode == su.input_mode);
    CHECK(ck.spec_u.input_dim == su.input_dim);
    CHECK(ck.spec_u.hidden == su.hidden);
    CHECK(ck.spec_u.output_dim == su.output_dim);
    CHECK(ck.spec_v.input_dim == sv.input_dim);
    CHECK(ck.spec_v.hidden == sv.hidden);
    CHECK(ck.theta == theta);

    SUBCASE("corrupt header is rejected") {
        std::FILE* fp = std::fopen(path.c_str(), "wb");
        REQUIRE(fp);
        std::fputs("not a checkpoint\n", fp);
        std::fclose(fp);
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    CHECK_THROWS_AS(load_checkpoint("/tmp/definitely_missing_ckpt.bin"), DataError);
}
