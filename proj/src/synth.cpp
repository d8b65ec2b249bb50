#include "towertrain/synth.hpp"

#include <random>
#include <unordered_set>
#include <utility>

namespace towertrain {

namespace {

double rand_unit(std::mt19937_64& eng) { return double(eng() >> 11) * 0x1p-53; }

double rand_range(std::mt19937_64& eng, double lo, double hi) {
    return lo + (hi - lo) * rand_unit(eng);
}

std::size_t rand_below(std::mt19937_64& eng, std::size_t n) { return std::size_t(eng() % n); }

}  // namespace

TinyInstance random_tiny_instance(std::uint64_t seed, bool full_coverage) {
    std::mt19937_64 eng(seed * 0x9e3779b97f4a7c15ull + 0x6a09e667f3bcc909ull);
    const std::size_t m = 1 + rand_below(eng, 6);
    const std::size_t n = 1 + rand_below(eng, 6);
    const std::size_t k = 1 + rand_below(eng, 4);

    const auto make_spec = [&](std::size_t count) {
        TowerSpec s;
        if (rand_below(eng, 2) == 0) {
            s.input_mode = InputMode::one_hot;
            s.input_dim = count;
        } else {
            s.input_mode = InputMode::dense;
            s.input_dim = 1 + rand_below(eng, 4);
        }
        const std::size_t layers = rand_below(eng, 3);
        for (std::size_t l = 0; l < layers; ++l) s.hidden.push_back(1 + rand_below(eng, 5));
        s.output_dim = k;
        return s;
    };
    const auto make_feats = [&](const TowerSpec& s, std::size_t count) {
        if (s.input_mode == InputMode::one_hot) return FeatureSet::one_hot(count);
        DenseMatrix rows(count, s.input_dim);
        for (std::size_t t = 0; t < rows.size(); ++t) rows.data()[t] = rand_range(eng, -1.0, 1.0);
        return FeatureSet::dense(std::move(rows));
    };

    const LossKind loss = rand_below(eng, 2) ? LossKind::squared : LossKind::logistic;
    static constexpr double kOmegas[] = {0.0, 0.25, 1.0};
    static constexpr double kLambdas[] = {0.0, 0.1, 1.0};
    const double omega = kOmegas[rand_below(eng, 3)];
    const double lambda = kLambdas[rand_below(eng, 3)];

    std::vector<Triple> triples;
    std::vector<char> taken(m * n, 0);
    const auto add_pair = [&](std::size_t i, std::size_t j) {
        if (taken[i * n + j]) return;
        taken[i * n + j] = 1;
        const double label = loss == LossKind::logistic ? (rand_below(eng, 2) ? 1.0 : -1.0)
                                                        : rand_range(eng, -1.5, 1.5);
        triples.push_back({i, j, label});
    };
    if (full_coverage) {
        for (std::size_t i = 0; i < m; ++i) add_pair(i, rand_below(eng, n));
        for (std::size_t j = 0; j < n; ++j) add_pair(rand_below(eng, m), j);
    }
    const double density = 0.25 + 0.25 * double(rand_below(eng, 3));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (rand_unit(eng) < density) add_pair(i, j);
    if (triples.empty()) add_pair(rand_below(eng, m), rand_below(eng, n));

    Vec a(m), b(n);
    for (double& w : a) w = rand_range(eng, 0.2, 1.7);
    for (double& w : b) w = rand_range(eng, 0.2, 1.7);
    DenseMatrix ip(m, k), iq(n, k);
    for (std::size_t t = 0; t < ip.size(); ++t) ip.data()[t] = rand_range(eng, -0.7, 0.7);
    for (std::size_t t = 0; t < iq.size(); ++t) iq.data()[t] = rand_range(eng, -0.7, 0.7);

    TinyInstance out;
    out.spec_u = make_spec(m);
    out.spec_v = make_spec(n);
    FeatureSet fu = make_feats(out.spec_u, m);
    FeatureSet fv = make_feats(out.spec_v, n);
    out.data = make_problem(SparseMatrixDual(m, n, std::move(triples)), std::move(fu),
                            std::move(fv), std::move(a), std::move(b), std::move(ip),
                            std::move(iq), omega, lambda, loss);

    const Tower tu(out.spec_u), tv(out.spec_v);
    out.theta = tu.init_params(eng());
    const Vec tvp = tv.init_params(eng());
    out.theta.insert(out.theta.end(), tvp.begin(), tvp.end());
    for (double& x : out.theta) x += rand_range(eng, -0.4, 0.4);
    return out;
}

ObservedSet clustered_interactions(std::size_t rows, std::size_t cols, std::size_t count,
                                   std::size_t n_clusters, double in_cluster_prob,
                                   std::uint64_t seed) {
    if (rows == 0 || cols == 0) throw ConfigError("clustered_interactions: empty shape");
    if (n_clusters == 0 || n_clusters > rows || n_clusters > cols)
        throw ConfigError("clustered_interactions: cluster count must fit both sides");
    if (count == 0 || count > rows * cols / 2)
        throw ConfigError("clustered_interactions: count must lie in [1, rows*cols/2]");
    if (!(in_cluster_prob >= 0.0 && in_cluster_prob <= 1.0))
        throw ConfigError("clustered_interactions: probability out of range");

    std::vector<std::vector<std::size_t>> cols_by_cluster(n_clusters);
    for (std::size_t j = 0; j < cols; ++j) cols_by_cluster[j % n_clusters].push_back(j);

    std::mt19937_64 eng(seed);
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(count * 2);
    std::vector<Triple> out;
    out.reserve(count);
    std::size_t attempts = 0;
    const std::size_t max_attempts = 200 * count + 1000;
    while (out.size() < count) {
        if (++attempts > max_attempts)
            throw NumericError("clustered_interactions: sampling stalled; lower count or "
                               "in_cluster_prob");
        const std::size_t i = rand_below(eng, rows);
        const std::size_t c = i % n_clusters;
        std::size_t j;
        if (rand_unit(eng) < in_cluster_prob) {
            const auto& pool = cols_by_cluster[c];
            j = pool[rand_below(eng, pool.size())];
        } else {
            j = rand_below(eng, cols);
        }
        if (!seen.insert(std::uint64_t(i) * cols + j).second) continue;
        out.push_back({i, j, (j % n_clusters == c) ? 1.0 : -1.0});
    }
    return ObservedSet(rows, cols, std::move(out));
}

}  // namespace towertrain
