#include "towertrain/objective.hpp"

#include <cmath>
#include <string>

#include "towertrain/parallel.hpp"

namespace towertrain {

LossKind parse_loss(const std::string& name) {
    if (name == "logistic") return LossKind::logistic;
    if (name == "squared") return LossKind::squared;
    throw ConfigError("unknown loss '" + name + "'");
}

const char* loss_name(LossKind k) { return k == LossKind::logistic ? "logistic" : "squared"; }

LossTerms loss_terms(LossKind kind, double y, double yhat) {
    LossTerms lt;
    if (kind == LossKind::squared) {
        const double d = yhat - y;
        lt.value = 0.5 * d * d;
        lt.first = d;
        lt.second = 1.0;
        return lt;
    }
    // log(1 + exp(-y*yhat)) without overflow in either tail.
    const double z = y * yhat;
    double sig_neg;  // sigmoid(-z)
    if (z >= 0.0) {
        const double e = std::exp(-z);
        lt.value = std::log1p(e);
        sig_neg = e / (1.0 + e);
    } else {
        const double e = std::exp(z);
        lt.value = -z + std::log1p(e);
        sig_neg = 1.0 / (1.0 + e);
    }
    lt.first = -y * sig_neg;
    lt.second = y * y * sig_neg * (1.0 - sig_neg);
    return lt;
}

ProblemData make_problem(SparseMatrixDual observed, FeatureSet feats_u, FeatureSet feats_v,
                         Vec a, Vec b, DenseMatrix imput_p, DenseMatrix imput_q, double omega,
                         double lambda, LossKind loss) {
    const std::size_t m = observed.rows(), n = observed.cols();
    if (m == 0 || n == 0) throw DataError("problem: empty entity set");
    if (feats_u.count != m || feats_v.count != n)
        throw DimensionError("problem: feature counts do not match observed shape");
    if (a.size() != m || b.size() != n)
        throw DimensionError("problem: weight vector sizes do not match observed shape");
    for (double w : a)
        if (!(w > 0.0)) throw DataError("problem: row weights must be positive");
    for (double w : b)
        if (!(w > 0.0)) throw DataError("problem: column weights must be positive");
    if (imput_p.rows() != m || imput_q.rows() != n || imput_p.cols() != imput_q.cols() ||
        imput_p.cols() == 0)
        throw DimensionError("problem: imputed embedding shapes are inconsistent");
    if (!(omega >= 0.0)) throw ConfigError("problem: omega must be nonnegative");
    if (!(lambda >= 0.0)) throw ConfigError("problem: lambda must be nonnegative");

    ProblemData d;
    d.observed = std::move(observed);
    d.feats_u = std::move(feats_u);
    d.feats_v = std::move(feats_v);
    d.a = std::move(a);
    d.b = std::move(b);
    d.imput_p = std::move(imput_p);
    d.imput_q = std::move(imput_q);
    d.omega = omega;
    d.lambda = lambda;
    d.loss = loss;

    // Imputed embeddings never change, so their Gramian product is a constant
    // of the problem.
    const DenseMatrix ptc = weighted_gram(d.imput_p, d.a, d.imput_p);
    const DenseMatrix qtc = weighted_gram(d.imput_q, d.b, d.imput_q);
    d.tilde_gram_const = frobenius_inner(ptc, qtc);

    const auto rp = d.observed.row_ptr();
    const auto ci = d.observed.col_idx();
    const std::size_t k = d.imput_p.cols();
    d.imputed_labels.resize(d.observed.nnz());
    d.pair_row.resize(d.observed.nnz());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = rp[i]; p < rp[i + 1]; ++p) {
            d.pair_row[p] = i;
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) s += d.imput_p(i, c) * d.imput_q(ci[p], c);
            d.imputed_labels[p] = s;
        }

    d.a_bar.assign(m, 0.0);
    d.b_bar.assign(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        if (d.observed.row_nnz(i) > 0) d.a_bar[i] = d.a[i] / double(d.observed.row_nnz(i));
    for (std::size_t j = 0; j < n; ++j)
        if (d.observed.col_nnz(j) > 0) d.b_bar[j] = d.b[j] / double(d.observed.col_nnz(j));
    return d;
}

PairwiseObjective::PairwiseObjective(TowerSpec spec_u, TowerSpec spec_v, ProblemData data)
    : tower_u_(std::move(spec_u)), tower_v_(std::move(spec_v)), data_(std::move(data)) {
    dim_u_ = tower_u_.param_count();
    dim_v_ = tower_v_.param_count();
    if (tower_u_.spec().output_dim != data_.k() || tower_v_.spec().output_dim != data_.k())
        throw DimensionError("objective: tower output width does not match imputation width");
    const auto check_input = [](const Tower& t, const FeatureSet& f, const char* side) {
        const std::size_t expect =
            t.spec().input_mode == InputMode::one_hot ? f.count : f.dim;
        if (t.spec().input_mode != f.mode || t.spec().input_dim != expect)
            throw DimensionError(std::string("objective: ") + side +
                                 " tower input does not match features");
    };
    check_input(tower_u_, data_.feats_u, "row");
    check_input(tower_v_, data_.feats_v, "column");
}

void PairwiseObjective::refresh_cache(std::span<const double> theta, std::uint64_t version,
                                      GramianCache& cache) const {
    if (theta.size() != dim()) throw DimensionError("objective: theta size mismatch");
    if (cache.valid_for(version)) return;
    cache.theta_version = GramianCache::no_version;

    cache.P.values = tower_u_.forward_all(theta_u(theta), data_.feats_u, &cache.P.tape);
    cache.Q.values = tower_v_.forward_all(theta_v(theta), data_.feats_v, &cache.Q.tape);
    cache.Pc = weighted_gram(cache.P.values, data_.a, cache.P.values);
    cache.Qc = weighted_gram(cache.Q.values, data_.b, cache.Q.values);
    cache.Phat = weighted_gram(cache.P.values, data_.a, data_.imput_p);
    cache.Qhat = weighted_gram(cache.Q.values, data_.b, data_.imput_q);

    const auto rp = data_.observed.row_ptr();
    const auto ci = data_.observed.col_idx();
    const std::size_t k = data_.k();
    cache.yhat.resize(data_.observed.nnz());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < data_.m(); ++i) {
        const double* prow = cache.P.values.row(i);
        for (std::size_t p = rp[i]; p < rp[i + 1]; ++p) {
            const double* qrow = cache.Q.values.row(ci[p]);
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) s += prow[c] * qrow[c];
            cache.yhat[p] = s;
        }
    }
    cache.theta_version = version;
}

double PairwiseObjective::objective(std::span<const double> theta, std::uint64_t version,
                                    GramianCache& cache) const {
    refresh_cache(theta, version, cache);
    const ProblemData& d = data_;

    // All-pairs imputed part via the Gramian identity.
    const double lneg = 0.5 * d.tilde_gram_const - frobenius_inner(cache.Phat, cache.Qhat) +
                        0.5 * frobenius_inner(cache.Pc, cache.Qc);

    // Observed part: the pointwise loss minus the imputed-label overlap that
    // the all-pairs term already counts.
    const auto ci = d.observed.col_idx();
    const auto labels = d.observed.values();
    const double omega = d.omega;
    const double lpos =
        detail::blocked_sum(d.observed.nnz(), [&](std::size_t lo, std::size_t hi) {
            double s = 0.0;
            for (std::size_t p = lo; p < hi; ++p) {
                const std::size_t i = d.pair_row[p];
                const LossTerms lt = loss_terms(d.loss, labels[p], cache.yhat[p]);
                const double diff = d.imputed_labels[p] - cache.yhat[p];
                s += lt.value - 0.5 * omega * d.a[i] * d.b[ci[p]] * diff * diff;
            }
            return s;
        });

    const double value = lpos + omega * lneg + 0.5 * d.lambda * dot(theta, theta);
    if (!std::isfinite(value)) throw NumericError("objective: non-finite value");
    return value;
}

Vec PairwiseObjective::gradient(std::span<const double> theta, std::uint64_t version,
                                GramianCache& cache) const {
    refresh_cache(theta, version, cache);
    const ProblemData& d = data_;
    const auto ci = d.observed.col_idx();
    const auto labels = d.observed.values();
    const std::size_t nnz = d.observed.nnz();

    // Per observed pair: loss slope plus the imputed-overlap correction.
    Vec x(nnz);
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < nnz; ++p) {
        const std::size_t i = d.pair_row[p];
        const LossTerms lt = loss_terms(d.loss, labels[p], cache.yhat[p]);
        x[p] = lt.first + d.omega * d.a[i] * d.b[ci[p]] * (d.imputed_labels[p] - cache.yhat[p]);
    }

    DenseMatrix cu = spmm(d.observed, x, cache.Q.values);
    DenseMatrix cv = spmm(d.observed, x, cache.P.values, true);
    if (d.omega != 0.0) {
        const DenseMatrix pu = matmul(cache.P.values, cache.Qc);
        const DenseMatrix pt = matmul(d.imput_p, cache.Qhat);
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < d.m(); ++i) {
            const double w = d.omega * d.a[i];
            double* crow = cu.row(i);
            const double* r1 = pu.row(i);
            const double* r2 = pt.row(i);
            for (std::size_t c = 0; c < d.k(); ++c) crow[c] += w * (r1[c] - r2[c]);
        }
        const DenseMatrix qv = matmul(cache.Q.values, cache.Pc);
        const DenseMatrix qt = matmul(d.imput_q, cache.Phat);
#pragma omp parallel for schedule(static)
        for (std::size_t j = 0; j < d.n(); ++j) {
            const double w = d.omega * d.b[j];
            double* crow = cv.row(j);
            const double* r1 = qv.row(j);
            const double* r2 = qt.row(j);
            for (std::size_t c = 0; c < d.k(); ++c) crow[c] += w * (r1[c] - r2[c]);
        }
    }

    Vec grad = tower_u_.vjp(theta_u(theta), d.feats_u, cache.P.tape, cu);
    Vec gv = tower_v_.vjp(theta_v(theta), d.feats_v, cache.Q.tape, cv);
    grad.insert(grad.end(), gv.begin(), gv.end());
    if (d.lambda != 0.0) axpy(d.lambda, theta, grad);
    if (!all_finite(grad)) throw NumericError("gradient: non-finite entries");
    return grad;
}

Vec PairwiseObjective::gn_product(std::span<const double> theta, std::span<const double> dir,
                                  std::uint64_t version, GramianCache& cache) const {
    refresh_cache(theta, version, cache);
    if (dir.size() != dim()) throw DimensionError("gn_product: direction size mismatch");
    const ProblemData& d = data_;
    const std::size_t k = d.k();

    const DenseMatrix w = tower_u_.jvp(theta_u(theta), d.feats_u, cache.P.tape,
                                       dir.subspan(0, dim_u_));
    const DenseMatrix h = tower_v_.jvp(theta_v(theta), d.feats_v, cache.Q.tape,
                                       dir.subspan(dim_u_, dim_v_));
    const DenseMatrix wc = weighted_gram(cache.P.values, d.a, w);  // W^T A P
    const DenseMatrix hc = weighted_gram(cache.Q.values, d.b, h);  // H^T B Q

    // Curvature weight per observed pair times the prediction tangent.
    const auto rp = d.observed.row_ptr();
    const auto ci = d.observed.col_idx();
    const auto labels = d.observed.values();
    Vec z(d.observed.nnz());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < d.m(); ++i) {
        const double* prow = cache.P.values.row(i);
        const double* wrow = w.row(i);
        for (std::size_t p = rp[i]; p < rp[i + 1]; ++p) {
            const std::size_t j = ci[p];
            const double* qrow = cache.Q.values.row(j);
            const double* hrow = h.row(j);
            double tau = 0.0;
            for (std::size_t c = 0; c < k; ++c) tau += qrow[c] * wrow[c] + prow[c] * hrow[c];
            const LossTerms lt = loss_terms(d.loss, labels[p], cache.yhat[p]);
            z[p] = (lt.second - d.omega * d.a[i] * d.b[j]) * tau;
        }
    }

    DenseMatrix cu = spmm(d.observed, z, cache.Q.values);
    DenseMatrix cv = spmm(d.observed, z, cache.P.values, true);
    if (d.omega != 0.0) {
        const DenseMatrix t1 = matmul(w, cache.Qc);
        const DenseMatrix t2 = matmul(cache.P.values, hc);
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < d.m(); ++i) {
            const double ww = d.omega * d.a[i];
            double* crow = cu.row(i);
            const double* r1 = t1.row(i);
            const double* r2 = t2.row(i);
            for (std::size_t c = 0; c < k; ++c) crow[c] += ww * (r1[c] + r2[c]);
        }
        const DenseMatrix t3 = matmul(h, cache.Pc);
        const DenseMatrix t4 = matmul(cache.Q.values, wc);
#pragma omp parallel for schedule(static)
        for (std::size_t j = 0; j < d.n(); ++j) {
            const double ww = d.omega * d.b[j];
            double* crow = cv.row(j);
            const double* r3 = t3.row(j);
            const double* r4 = t4.row(j);
            for (std::size_t c = 0; c < k; ++c) crow[c] += ww * (r3[c] + r4[c]);
        }
    }

    Vec out = tower_u_.vjp(theta_u(theta), d.feats_u, cache.P.tape, cu);
    Vec ov = tower_v_.vjp(theta_v(theta), d.feats_v, cache.Q.tape, cv);
    out.insert(out.end(), ov.begin(), ov.end());
    if (d.lambda != 0.0) axpy(d.lambda, dir, out);
    if (!all_finite(out)) throw NumericError("gn_product: non-finite entries");
    return out;
}

}  // namespace towertrain
