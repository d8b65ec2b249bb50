#include "towertrain/oracle.hpp"

#include <cmath>
#include <string>

namespace towertrain {
namespace oracle {

namespace {

void check_pair_guard(const PairwiseObjective& engine) {
    const std::size_t mn = engine.data().m() * engine.data().n();
    if (mn > kMaxPairs)
        throw SizeGuardError("oracle: " + std::to_string(mn) + " pairs exceed the guard of " +
                             std::to_string(kMaxPairs));
}

void check_matrix_guard(const PairwiseObjective& engine) {
    if (engine.dim() > kMaxParamsForMatrix)
        throw SizeGuardError("oracle: " + std::to_string(engine.dim()) +
                             " parameters exceed the guard of " +
                             std::to_string(kMaxParamsForMatrix));
}

// -1 for unobserved pairs, otherwise the row-order entry position.
std::vector<std::ptrdiff_t> observed_positions(const SparseMatrixDual& o) {
    std::vector<std::ptrdiff_t> pos(o.rows() * o.cols(), -1);
    const auto rp = o.row_ptr();
    const auto ci = o.col_idx();
    for (std::size_t i = 0; i < o.rows(); ++i)
        for (std::size_t p = rp[i]; p < rp[i + 1]; ++p)
            pos[i * o.cols() + ci[p]] = std::ptrdiff_t(p);
    return pos;
}

double dot_k(const DenseMatrix& a, std::size_t ra, const DenseMatrix& b, std::size_t rb) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) s += a(ra, c) * b(rb, c);
    return s;
}

}  // namespace

ExplicitJacobians explicit_jacobians(const PairwiseObjective& engine,
                                     std::span<const double> theta) {
    check_pair_guard(engine);
    const ProblemData& d = engine.data();
    const Tower& tu = engine.tower_u();
    const Tower& tv = engine.tower_v();
    const auto theta_u = engine.theta_u(theta);
    const auto theta_v = engine.theta_v(theta);

    ExplicitJacobians out;
    ForwardTape tape_u, tape_v;
    out.p = tu.forward_all(theta_u, d.feats_u, &tape_u);
    out.q = tv.forward_all(theta_v, d.feats_v, &tape_v);

    const std::size_t k = d.k();
    out.jac_u.assign(d.m(), DenseMatrix(k, engine.dim_u()));
    out.jac_v.assign(d.n(), DenseMatrix(k, engine.dim_v()));

    Vec dir(engine.dim_u(), 0.0);
    for (std::size_t t = 0; t < engine.dim_u(); ++t) {
        dir[t] = 1.0;
        const DenseMatrix col = tu.jvp(theta_u, d.feats_u, tape_u, dir);
        dir[t] = 0.0;
        for (std::size_t i = 0; i < d.m(); ++i)
            for (std::size_t c = 0; c < k; ++c) out.jac_u[i](c, t) = col(i, c);
    }
    dir.assign(engine.dim_v(), 0.0);
    for (std::size_t t = 0; t < engine.dim_v(); ++t) {
        dir[t] = 1.0;
        const DenseMatrix col = tv.jvp(theta_v, d.feats_v, tape_v, dir);
        dir[t] = 0.0;
        for (std::size_t j = 0; j < d.n(); ++j)
            for (std::size_t c = 0; c < k; ++c) out.jac_v[j](c, t) = col(j, c);
    }
    return out;
}

double naive_objective(const PairwiseObjective& engine, std::span<const double> theta) {
    check_pair_guard(engine);
    const ProblemData& d = engine.data();
    const Tower& tu = engine.tower_u();
    const Tower& tv = engine.tower_v();
    const DenseMatrix p = tu.forward_all(engine.theta_u(theta), d.feats_u, nullptr);
    const DenseMatrix q = tv.forward_all(engine.theta_v(theta), d.feats_v, nullptr);
    const auto pos = observed_positions(d.observed);
    const auto labels = d.observed.values();

    double sum = 0.0;
    for (std::size_t i = 0; i < d.m(); ++i)
        for (std::size_t j = 0; j < d.n(); ++j) {
            const double yhat = dot_k(p, i, q, j);
            const std::ptrdiff_t at = pos[i * d.n() + j];
            if (at >= 0) {
                sum += loss_terms(d.loss, labels[std::size_t(at)], yhat).value;
            } else {
                const double ytilde = dot_k(d.imput_p, i, d.imput_q, j);
                const double diff = ytilde - yhat;
                sum += 0.5 * d.omega * d.a[i] * d.b[j] * diff * diff;
            }
        }
    double reg = 0.0;
    for (double t : theta) reg += t * t;
    return sum + 0.5 * d.lambda * reg;
}

Vec naive_gradient(const PairwiseObjective& engine, std::span<const double> theta) {
    const ProblemData& d = engine.data();
    const ExplicitJacobians jac = explicit_jacobians(engine, theta);
    const auto pos = observed_positions(d.observed);
    const auto labels = d.observed.values();
    const std::size_t k = d.k();

    Vec grad(engine.dim(), 0.0);
    for (std::size_t i = 0; i < d.m(); ++i)
        for (std::size_t j = 0; j < d.n(); ++j) {
            const double yhat = dot_k(jac.p, i, jac.q, j);
            const std::ptrdiff_t at = pos[i * d.n() + j];
            double coef;
            if (at >= 0) {
                coef = loss_terms(d.loss, labels[std::size_t(at)], yhat).first;
            } else {
                const double ytilde = dot_k(d.imput_p, i, d.imput_q, j);
                coef = d.omega * d.a[i] * d.b[j] * (yhat - ytilde);
            }
            // d yhat / d theta = [q_j^T Ju_i, p_i^T Jv_j]
            for (std::size_t c = 0; c < k; ++c) {
                const double qa = coef * jac.q(j, c);
                const double pa = coef * jac.p(i, c);
                for (std::size_t t = 0; t < engine.dim_u(); ++t)
                    grad[t] += qa * jac.jac_u[i](c, t);
                for (std::size_t t = 0; t < engine.dim_v(); ++t)
                    grad[engine.dim_u() + t] += pa * jac.jac_v[j](c, t);
            }
        }
    for (std::size_t t = 0; t < theta.size(); ++t) grad[t] += d.lambda * theta[t];
    return grad;
}

DenseMatrix naive_gn_matrix(const PairwiseObjective& engine, std::span<const double> theta) {
    check_matrix_guard(engine);
    const ProblemData& d = engine.data();
    const ExplicitJacobians jac = explicit_jacobians(engine, theta);
    const auto pos = observed_positions(d.observed);
    const auto labels = d.observed.values();
    const std::size_t k = d.k();
    const std::size_t dim = engine.dim();

    DenseMatrix g(dim, dim);
    Vec jvec(dim);
    for (std::size_t i = 0; i < d.m(); ++i)
        for (std::size_t j = 0; j < d.n(); ++j) {
            const double yhat = dot_k(jac.p, i, jac.q, j);
            const std::ptrdiff_t at = pos[i * d.n() + j];
            const double curv = at >= 0
                                    ? loss_terms(d.loss, labels[std::size_t(at)], yhat).second
                                    : d.omega * d.a[i] * d.b[j];
            if (curv == 0.0) continue;
            std::fill(jvec.begin(), jvec.end(), 0.0);
            for (std::size_t c = 0; c < k; ++c) {
                const double qa = jac.q(j, c);
                const double pa = jac.p(i, c);
                for (std::size_t t = 0; t < engine.dim_u(); ++t)
                    jvec[t] += qa * jac.jac_u[i](c, t);
                for (std::size_t t = 0; t < engine.dim_v(); ++t)
                    jvec[engine.dim_u() + t] += pa * jac.jac_v[j](c, t);
            }
            for (std::size_t r = 0; r < dim; ++r) {
                const double v = curv * jvec[r];
                if (v == 0.0) continue;
                double* grow = g.row(r);
                for (std::size_t c = 0; c < dim; ++c) grow[c] += v * jvec[c];
            }
        }
    for (std::size_t t = 0; t < dim; ++t) g(t, t) += d.lambda;
    return g;
}

Vec naive_gn_product(const PairwiseObjective& engine, std::span<const double> theta,
                     std::span<const double> dvec) {
    if (dvec.size() != engine.dim()) throw DimensionError("naive_gn_product: direction size");
    const DenseMatrix g = naive_gn_matrix(engine, theta);
    Vec out(engine.dim(), 0.0);
    for (std::size_t r = 0; r < engine.dim(); ++r) {
        const double* grow = g.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < engine.dim(); ++c) s += grow[c] * dvec[c];
        out[r] = s;
    }
    return out;
}

}  // namespace oracle
}  // namespace towertrain
