#include "towertrain/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "towertrain/parallel.hpp"

namespace towertrain {

int worker_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_worker_count(int n) {
#ifdef _OPENMP
    if (n <= 0) n = omp_get_num_procs();
    omp_set_num_threads(n);
#else
    (void)n;
#endif
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, Vec entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
    if (data_.size() != rows * cols)
        throw DimensionError("matrix entries size " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" +
                             std::to_string(cols));
    if (!all_finite(data_)) throw NumericError("matrix entries contain non-finite values");
}

void DenseMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

SparseMatrixDual::SparseMatrixDual(std::size_t rows, std::size_t cols,
                                   std::vector<Triple> entries)
    : rows_(rows), cols_(cols) {
    for (const Triple& t : entries) {
        if (t.i >= rows || t.j >= cols)
            throw DataError("sparse entry (" + std::to_string(t.i) + ", " + std::to_string(t.j) +
                            ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
        if (!std::isfinite(t.value)) throw NumericError("sparse entry with non-finite value");
    }
    std::sort(entries.begin(), entries.end(), [](const Triple& a, const Triple& b) {
        return a.i != b.i ? a.i < b.i : a.j < b.j;
    });
    for (std::size_t p = 1; p < entries.size(); ++p)
        if (entries[p].i == entries[p - 1].i && entries[p].j == entries[p - 1].j)
            throw DataError("duplicate sparse entry (" + std::to_string(entries[p].i) + ", " +
                            std::to_string(entries[p].j) + ")");

    const std::size_t nnz = entries.size();
    row_ptr_.assign(rows_ + 1, 0);
    col_idx_.resize(nnz);
    values_.resize(nnz);
    for (const Triple& t : entries) ++row_ptr_[t.i + 1];
    for (std::size_t i = 0; i < rows_; ++i) row_ptr_[i + 1] += row_ptr_[i];
    for (std::size_t p = 0; p < nnz; ++p) {
        col_idx_[p] = entries[p].j;
        values_[p] = entries[p].value;
    }

    col_ptr_.assign(cols_ + 1, 0);
    row_idx_.resize(nnz);
    value_pos_.resize(nnz);
    for (const Triple& t : entries) ++col_ptr_[t.j + 1];
    for (std::size_t j = 0; j < cols_; ++j) col_ptr_[j + 1] += col_ptr_[j];
    std::vector<std::size_t> cursor(col_ptr_.begin(), col_ptr_.end() - 1);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) {
            const std::size_t q = cursor[col_idx_[p]]++;
            row_idx_[q] = i;
            value_pos_[q] = p;
        }
}

std::vector<Triple> SparseMatrixDual::triples() const {
    std::vector<Triple> out;
    out.reserve(nnz());
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p)
            out.push_back({i, col_idx_[p], values_[p]});
    return out;
}

namespace {

void check_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                             "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                             "x" + std::to_string(b.cols()));
}

}  // namespace

double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b) {
    check_same_shape(a, b, "frobenius_inner");
    const double* pa = a.data();
    const double* pb = b.data();
    return detail::blocked_sum(a.size(), [&](std::size_t lo, std::size_t hi) {
        double s = 0.0;
        for (std::size_t t = lo; t < hi; ++t) s += pa[t] * pb[t];
        return s;
    });
}

DenseMatrix spmm(const SparseMatrixDual& x, const DenseMatrix& q, bool transposed) {
    return spmm(x, x.values(), q, transposed);
}

DenseMatrix spmm(const SparseMatrixDual& x, std::span<const double> values, const DenseMatrix& q,
                 bool transposed) {
    if (values.size() != x.nnz()) throw DimensionError("spmm: values size does not match pattern");
    const std::size_t k = q.cols();
    if (!transposed) {
        if (q.rows() != x.cols()) throw DimensionError("spmm: inner dimension mismatch");
        DenseMatrix out(x.rows(), k);
        const auto rp = x.row_ptr();
        const auto ci = x.col_idx();
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double* orow = out.row(i);
            for (std::size_t p = rp[i]; p < rp[i + 1]; ++p) {
                const double v = values[p];
                const double* qrow = q.row(ci[p]);
                for (std::size_t c = 0; c < k; ++c) orow[c] += v * qrow[c];
            }
        }
        return out;
    }
    if (q.rows() != x.rows()) throw DimensionError("spmm: inner dimension mismatch");
    DenseMatrix out(x.cols(), k);
    const auto cp = x.col_ptr();
    const auto ri = x.row_idx();
    const auto vp = x.value_pos();
#pragma omp parallel for schedule(static)
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double* orow = out.row(j);
        for (std::size_t p = cp[j]; p < cp[j + 1]; ++p) {
            const double v = values[vp[p]];
            const double* qrow = q.row(ri[p]);
            for (std::size_t c = 0; c < k; ++c) orow[c] += v * qrow[c];
        }
    }
    return out;
}

DenseMatrix weighted_gram(const DenseMatrix& p, std::span<const double> weights,
                          const DenseMatrix& other) {
    check_same_shape(p, other, "weighted_gram");
    if (weights.size() != p.rows()) throw DimensionError("weighted_gram: weights size mismatch");
    const std::size_t m = p.rows(), k = p.cols();
    // Fixed-block partial Gramians combined in block order (deterministic).
    const std::size_t nb = std::min<std::size_t>(detail::kReductionBlocks, std::max<std::size_t>(m, 1));
    const std::size_t chunk = m == 0 ? 1 : (m + nb - 1) / nb;
    std::vector<Vec> partial(nb, Vec(k * k, 0.0));
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < nb; ++b) {
        Vec& acc = partial[b];
        const std::size_t lo = b * chunk;
        const std::size_t hi = std::min(m, lo + chunk);
        for (std::size_t r = lo; r < hi; ++r) {
            const double w = weights[r];
            const double* orow = other.row(r);
            const double* prow = p.row(r);
            for (std::size_t aa = 0; aa < k; ++aa) {
                const double v = w * orow[aa];
                double* arow = acc.data() + aa * k;
                for (std::size_t bb = 0; bb < k; ++bb) arow[bb] += v * prow[bb];
            }
        }
    }
    DenseMatrix out(k, k);
    for (std::size_t b = 0; b < nb; ++b) {
        const Vec& acc = partial[b];
        double* od = out.data();
        for (std::size_t t = 0; t < k * k; ++t) od[t] += acc[t];
    }
    return out;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
    DenseMatrix out(a.rows(), b.cols());
    const std::size_t kk = a.cols(), n = b.cols();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* arow = a.row(r);
        double* orow = out.row(r);
        for (std::size_t t = 0; t < kk; ++t) {
            const double av = arow[t];
            const double* brow = b.row(t);
            for (std::size_t c = 0; c < n; ++c) orow[c] += av * brow[c];
        }
    }
    return out;
}

DenseMatrix matmul_bt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_bt: inner dimension mismatch");
    DenseMatrix out(a.rows(), b.rows());
    const std::size_t kk = a.cols(), n = b.rows();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* arow = a.row(r);
        double* orow = out.row(r);
        for (std::size_t c = 0; c < n; ++c) {
            const double* brow = b.row(c);
            double s = 0.0;
            for (std::size_t t = 0; t < kk; ++t) s += arow[t] * brow[t];
            orow[c] = s;
        }
    }
    return out;
}

DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("matmul_at: inner dimension mismatch");
    const std::size_t rr = a.rows(), m = a.cols(), n = b.cols();
    DenseMatrix out(m, n);
    // Tile the output rows; each tile is owned by one worker and accumulates
    // over r in ascending order, so results do not depend on worker count.
    constexpr std::size_t kTile = 64;
    const std::size_t ntiles = (m + kTile - 1) / kTile;
#pragma omp parallel for schedule(static)
    for (std::size_t tile = 0; tile < ntiles; ++tile) {
        const std::size_t ilo = tile * kTile;
        const std::size_t ihi = std::min(m, ilo + kTile);
        for (std::size_t r = 0; r < rr; ++r) {
            const double* arow = a.row(r);
            const double* brow = b.row(r);
            for (std::size_t i = ilo; i < ihi; ++i) {
                const double av = arow[i];
                double* orow = out.row(i);
                for (std::size_t c = 0; c < n; ++c) orow[c] += av * brow[c];
            }
        }
    }
    return out;
}

double dot(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("dot: size mismatch");
    return detail::blocked_sum(x.size(), [&](std::size_t lo, std::size_t hi) {
        double s = 0.0;
        for (std::size_t t = lo; t < hi; ++t) s += x[t] * y[t];
        return s;
    });
}

double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw DimensionError("axpy: size mismatch");
#pragma omp parallel for schedule(static)
    for (std::size_t t = 0; t < x.size(); ++t) y[t] += alpha * x[t];
}

void scale(double alpha, std::span<double> x) {
#pragma omp parallel for schedule(static)
    for (std::size_t t = 0; t < x.size(); ++t) x[t] *= alpha;
}

bool all_finite(std::span<const double> x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace serial {

double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b) {
    check_same_shape(a, b, "frobenius_inner");
    double s = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) s += a.data()[t] * b.data()[t];
    return s;
}

DenseMatrix spmm(const SparseMatrixDual& x, const DenseMatrix& q, bool transposed) {
    const std::size_t k = q.cols();
    const auto rp = x.row_ptr();
    const auto ci = x.col_idx();
    const auto vals = x.values();
    if (!transposed) {
        if (q.rows() != x.cols()) throw DimensionError("spmm: inner dimension mismatch");
        DenseMatrix out(x.rows(), k);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t p = rp[i]; p < rp[i + 1]; ++p)
                for (std::size_t c = 0; c < k; ++c)
                    out(i, c) += vals[p] * q(ci[p], c);
        return out;
    }
    if (q.rows() != x.rows()) throw DimensionError("spmm: inner dimension mismatch");
    DenseMatrix out(x.cols(), k);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t p = rp[i]; p < rp[i + 1]; ++p)
            for (std::size_t c = 0; c < k; ++c)
                out(ci[p], c) += vals[p] * q(i, c);
    return out;
}

DenseMatrix weighted_gram(const DenseMatrix& p, std::span<const double> weights,
                          const DenseMatrix& other) {
    check_same_shape(p, other, "weighted_gram");
    if (weights.size() != p.rows()) throw DimensionError("weighted_gram: weights size mismatch");
    const std::size_t k = p.cols();
    DenseMatrix out(k, k);
    for (std::size_t r = 0; r < p.rows(); ++r)
        for (std::size_t aa = 0; aa < k; ++aa)
            for (std::size_t bb = 0; bb < k; ++bb)
                out(aa, bb) += weights[r] * other(r, aa) * p(r, bb);
    return out;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t t = 0; t < a.cols(); ++t)
            for (std::size_t c = 0; c < b.cols(); ++c)
                out(r, c) += a(r, t) * b(t, c);
    return out;
}

DenseMatrix matmul_bt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_bt: inner dimension mismatch");
    DenseMatrix out(a.rows(), b.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < b.rows(); ++c) {
            double s = 0.0;
            for (std::size_t t = 0; t < a.cols(); ++t) s += a(r, t) * b(c, t);
            out(r, c) = s;
        }
    return out;
}

DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("matmul_at: inner dimension mismatch");
    DenseMatrix out(a.cols(), b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t i = 0; i < a.cols(); ++i)
            for (std::size_t c = 0; c < b.cols(); ++c)
                out(i, c) += a(r, i) * b(r, c);
    return out;
}

double dot(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) s += x[t] * y[t];
    return s;
}

}  // namespace serial
}  // namespace towertrain
