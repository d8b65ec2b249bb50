#include "towertrain/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "towertrain/parallel.hpp"

namespace towertrain {

namespace {

using RowScorer = std::function<void(std::size_t, double*)>;

double map_core(const RowScorer& scorer, std::size_t m, std::size_t n,
                const SparseMatrixDual& test, std::size_t k, const SparseMatrixDual* exclude) {
    if (k == 0) throw ConfigError("map_at_k: k must be positive");
    if (test.rows() != m || test.cols() != n)
        throw DimensionError("map_at_k: test shape does not match scores");
    if (exclude && (exclude->rows() != m || exclude->cols() != n))
        throw DimensionError("map_at_k: exclusion shape does not match scores");

    std::size_t active = 0;
    for (std::size_t i = 0; i < m; ++i)
        if (test.row_nnz(i) > 0) ++active;
    if (active == 0) throw DataError("map_at_k: no left entity has test pairs");

    const auto trp = test.row_ptr();
    const auto tci = test.col_idx();
    const double total = detail::blocked_sum(m, [&](std::size_t lo, std::size_t hi) {
        Vec score(n);
        std::vector<char> relevant(n, 0), excluded(n, 0);
        std::vector<std::size_t> cand;
        cand.reserve(n);
        double sum = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            if (test.row_nnz(i) == 0) continue;
            scorer(i, score.data());

            std::fill(excluded.begin(), excluded.end(), 0);
            if (exclude) {
                const auto erp = exclude->row_ptr();
                const auto eci = exclude->col_idx();
                for (std::size_t p = erp[i]; p < erp[i + 1]; ++p) excluded[eci[p]] = 1;
            }
            cand.clear();
            for (std::size_t j = 0; j < n; ++j)
                if (!excluded[j]) cand.push_back(j);

            const std::size_t top = std::min(k, cand.size());
            // Ties rank the lower index first; cand is ascending, so a
            // strict greater-than comparison on scores is stable enough
            // only with the index tiebreak made explicit.
            std::partial_sort(cand.begin(), cand.begin() + std::ptrdiff_t(top), cand.end(),
                              [&](std::size_t x, std::size_t y) {
                                  if (score[x] != score[y]) return score[x] > score[y];
                                  return x < y;
                              });

            std::fill(relevant.begin(), relevant.end(), 0);
            for (std::size_t p = trp[i]; p < trp[i + 1]; ++p) relevant[tci[p]] = 1;

            // sum over cutoffs 1..k of hits(cutoff)/cutoff, where the list
            // simply ends early when fewer than k candidates exist.
            std::size_t hits = 0;
            double ap = 0.0;
            for (std::size_t cut = 1; cut <= k; ++cut) {
                if (cut <= top && relevant[cand[cut - 1]]) ++hits;
                ap += double(hits) / double(cut);
            }
            sum += ap;
        }
        return sum;
    });
    return total / (double(k) * double(active));
}

}  // namespace

double map_at_k(const DenseMatrix& scores, const SparseMatrixDual& test, std::size_t k,
                const SparseMatrixDual* exclude) {
    const RowScorer scorer = [&](std::size_t i, double* out) {
        const double* row = scores.row(i);
        for (std::size_t j = 0; j < scores.cols(); ++j) out[j] = row[j];
    };
    return map_core(scorer, scores.rows(), scores.cols(), test, k, exclude);
}

double map_at_k(const DenseMatrix& p, const DenseMatrix& q, const SparseMatrixDual& test,
                std::size_t k, const SparseMatrixDual* exclude) {
    if (p.cols() != q.cols()) throw DimensionError("map_at_k: embedding widths differ");
    const RowScorer scorer = [&](std::size_t i, double* out) {
        const double* prow = p.row(i);
        for (std::size_t j = 0; j < q.rows(); ++j) {
            const double* qrow = q.row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) s += prow[c] * qrow[c];
            out[j] = s;
        }
    };
    return map_core(scorer, p.rows(), q.rows(), test, k, exclude);
}

double relative_objective(double value, double best) {
    if (!(best > 0.0)) throw NumericError("relative_objective: reference must be positive");
    return (value - best) / best;
}

namespace {

const char* kTraceHeader = "pass,step,wall_time_s,objective,rel_obj,step_size,n_ls,n_cg,map_at_5";

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void write_trace(const std::string& path, const std::vector<TraceRecord>& trace) {
    std::ofstream os(path);
    if (!os) throw DataError("trace: cannot open '" + path + "' for writing");
    os << kTraceHeader << '\n';
    double best = 0.0;
    bool have = false;
    for (const TraceRecord& r : trace)
        if (!have || r.objective < best) {
            best = r.objective;
            have = true;
        }
    for (const TraceRecord& r : trace) {
        os << r.pass << ',' << r.step << ',' << fmt17(r.wall_time_s) << ','
           << fmt17(r.objective) << ',';
        os << (best > 0.0 ? fmt17(relative_objective(r.objective, best)) : std::string()) << ',';
        os << fmt17(r.step_size) << ',' << r.n_line_search << ',' << r.n_cg << ',';
        if (r.map_at_5) os << fmt17(*r.map_at_5);
        os << '\n';
    }
    if (!os) throw DataError("trace: write failed for '" + path + "'");
}

std::vector<TraceRecord> read_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("trace: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != kTraceHeader)
        throw DataError("trace: bad header in '" + path + "'");
    std::vector<TraceRecord> out;
    std::size_t no = 1;
    while (std::getline(is, line)) {
        ++no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (cells.size() != 9)
            throw DataError("trace: line " + std::to_string(no) + " has " +
                            std::to_string(cells.size()) + " cells");
        try {
            TraceRecord r;
            r.pass = std::stoull(cells[0]);
            r.step = std::stoull(cells[1]);
            r.wall_time_s = std::stod(cells[2]);
            r.objective = std::stod(cells[3]);
            if (!cells[4].empty()) (void)std::stod(cells[4]);  // validated, rederivable
            r.step_size = std::stod(cells[5]);
            r.n_line_search = std::stoull(cells[6]);
            r.n_cg = std::stoull(cells[7]);
            if (!cells[8].empty()) r.map_at_5 = std::stod(cells[8]);
            out.push_back(r);
        } catch (const std::exception&) {
            throw DataError("trace: malformed line " + std::to_string(no) + " in '" + path +
                            "'");
        }
    }
    return out;
}

}  // namespace towertrain
