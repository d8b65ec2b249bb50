#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "towertrain/linalg.hpp"

namespace towertrain {

// One optimizer log row.  dir_dot_grad is the directional derivative of the
// accepted step (zero for the per-pair stochastic methods); it stays
// in-memory so sufficient decrease can be re-verified and is not serialized.
struct TraceRecord {
    std::size_t pass = 0;
    std::size_t step = 0;
    double wall_time_s = 0.0;
    double objective = 0.0;
    double step_size = 0.0;
    std::size_t n_line_search = 0;
    std::size_t n_cg = 0;
    std::optional<double> map_at_5;
    double dir_dot_grad = 0.0;
};

// Mean average precision at k over left entities with at least one test
// pair.  Candidates excluded (typically training items) are removed before
// truncation; score ties rank the lower index first.
double map_at_k(const DenseMatrix& scores, const SparseMatrixDual& test, std::size_t k,
                const SparseMatrixDual* exclude = nullptr);
// Scores computed per left entity as p_i . q_j without materializing them.
double map_at_k(const DenseMatrix& p, const DenseMatrix& q, const SparseMatrixDual& test,
                std::size_t k, const SparseMatrixDual* exclude = nullptr);

// (value - best) / best for best > 0.
double relative_objective(double value, double best);

// CSV with header pass,step,wall_time_s,objective,rel_obj,step_size,n_ls,
// n_cg,map_at_5.  Values are printed with 17 significant digits so reading
// the file back bit-reproduces every double; rel_obj is computed against the
// smallest objective in the trace and map_at_5 is blank when absent.
void write_trace(const std::string& path, const std::vector<TraceRecord>& trace);
std::vector<TraceRecord> read_trace(const std::string& path);

}  // namespace towertrain
