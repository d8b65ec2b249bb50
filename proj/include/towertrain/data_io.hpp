#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "towertrain/linalg.hpp"

namespace towertrain {

using ObservedSet = SparseMatrixDual;

// Text interaction file: one "i j r" line per pair with 1-based indices and
// an optional first line "rows cols count".  The first line is taken as a
// header exactly when that reading is fully consistent (three integer
// tokens, count equal to the number of remaining data lines, all pairs in
// bounds); otherwise it is parsed as data and the shape is inferred from the
// largest indices.  '#' starts a comment.
ObservedSet load_interactions(const std::string& path);
void save_interactions(const std::string& path, const ObservedSet& o);

// Uniform pair-level split; |train| = round(ratio * count).  Both sides must
// end up nonempty.  Deterministic per seed.
std::pair<ObservedSet, ObservedSet> make_split(const ObservedSet& o, double ratio,
                                               std::uint64_t seed);

enum class ImputationKind { constant, file };

// constant: every row entity gets the all -1/sqrt(k) vector and every column
// entity the all +1/sqrt(k) vector, so each imputed label is exactly -1.
// file: dense matrices loaded from the two paths (shapes must be rows x k
// and cols x k).
std::pair<DenseMatrix, DenseMatrix> build_imputation(ImputationKind kind, std::size_t k,
                                                     std::size_t rows, std::size_t cols,
                                                     const std::string& path_p = "",
                                                     const std::string& path_q = "");

// Dense matrix file: header "towertrain-dense v1 rows cols" then one
// whitespace-separated row per line.
DenseMatrix load_dense_matrix(const std::string& path);
void save_dense_matrix(const std::string& path, const DenseMatrix& m);

}  // namespace towertrain
