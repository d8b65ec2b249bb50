#pragma once

#include <span>

#include "towertrain/objective.hpp"

namespace towertrain {
namespace oracle {

// Brute-force references that walk every row/column pair with the piecewise
// loss (pointwise loss on observed pairs, weighted squared pull to the
// imputed label elsewhere).  They share no Gramian shortcut with the fast
// engine and exist to pin its behaviour in tests.
//
// Size guards: rows*cols <= 10000 for all entry points and joint parameter
// count <= 2000 where an explicit curvature matrix is assembled.

inline constexpr std::size_t kMaxPairs = 10000;
inline constexpr std::size_t kMaxParamsForMatrix = 2000;

double naive_objective(const PairwiseObjective& engine, std::span<const double> theta);

Vec naive_gradient(const PairwiseObjective& engine, std::span<const double> theta);

// Explicit Gauss-Newton matrix times d, assembled column by column from
// per-entity Jacobians (themselves built by forward derivatives along every
// parameter axis).
Vec naive_gn_product(const PairwiseObjective& engine, std::span<const double> theta,
                     std::span<const double> d);

// Explicit dense Gauss-Newton matrix (row-major dim x dim), for symmetry and
// column tests.
DenseMatrix naive_gn_matrix(const PairwiseObjective& engine, std::span<const double> theta);

// Per-entity embedding Jacobians: jac_u[i] is output_dim x dim_u.
struct ExplicitJacobians {
    std::vector<DenseMatrix> jac_u, jac_v;
    DenseMatrix p, q;  // embeddings
};
ExplicitJacobians explicit_jacobians(const PairwiseObjective& engine,
                                     std::span<const double> theta);

}  // namespace oracle
}  // namespace towertrain
