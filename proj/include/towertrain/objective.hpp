#pragma once

#include <cstdint>
#include <span>

#include "towertrain/linalg.hpp"
#include "towertrain/tower.hpp"

namespace towertrain {

enum class LossKind { logistic, squared };

LossKind parse_loss(const std::string& name);
const char* loss_name(LossKind k);

// Pointwise loss value and its first/second derivative in the prediction.
// Both forms are safe against overflow for large |yhat|.
struct LossTerms {
    double value = 0.0, first = 0.0, second = 0.0;
};
LossTerms loss_terms(LossKind kind, double y, double yhat);

// One training problem: observed pairs with labels, per-side inputs, entity
// weights, imputed embeddings, and loss/penalty settings.  The model treats
// every unobserved pair as carrying an imputed label, so the objective runs
// over all rows x cols pairs.
struct ProblemData {
    SparseMatrixDual observed;  // values are the labels R_ij
    FeatureSet feats_u, feats_v;
    Vec a, b;                   // positive per-entity weights
    DenseMatrix imput_p, imput_q;  // rows x k, cols x k imputed embeddings
    double omega = 1.0;            // weight of the all-pairs imputed term
    double lambda = 1.0;           // L2 penalty weight
    LossKind loss = LossKind::logistic;

    // Precomputed at make_problem: the constant Gramian inner product of the
    // imputed embeddings, the imputed label of every observed pair (row
    // order), the row index of every observed pair (row order), and weights
    // divided by per-row/column observation counts used by the per-pair
    // subsampled estimators (zero for empty rows/columns).
    double tilde_gram_const = 0.0;
    Vec imputed_labels;
    std::vector<std::size_t> pair_row;
    Vec a_bar, b_bar;

    std::size_t m() const { return observed.rows(); }
    std::size_t n() const { return observed.cols(); }
    std::size_t k() const { return imput_p.cols(); }
};

ProblemData make_problem(SparseMatrixDual observed, FeatureSet feats_u, FeatureSet feats_v,
                         Vec a, Vec b, DenseMatrix imput_p, DenseMatrix imput_q, double omega,
                         double lambda, LossKind loss);

struct EmbeddingBlock {
    DenseMatrix values;
    ForwardTape tape;
};

// Embeddings, their Gramians and observed-pair predictions at one parameter
// vector, stamped with the caller's version counter.  Evaluations reuse a
// cache whose stamp matches and rebuild it otherwise.
struct GramianCache {
    static constexpr std::uint64_t no_version = ~std::uint64_t{0};
    std::uint64_t theta_version = no_version;
    EmbeddingBlock P, Q;            // all-entity embeddings with tapes
    DenseMatrix Pc, Qc;             // P^T A P, Q^T B Q
    DenseMatrix Phat, Qhat;         // Ptilde^T A P, Qtilde^T B Q
    Vec yhat;                       // p_i . q_j per observed pair, row order

    bool valid_for(std::uint64_t v) const { return theta_version == v; }
};

// Objective, gradient and Gauss-Newton products for the all-pairs model.
// The unobserved part is evaluated through the Gramian identity
//   Lneg = 1/2 <Ptc, Qtc> - <Phat, Qhat> + 1/2 <Pc, Qc>
// so no evaluation ever materializes the rows x cols pair grid.
class PairwiseObjective {
  public:
    PairwiseObjective(TowerSpec spec_u, TowerSpec spec_v, ProblemData data);

    std::size_t dim() const { return dim_u_ + dim_v_; }
    std::size_t dim_u() const { return dim_u_; }
    std::size_t dim_v() const { return dim_v_; }
    const Tower& tower_u() const { return tower_u_; }
    const Tower& tower_v() const { return tower_v_; }
    const ProblemData& data() const { return data_; }

    std::span<const double> theta_u(std::span<const double> theta) const {
        return theta.subspan(0, dim_u_);
    }
    std::span<const double> theta_v(std::span<const double> theta) const {
        return theta.subspan(dim_u_, dim_v_);
    }

    // Rebuilds embeddings, Gramians and observed predictions when the cache
    // stamp differs from version.
    void refresh_cache(std::span<const double> theta, std::uint64_t version,
                       GramianCache& cache) const;

    double objective(std::span<const double> theta, std::uint64_t version,
                     GramianCache& cache) const;
    Vec gradient(std::span<const double> theta, std::uint64_t version, GramianCache& cache) const;
    // Gauss-Newton curvature product along direction d (adds lambda * d).
    Vec gn_product(std::span<const double> theta, std::span<const double> d,
                   std::uint64_t version, GramianCache& cache) const;

  private:
    Tower tower_u_, tower_v_;
    ProblemData data_;
    std::size_t dim_u_ = 0, dim_v_ = 0;
};

}  // namespace towertrain
