#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "towertrain/errors.hpp"

namespace towertrain {

using Vec = std::vector<double>;

// Dense row-major matrix.  The entries constructor validates finiteness;
// the (rows, cols) constructor zero-fills and is used on hot paths.
class DenseMatrix {
  public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols);
    DenseMatrix(std::size_t rows, std::size_t cols, Vec entries);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v);
    bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  private:
    std::size_t rows_ = 0, cols_ = 0;
    Vec data_;
};

struct Triple {
    std::size_t i = 0, j = 0;
    double value = 0.0;
};

// Sparse pattern with values, stored in both row-compressed and
// column-compressed form so the same data serves X*Q and X^T*P products.
// The column view indexes back into the row-ordered value array.
// Entries are unique per (i, j); duplicates are a data error.
class SparseMatrixDual {
  public:
    SparseMatrixDual() = default;
    SparseMatrixDual(std::size_t rows, std::size_t cols, std::vector<Triple> entries);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t nnz() const { return values_.size(); }

    // Row view: entries of row i live at positions [row_ptr[i], row_ptr[i+1]).
    std::span<const std::size_t> row_ptr() const { return row_ptr_; }
    std::span<const std::size_t> col_idx() const { return col_idx_; }
    std::span<const double> values() const { return values_; }

    // Column view: row_idx/value_pos of column j at [col_ptr[j], col_ptr[j+1]).
    // value_pos[p] is the index of that entry in the row-ordered value array.
    std::span<const std::size_t> col_ptr() const { return col_ptr_; }
    std::span<const std::size_t> row_idx() const { return row_idx_; }
    std::span<const std::size_t> value_pos() const { return value_pos_; }

    std::size_t row_nnz(std::size_t i) const { return row_ptr_[i + 1] - row_ptr_[i]; }
    std::size_t col_nnz(std::size_t j) const { return col_ptr_[j + 1] - col_ptr_[j]; }

    // Entries in row-major order (the order of values()).
    std::vector<Triple> triples() const;

  private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<std::size_t> row_ptr_, col_idx_;
    Vec values_;
    std::vector<std::size_t> col_ptr_, row_idx_, value_pos_;
};

// ---- kernels (OpenMP; bit-identical results for any worker count) ----

// sum_ij a_ij * b_ij; shapes must match.
double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b);

// x * q (or x^T * q when transposed) where only stored entries contribute.
DenseMatrix spmm(const SparseMatrixDual& x, const DenseMatrix& q, bool transposed = false);
// Same pattern as x but with the given row-ordered values.
DenseMatrix spmm(const SparseMatrixDual& x, std::span<const double> values, const DenseMatrix& q,
                 bool transposed = false);

// other^T * diag(weights) * p, a small square matrix of embedding Gramians.
DenseMatrix weighted_gram(const DenseMatrix& p, std::span<const double> weights,
                          const DenseMatrix& other);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);     // a * b
DenseMatrix matmul_bt(const DenseMatrix& a, const DenseMatrix& b);  // a * b^T
DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b);  // a^T * b

double dot(std::span<const double> x, std::span<const double> y);
double norm2(std::span<const double> x);
void axpy(double alpha, std::span<const double> x, std::span<double> y);  // y += alpha*x
void scale(double alpha, std::span<double> x);

bool all_finite(std::span<const double> x);

// Reference kernels: plain serial loops, kept independent of the parallel
// implementations for testing and benchmarking.
namespace serial {
double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix spmm(const SparseMatrixDual& x, const DenseMatrix& q, bool transposed = false);
DenseMatrix weighted_gram(const DenseMatrix& p, std::span<const double> weights,
                          const DenseMatrix& other);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix matmul_bt(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b);
double dot(std::span<const double> x, std::span<const double> y);
}  // namespace serial

}  // namespace towertrain
