#pragma once

#include <memory>

#include "dfgp/rng.hpp"
#include "dfgp/types.hpp"

namespace dfgp {

/// Sparse Cholesky factorization P M P' = L L' of a symmetric positive definite
/// matrix with an approximate-minimum-degree fill-reducing permutation P.
///
/// Immutable after construction and cheap to copy (shared factor). Only the
/// lower triangle of the input is read.
class SparseCholesky {
  public:
    /// Throws NumericalError if M is not positive definite; `time` tags the error.
    explicit SparseCholesky(const SparseMatrix& m, int time = 0);

    Index size() const;
    /// Number of stored entries of L.
    Index factor_nonzeros() const;

    Vector solve(const Vector& b) const;
    Matrix solve(const Matrix& b) const;
    /// ln |M|.
    double logdet() const;
    /// diag(M^{-1}) by the Takahashi recursion on the pattern of L.
    Vector inverse_diagonal() const;
    /// A draw from N(0, M^{-1}) driven by the given standard normals.
    Vector sample_with(const Vector& standard_normals) const;
    Vector sample(Rng& rng) const { return sample_with(standard_normal(rng, size())); }

  private:
    struct Impl;
    std::shared_ptr<const Impl> impl_;
};

}  // namespace dfgp
