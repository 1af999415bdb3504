#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace dfgp {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, int>;
using Triplet = Eigen::Triplet<double, int>;

/// Planar coordinate in the units of the grid (cell_size per cell edge).
struct Coord {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Coord&, const Coord&) = default;
};

/// Symmetrize in place: M <- (M + M')/2.
inline void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// G with G G' = M for a symmetric positive semidefinite M (Cholesky when it exists,
/// otherwise a clamped eigen square root).
inline Matrix psd_factor(const Matrix& m) {
    const Eigen::LLT<Matrix> llt(m);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(m));
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace dfgp
