#include "dfgp/sparse_cholesky.hpp"

#include <cmath>
#include <vector>

#include <Eigen/SparseCholesky>

#include "dfgp/error.hpp"

namespace dfgp {

struct SparseCholesky::Impl {
    Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> llt;
};

SparseCholesky::SparseCholesky(const SparseMatrix& m, int time) {
    if (m.rows() != m.cols()) throw InvalidArgument("sparse_factorize: matrix is not square");
    auto impl = std::make_shared<Impl>();
    impl->llt.compute(m);
    if (impl->llt.info() != Eigen::Success)
        throw NumericalError("sparse Cholesky failed: matrix is not positive definite", time);
    impl_ = std::move(impl);
}

Index SparseCholesky::size() const { return impl_->llt.rows(); }

Index SparseCholesky::factor_nonzeros() const { return impl_->llt.matrixL().nestedExpression().nonZeros(); }

Vector SparseCholesky::solve(const Vector& b) const { return impl_->llt.solve(b); }

Matrix SparseCholesky::solve(const Matrix& b) const { return impl_->llt.solve(b); }

double SparseCholesky::logdet() const {
    const SparseMatrix& l = impl_->llt.matrixL().nestedExpression();
    double s = 0.0;
    for (Index j = 0; j < l.cols(); ++j) s += std::log(l.valuePtr()[l.outerIndexPtr()[j]]);
    return 2.0 * s;
}

Vector SparseCholesky::inverse_diagonal() const {
    const SparseMatrix& l = impl_->llt.matrixL().nestedExpression();
    const int* outer = l.outerIndexPtr();
    const int* inner = l.innerIndexPtr();
    const double* val = l.valuePtr();
    const Index n = l.cols();

    // z shares the pattern of L and holds the lower triangle of (L L')^{-1}.
    // Each column stores its diagonal first, then rows in increasing order.
    std::vector<double> z(static_cast<std::size_t>(l.nonZeros()), 0.0);
    std::vector<double> acc;
    for (Index j = n - 1; j >= 0; --j) {
        const int p0 = outer[j];
        const int m = outer[j + 1] - p0 - 1;
        const double d = val[p0];
        acc.assign(static_cast<std::size_t>(m), 0.0);
        for (int b = 0; b < m; ++b) {
            const int col = inner[p0 + 1 + b];
            const double lb = val[p0 + 1 + b];
            int q = outer[col];
            for (int a = b; a < m; ++a) {
                const int target = inner[p0 + 1 + a];
                while (inner[q] != target) ++q;
                const double zab = z[static_cast<std::size_t>(q)];
                acc[static_cast<std::size_t>(a)] += lb * zab;
                if (a != b) acc[static_cast<std::size_t>(b)] += val[p0 + 1 + a] * zab;
            }
        }
        double diag = 1.0 / (d * d);
        for (int a = 0; a < m; ++a) {
            const double zaj = -acc[static_cast<std::size_t>(a)] / d;
            z[static_cast<std::size_t>(p0 + 1 + a)] = zaj;
            diag -= val[p0 + 1 + a] * zaj / d;
        }
        z[static_cast<std::size_t>(p0)] = diag;
    }

    const auto& perm = impl_->llt.permutationP().indices();
    Vector out(n);
    for (Index i = 0; i < n; ++i) out[i] = z[static_cast<std::size_t>(outer[perm[i]])];
    return out;
}

Vector SparseCholesky::sample_with(const Vector& zvec) const {
    if (zvec.size() != size()) throw InvalidArgument("sample_with: wrong number of normals");
    // y = L^{-T} z has covariance (L L')^{-1}; undo the permutation.
    Vector y = impl_->llt.matrixU().solve(zvec);
    return impl_->llt.permutationPinv() * y;
}

}  // namespace dfgp
