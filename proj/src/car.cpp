#include "dfgp/car.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "dfgp/error.hpp"

namespace dfgp {

Neighborhood parse_neighborhood(const std::string& name) {
    if (name == "rook") return Neighborhood::rook;
    if (name == "queen") return Neighborhood::queen;
    throw InvalidArgument("unknown neighborhood '" + name + "' (expected rook or queen)");
}

SparseMatrix CarStructure::proximity() const {
    SparseMatrix w = adjacency;
    for (Index k = 0; k < w.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(w, k); it; ++it) it.valueRef() /= degree[it.row()];
    return w;
}

CarStructure build_adjacency(const BauGrid& grid, Neighborhood hood) {
    const Index n = static_cast<Index>(grid.size());
    std::vector<Triplet> trips;
    Vector degree = Vector::Zero(n);
    for (Index i = 0; i < n; ++i) {
        const std::size_t g = grid.grid_index(i);
        const int r = grid.row(g);
        const int c = grid.col(g);
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
                if (dr == 0 && dc == 0) continue;
                if (hood == Neighborhood::rook && dr != 0 && dc != 0) continue;
                const int rr = r + dr;
                const int cc = c + dc;
                if (rr < 0 || cc < 0 || rr >= grid.ny() || cc >= grid.nx()) continue;
                const auto j = grid.state_index(grid.index(rr, cc));
                if (!j) continue;
                trips.emplace_back(static_cast<int>(i), static_cast<int>(*j), 1.0);
                degree[i] += 1.0;
            }
        if (degree[i] == 0.0)
            throw StructureError("BAU " + std::to_string(g) + " has no valid neighbor", static_cast<long>(g));
    }
    CarStructure car;
    car.adjacency.resize(n, n);
    car.adjacency.setFromTriplets(trips.begin(), trips.end());
    car.adjacency.makeCompressed();
    car.degree = std::move(degree);
    return car;
}

SparseMatrix build_precision(const CarStructure& car, const CarParams& p, const GammaRange& range) {
    if (!range.contains(p.gamma) || !std::isfinite(p.gamma))
        throw InvalidParameter("gamma = " + std::to_string(p.gamma) + " outside [" + std::to_string(range.lower) +
                               ", " + std::to_string(range.upper) + "]");
    if (!(p.tau2 > 0.0) || !std::isfinite(p.tau2)) throw InvalidParameter("tau2 must be positive");
    const Index n = car.size();
    std::vector<Triplet> trips;
    trips.reserve(static_cast<std::size_t>(car.adjacency.nonZeros() + n));
    for (Index i = 0; i < n; ++i) trips.emplace_back(static_cast<int>(i), static_cast<int>(i), car.degree[i] / p.tau2);
    for (Index k = 0; k < car.adjacency.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(car.adjacency, k); it; ++it)
            trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                               -p.gamma * it.value() / p.tau2);
    SparseMatrix q(n, n);
    q.setFromTriplets(trips.begin(), trips.end());
    q.makeCompressed();
    return q;
}

Vector sample_car(const CarStructure& car, const CarParams& params, std::uint64_t seed, const GammaRange& range) {
    const SparseCholesky chol(build_precision(car, params, range));
    Rng rng(seed);
    return chol.sample(rng);
}

CarLogDet::CarLogDet(const CarStructure& car, Index dense_limit) : size_(car.size()) {
    log_degree_sum_ = car.degree.array().log().sum();
    if (car.size() <= dense_limit) {
        // W is similar to the symmetric diag(e)^{-1/2} E diag(e)^{-1/2}.
        const Vector s = car.degree.array().rsqrt();
        const Matrix sym = s.asDiagonal() * Matrix(car.adjacency) * s.asDiagonal();
        Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
        eigenvalues_ = es.eigenvalues();
    } else {
        car_ = car;
    }
}

double CarLogDet::operator()(double gamma) const {
    if (eigenvalues_) return (1.0 - gamma * eigenvalues_->array()).log().sum();
    const SparseCholesky chol(build_precision(*car_, {gamma, 1.0}, {-1e300, 1e300}));
    return chol.logdet() - log_degree_sum_;
}

double CarLogDet::precision_logdet(const CarParams& p) const {
    return -static_cast<double>(size_) * std::log(p.tau2) + log_degree_sum_ + (*this)(p.gamma);
}

}  // namespace dfgp
