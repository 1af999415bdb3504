#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dfgp/grid.hpp"
#include "dfgp/sparse_cholesky.hpp"

namespace dfgp {

enum class Neighborhood { rook, queen };

Neighborhood parse_neighborhood(const std::string& name);

/// Adjacency E (symmetric 0/1, zero diagonal) over the valid BAUs, in state
/// indices, with degrees e_{i+}. W = diag(1/e) E is implied.
struct CarStructure {
    SparseMatrix adjacency;
    Vector degree;

    Index size() const { return adjacency.rows(); }
    /// Row-normalized proximity matrix W.
    SparseMatrix proximity() const;
};

/// Conditional autoregressive parameters for one time step.
struct CarParams {
    double gamma = 0.5;
    double tau2 = 1.0;

    friend bool operator==(const CarParams&, const CarParams&) = default;
};

/// Admissible spatial-dependence range. The upper end keeps Q positive definite.
struct GammaRange {
    double lower = 0.0;
    double upper = 1.0 - 1e-6;

    bool contains(double g) const { return g >= lower && g <= upper; }
};

/// Rook (or queen) adjacency between valid BAUs. Throws StructureError for an isolated BAU.
CarStructure build_adjacency(const BauGrid& grid, Neighborhood hood = Neighborhood::rook);

/// Q = diag(e)(I - gamma W)/tau2 = (diag(e) - gamma E)/tau2, symmetric positive definite.
SparseMatrix build_precision(const CarStructure& car, const CarParams& params, const GammaRange& range = {});

/// Draw xi ~ N(0, Q^{-1}); deterministic in the seed.
Vector sample_car(const CarStructure& car, const CarParams& params, std::uint64_t seed,
                  const GammaRange& range = {});

/// ln|I - gamma W|. Small structures use the eigenvalues of W (computed once);
/// large ones factor diag(e) - gamma E for each gamma.
class CarLogDet {
  public:
    explicit CarLogDet(const CarStructure& car, Index dense_limit = 2500);

    double operator()(double gamma) const;
    /// ln|Q| = -N ln tau2 + sum ln e + ln|I - gamma W|.
    double precision_logdet(const CarParams& params) const;
    bool dense() const { return eigenvalues_.has_value(); }

  private:
    std::optional<CarStructure> car_;  // kept only for the sparse route
    Index size_ = 0;
    double log_degree_sum_ = 0.0;
    std::optional<Vector> eigenvalues_;
};

}  // namespace dfgp
