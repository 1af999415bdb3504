#pragma once

#include <cstdint>
#include <vector>

#include "dfgp/grid.hpp"

namespace dfgp {

/// Bisquare function {1 - (d/l)^2}^2 for d = |u - c| <= l, zero beyond the radius.
double bisquare_eval(Coord u, Coord c, double radius);

/// Radius = factor x lattice spacing at each resolution.
inline constexpr double kDefaultRadiusFactor = 1.5;

/// Multi-resolution set of bisquare basis functions (time-invariant).
class BisquareBasis {
  public:
    BisquareBasis(std::vector<Coord> centers, std::vector<double> radii, std::vector<int> resolution = {});

    std::size_t size() const { return centers_.size(); }
    const std::vector<Coord>& centers() const { return centers_; }
    const std::vector<double>& radii() const { return radii_; }
    const std::vector<int>& resolution() const { return resolution_; }

    /// Values of all r functions at a point.
    void eval(Coord u, Eigen::Ref<Eigen::RowVectorXd> out) const;

  private:
    std::vector<Coord> centers_;
    std::vector<double> radii_;
    std::vector<int> resolution_;
};

/// Equally spaced center lattices, one per entry of `counts`. Each count is laid
/// out as the a x b factorization whose aspect best matches the box; radii are
/// `radius_factor` times the larger of the two lattice spacings.
BisquareBasis layout_multires(const Box& domain, const std::vector<int>& counts,
                              double radius_factor = kDefaultRadiusFactor);

/// N x r matrix of BAU-level basis values (Monte Carlo average inside each valid BAU).
Matrix basis_matrix(const BisquareBasis& basis, const BauGrid& grid, int n_points = kDefaultMcPoints,
                    std::uint64_t seed = 0);

/// n x r matrix of footprint-level basis values (footprint averages of the BAU rows).
Matrix basis_matrix(const BisquareBasis& basis, const std::vector<Footprint>& footprints, const BauGrid& grid,
                    int n_points = kDefaultMcPoints, std::uint64_t seed = 0);

}  // namespace dfgp
