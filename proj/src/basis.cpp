#include "dfgp/basis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dfgp/error.hpp"

namespace dfgp {

double bisquare_eval(Coord u, Coord c, double radius) {
    const double dx = u.x - c.x;
    const double dy = u.y - c.y;
    const double q = (dx * dx + dy * dy) / (radius * radius);
    if (q >= 1.0) return 0.0;
    const double s = 1.0 - q;
    return s * s;
}

BisquareBasis::BisquareBasis(std::vector<Coord> centers, std::vector<double> radii, std::vector<int> resolution)
    : centers_(std::move(centers)), radii_(std::move(radii)), resolution_(std::move(resolution)) {
    if (centers_.empty()) throw InvalidArgument("basis needs at least one function");
    if (radii_.size() != centers_.size()) throw InvalidArgument("basis centers and radii differ in length");
    if (resolution_.empty()) resolution_.assign(centers_.size(), 1);
    if (resolution_.size() != centers_.size()) throw InvalidArgument("basis resolution tags differ in length");
    for (double l : radii_)
        if (!(l > 0.0) || !std::isfinite(l)) throw InvalidArgument("basis radii must be positive");
}

void BisquareBasis::eval(Coord u, Eigen::Ref<Eigen::RowVectorXd> out) const {
    for (std::size_t i = 0; i < centers_.size(); ++i)
        out[static_cast<Index>(i)] = bisquare_eval(u, centers_[i], radii_[i]);
}

BisquareBasis layout_multires(const Box& domain, const std::vector<int>& counts, double radius_factor) {
    if (counts.empty()) throw InvalidArgument("layout_multires: counts must be nonempty");
    if (!(radius_factor > 0.0)) throw InvalidArgument("layout_multires: radius factor must be positive");
    if (!(domain.width() > 0.0) || !(domain.height() > 0.0))
        throw InvalidArgument("layout_multires: domain box is degenerate");
    const double aspect = domain.width() / domain.height();

    std::vector<Coord> centers;
    std::vector<double> radii;
    std::vector<int> tags;
    for (std::size_t level = 0; level < counts.size(); ++level) {
        const int n = counts[level];
        if (n < 1) throw InvalidArgument("layout_multires: counts must be positive");
        int best_cols = n;
        double best_err = std::numeric_limits<double>::infinity();
        for (int a = 1; a <= n; ++a) {
            if (n % a != 0) continue;
            const int b = n / a;
            const double err = std::abs(std::log((static_cast<double>(a) / b) / aspect));
            if (err < best_err - 1e-12) {
                best_err = err;
                best_cols = a;
            }
        }
        const int cols = best_cols;
        const int rows = n / cols;
        const double dx = domain.width() / cols;
        const double dy = domain.height() / rows;
        const double radius = radius_factor * std::max(dx, dy);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                centers.push_back({domain.x0 + (j + 0.5) * dx, domain.y0 + (i + 0.5) * dy});
                radii.push_back(radius);
                tags.push_back(static_cast<int>(level) + 1);
            }
    }
    return BisquareBasis(std::move(centers), std::move(radii), std::move(tags));
}

Matrix basis_matrix(const BisquareBasis& basis, const BauGrid& grid, int n_points, std::uint64_t seed) {
    const Index r = static_cast<Index>(basis.size());
    Matrix s = Matrix::Zero(static_cast<Index>(grid.size()), r);
    const double half_diag = grid.cell_size() * std::sqrt(0.5);
    for (Index i = 0; i < s.rows(); ++i) {
        const std::size_t g = grid.grid_index(i);
        const Coord c = grid.centroid(g);
        // Functions whose support cannot reach the cell are skipped.
        std::vector<std::size_t> near;
        for (std::size_t k = 0; k < basis.size(); ++k) {
            const double dx = c.x - basis.centers()[k].x;
            const double dy = c.y - basis.centers()[k].y;
            const double reach = basis.radii()[k] + half_diag;
            if (dx * dx + dy * dy < reach * reach) near.push_back(k);
        }
        if (near.empty()) continue;
        const auto pts = mc_points(grid, g, n_points, seed);
        for (std::size_t k : near) {
            double acc = 0.0;
            for (const Coord& p : pts) acc += bisquare_eval(p, basis.centers()[k], basis.radii()[k]);
            s(i, static_cast<Index>(k)) = acc / n_points;
        }
    }
    return s;
}

Matrix basis_matrix(const BisquareBasis& basis, const std::vector<Footprint>& footprints, const BauGrid& grid,
                    int n_points, std::uint64_t seed) {
    return footprint_matrix(footprints, grid) * basis_matrix(basis, grid, n_points, seed);
}

}  // namespace dfgp
