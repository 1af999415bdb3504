#include "dfgp/grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dfgp/error.hpp"
#include "dfgp/rng.hpp"

namespace dfgp {

BauGrid::BauGrid(int nx, int ny, double cell_size, Coord origin, std::vector<bool> mask)
    : nx_(nx), ny_(ny), cell_size_(cell_size), origin_(origin), mask_(std::move(mask)) {
    if (nx < 1 || ny < 1) throw InvalidArgument("grid dimensions must be positive");
    if (!(cell_size > 0.0) || !std::isfinite(cell_size)) throw InvalidArgument("cell_size must be positive");
    if (!mask_.empty() && mask_.size() != cells())
        throw InvalidArgument("mask length " + std::to_string(mask_.size()) + " does not match grid size " +
                              std::to_string(cells()));
    state_of_.assign(cells(), -1);
    for (std::size_t g = 0; g < cells(); ++g) {
        if (valid(g)) {
            state_of_[g] = static_cast<Index>(active_.size());
            active_.push_back(g);
        }
    }
    if (active_.empty()) throw InvalidArgument("grid mask leaves no valid BAU");
}

Coord BauGrid::centroid(std::size_t g) const {
    return {origin_.x + (col(g) + 0.5) * cell_size_, origin_.y + (row(g) + 0.5) * cell_size_};
}

Coord BauGrid::corner(std::size_t g) const {
    return {origin_.x + col(g) * cell_size_, origin_.y + row(g) * cell_size_};
}

std::vector<Coord> BauGrid::centroids() const {
    std::vector<Coord> out(cells());
    for (std::size_t g = 0; g < cells(); ++g) out[g] = centroid(g);
    return out;
}

Box BauGrid::bounds() const {
    return {origin_.x, origin_.y, origin_.x + nx_ * cell_size_, origin_.y + ny_ * cell_size_};
}

std::optional<Index> BauGrid::state_index(std::size_t g) const {
    if (g >= cells() || state_of_[g] < 0) return std::nullopt;
    return state_of_[g];
}

std::optional<std::size_t> BauGrid::locate(Coord c) const {
    const double fx = (c.x - origin_.x) / cell_size_;
    const double fy = (c.y - origin_.y) / cell_size_;
    if (fx < 0 || fy < 0 || fx >= nx_ || fy >= ny_) return std::nullopt;
    return index(static_cast<int>(fy), static_cast<int>(fx));
}

BauGrid build_grid(int nx, int ny, double cell_size, Coord origin, std::vector<bool> mask) {
    return BauGrid(nx, ny, cell_size, origin, std::move(mask));
}

void validate_footprint(const Footprint& fp, const BauGrid& grid) {
    if (fp.bau_indices.empty()) throw InvalidFootprint("footprint covers no BAU");
    std::vector<std::size_t> sorted = fp.bau_indices;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw InvalidFootprint("footprint repeats a BAU index");
    for (std::size_t g : sorted) {
        if (g >= grid.cells())
            throw InvalidFootprint("footprint BAU index " + std::to_string(g) + " outside grid of " +
                                   std::to_string(grid.cells()) + " cells");
        if (!grid.valid(g)) throw InvalidFootprint("footprint BAU index " + std::to_string(g) + " is masked");
    }
}

std::vector<Weight> footprint_row(const Footprint& fp, const BauGrid& grid) {
    validate_footprint(fp, grid);
    const double w = 1.0 / static_cast<double>(fp.bau_indices.size());
    std::vector<Weight> row;
    row.reserve(fp.bau_indices.size());
    for (std::size_t g : fp.bau_indices) row.push_back({*grid.state_index(g), w});
    std::sort(row.begin(), row.end(), [](const Weight& a, const Weight& b) { return a.state_index < b.state_index; });
    return row;
}

SparseRowMatrix footprint_matrix(const std::vector<Footprint>& footprints, const BauGrid& grid) {
    std::vector<Triplet> trips;
    for (std::size_t i = 0; i < footprints.size(); ++i)
        for (const Weight& w : footprint_row(footprints[i], grid))
            trips.emplace_back(static_cast<int>(i), static_cast<int>(w.state_index), w.value);
    SparseRowMatrix b(static_cast<Index>(footprints.size()), static_cast<Index>(grid.size()));
    b.setFromTriplets(trips.begin(), trips.end());
    b.makeCompressed();
    return b;
}

std::vector<Coord> mc_points(const BauGrid& grid, std::size_t g, int n_points, std::uint64_t seed) {
    if (n_points < 1) throw InvalidArgument("n_points must be >= 1");
    if (g >= grid.cells()) throw InvalidArgument("cell index outside grid");
    Rng rng(derive_seed(seed, g));
    const Coord c0 = grid.corner(g);
    std::vector<Coord> pts(static_cast<std::size_t>(n_points));
    for (auto& p : pts) {
        p.x = c0.x + uniform01(rng) * grid.cell_size();
        p.y = c0.y + uniform01(rng) * grid.cell_size();
    }
    return pts;
}

double mc_average(const PointFunction& fn, const BauGrid& grid, std::size_t g, int n_points, std::uint64_t seed) {
    double sum = 0.0;
    for (const Coord& p : mc_points(grid, g, n_points, seed)) sum += fn(p);
    return sum / n_points;
}

Matrix bau_covariates(const std::vector<PointFunction>& x_point, const BauGrid& grid, int n_points,
                      std::uint64_t seed) {
    Matrix x(static_cast<Index>(grid.size()), static_cast<Index>(x_point.size()));
    for (Index i = 0; i < x.rows(); ++i) {
        const auto pts = mc_points(grid, grid.grid_index(i), n_points, seed);
        for (Index j = 0; j < x.cols(); ++j) {
            double s = 0.0;
            for (const Coord& p : pts) s += x_point[static_cast<std::size_t>(j)](p);
            x(i, j) = s / n_points;
        }
    }
    return x;
}

Matrix aggregate_covariates(const std::vector<PointFunction>& x_point, const std::vector<Footprint>& footprints,
                            const BauGrid& grid, int n_points, std::uint64_t seed) {
    return footprint_matrix(footprints, grid) * bau_covariates(x_point, grid, n_points, seed);
}

PointFunction scaled_latitude(const BauGrid& grid) {
    const Box b = grid.bounds();
    const double mid = 0.5 * (b.y0 + b.y1);
    const double half = 0.5 * b.height();
    return [mid, half](Coord c) { return (c.y - mid) / half; };
}

std::vector<PointFunction> covariate_terms(const std::vector<std::string>& names, const BauGrid& grid) {
    std::vector<PointFunction> out;
    const PointFunction lat = scaled_latitude(grid);
    for (const auto& n : names) {
        if (n == "1")
            out.emplace_back([](Coord) { return 1.0; });
        else if (n == "lat")
            out.push_back(lat);
        else if (n == "lat2")
            out.emplace_back([lat](Coord c) { return lat(c) * lat(c); });
        else
            throw InvalidArgument("unknown covariate term '" + n + "' (expected 1, lat or lat2)");
    }
    return out;
}

}  // namespace dfgp
