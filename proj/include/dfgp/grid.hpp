#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dfgp/types.hpp"

namespace dfgp {

/// Axis-aligned rectangle [x0, x1] x [y0, y1].
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool contains(Coord c) const { return c.x >= x0 && c.x <= x1 && c.y >= y0 && c.y <= y1; }
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }

    friend bool operator==(const Box&, const Box&) = default;
};

/// Regular grid of equal-area basic areal units (BAUs).
///
/// Grid indices are row-major from the origin: index = row * nx + col, with
/// row counting along y. An optional validity mask removes BAUs (e.g. land
/// cells) from the model; the latent state is defined over the valid BAUs
/// only, addressed by a compact "state index" in increasing grid-index order.
class BauGrid {
  public:
    BauGrid(int nx, int ny, double cell_size, Coord origin, std::vector<bool> mask = {});

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    double cell_size() const { return cell_size_; }
    Coord origin() const { return origin_; }

    /// Number of grid cells, nx * ny.
    std::size_t cells() const { return static_cast<std::size_t>(nx_) * ny_; }
    /// Number of valid BAUs, i.e. the state dimension N.
    std::size_t size() const { return active_.size(); }

    std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * nx_ + col; }
    int row(std::size_t grid_index) const { return static_cast<int>(grid_index / nx_); }
    int col(std::size_t grid_index) const { return static_cast<int>(grid_index % nx_); }

    Coord centroid(std::size_t grid_index) const;
    /// Centroids of all grid cells in grid-index order.
    std::vector<Coord> centroids() const;
    Box bounds() const;
    /// Lower-left corner of a cell.
    Coord corner(std::size_t grid_index) const;

    bool valid(std::size_t grid_index) const { return mask_.empty() || mask_[grid_index]; }
    bool has_mask() const { return !mask_.empty(); }
    const std::vector<bool>& mask() const { return mask_; }

    /// Grid indices of the valid BAUs; position in this list is the state index.
    const std::vector<std::size_t>& active() const { return active_; }
    std::optional<Index> state_index(std::size_t grid_index) const;
    std::size_t grid_index(Index state_index) const { return active_[static_cast<std::size_t>(state_index)]; }

    /// Grid cell containing a point, if inside the grid.
    std::optional<std::size_t> locate(Coord c) const;

  private:
    int nx_;
    int ny_;
    double cell_size_;
    Coord origin_;
    std::vector<bool> mask_;
    std::vector<std::size_t> active_;
    std::vector<Index> state_of_;  // grid index -> state index or -1
};

BauGrid build_grid(int nx, int ny, double cell_size, Coord origin, std::vector<bool> mask = {});

/// Areal region an observation integrates over, as a set of covered BAUs (grid indices).
struct Footprint {
    std::vector<std::size_t> bau_indices;
    int instrument = 1;  // 1..k0
    int time = 1;        // 1..T
};

/// Throws InvalidFootprint if empty, out of range, duplicated or touching masked BAUs.
void validate_footprint(const Footprint& fp, const BauGrid& grid);

struct Weight {
    Index state_index;
    double value;
};

/// Change-of-support row: weight 1/m on each of the m covered BAUs, in state indices.
std::vector<Weight> footprint_row(const Footprint& fp, const BauGrid& grid);

/// Stacks footprint rows into an n x N sparse averaging matrix (the B_t of the model).
SparseRowMatrix footprint_matrix(const std::vector<Footprint>& footprints, const BauGrid& grid);

using PointFunction = std::function<double(Coord)>;

inline constexpr int kDefaultMcPoints = 30;

/// Average of `fn` at `n_points` uniform random points inside one grid cell.
double mc_average(const PointFunction& fn, const BauGrid& grid, std::size_t grid_index,
                  int n_points = kDefaultMcPoints, std::uint64_t seed = 0);

/// Uniform sample points used for BAU-level Monte Carlo averaging, reproducible per cell.
std::vector<Coord> mc_points(const BauGrid& grid, std::size_t grid_index, int n_points, std::uint64_t seed);

/// N x p matrix of BAU-level covariates (Monte Carlo averages of point-level functions).
Matrix bau_covariates(const std::vector<PointFunction>& x_point, const BauGrid& grid,
                      int n_points = kDefaultMcPoints, std::uint64_t seed = 0);

/// n x p matrix of footprint-level covariates: footprint averages of the BAU-level values.
Matrix aggregate_covariates(const std::vector<PointFunction>& x_point, const std::vector<Footprint>& footprints,
                            const BauGrid& grid, int n_points = kDefaultMcPoints, std::uint64_t seed = 0);

/// Latitude-like covariate: y rescaled to [-1, 1] over the grid extent.
PointFunction scaled_latitude(const BauGrid& grid);

/// Named point covariates: "1", "lat", "lat2".
std::vector<PointFunction> covariate_terms(const std::vector<std::string>& names, const BauGrid& grid);

}  // namespace dfgp
