#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfgp/basis.hpp"
#include "dfgp/car.hpp"
#include "dfgp/dynamics.hpp"
#include "dfgp/grid.hpp"

namespace dfgp {

/// Cyclic vertical bands of missing columns: column c is unobserved on day t when
/// (c + offset + shift * (t - 1)) mod period < width.
struct SwathSpec {
    int width = 0;  // 0 disables gaps
    int shift = 0;
    int period = 0;  // 0 means nx
    int offset = 0;

    bool missing(int col, int time, int nx) const;

    friend bool operator==(const SwathSpec&, const SwathSpec&) = default;
};

struct InstrumentSpec {
    /// Footprints are block x block squares of BAUs tiling the grid (partial at the edges).
    int block = 1;
    double sigma2 = 0.05;
    double var_factor = 1.0;
    SwathSpec swath;
    double drop_rate = 0.0;

    friend bool operator==(const InstrumentSpec&, const InstrumentSpec&) = default;
};

struct ScenarioConfig {
    int nx = 40;
    int ny = 40;
    double cell_size = 1.0;
    Coord origin{0.0, 0.0};
    int horizon = 8;
    std::vector<int> basis_counts{9};
    double radius_factor = kDefaultRadiusFactor;
    int mc_points = kDefaultMcPoints;
    std::vector<std::string> covariates{"1", "lat", "lat2"};
    Neighborhood neighborhood = Neighborhood::rook;

    // True parameters (time-invariant).
    std::vector<double> beta{10.0, 2.0, -4.0};
    double h_scale = 0.9;  // H = h_scale I
    double u_var = 0.5;    // U = u_var I
    double k0_var = 1.0;   // K0 = k0_var I
    double gamma = 0.9;
    double tau2 = 0.5;

    std::vector<InstrumentSpec> instruments{
        {1, 0.05, 1.0, {8, 5, 20, 0}, 0.1},
        {4, 0.10, 1.0, {8, 7, 40, 0}, 0.05},
    };
    std::uint64_t seed = 1;

    void validate() const;

    friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

/// Grid, design and CAR structure of a scenario.
struct Scenario {
    BauGrid grid;
    BisquareBasis basis;
    Model model;
};

Scenario build_scenario(const ScenarioConfig& cfg);
DfgpParams true_params(const ScenarioConfig& cfg, const Model& model);

/// Latent draw: eta_0..eta_T, xi_1..xi_T and the BAU-level field Y_t = X beta_t + S eta_t + xi_t.
struct Truth {
    std::vector<Vector> eta;
    std::vector<Vector> xi;
    std::vector<Vector> y;
};

/// Exact draw from the generative model. U and K0 may be singular (degenerate draws).
Truth simulate_truth(const Model& model, const DfgpParams& params, int horizon, std::uint64_t seed);
Truth simulate_truth(const ScenarioConfig& cfg);

/// Footprint observations of the truth by every instrument, with swath gaps and random drops.
struct ObservationSet {
    std::vector<TimeSlice> slices;
    /// Footprints indexed by footprint id (ids are unique across time steps).
    std::vector<Footprint> footprints;
};

ObservationSet observe(const Scenario& sc, const Truth& truth, const ScenarioConfig& cfg);

}  // namespace dfgp
