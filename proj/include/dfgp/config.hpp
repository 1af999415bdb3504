#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfgp/basis.hpp"
#include "dfgp/car.hpp"
#include "dfgp/estimate.hpp"
#include "dfgp/evaluate.hpp"
#include "dfgp/synth.hpp"

namespace dfgp {

namespace fs = std::filesystem;

struct GridSection {
    int nx = 40;
    int ny = 40;
    double cell_size = 1.0;
    Coord origin{0.0, 0.0};
    fs::path mask;  // empty: every cell valid

    friend bool operator==(const GridSection&, const GridSection&) = default;
};

struct BasisSection {
    std::vector<int> counts{9};
    double radius_factor = kDefaultRadiusFactor;
    int mc_points = kDefaultMcPoints;
    fs::path centers;  // explicit center_x,center_y,radius CSV; overrides counts

    friend bool operator==(const BasisSection&, const BasisSection&) = default;
};

struct ModelSection {
    std::vector<std::string> covariates{"1", "lat", "lat2"};
    Neighborhood neighborhood = Neighborhood::rook;
    double gamma_lower = 0.0;
    int instruments = 2;
    bool lowrank_only = false;

    friend bool operator==(const ModelSection&, const ModelSection&) = default;
};

struct DataSection {
    fs::path observations;
    fs::path footprints;
    fs::path truth;   // optional BAU-level truth for scoring
    fs::path params;  // parameters used when estimation is switched off
    int horizon = 0;  // 0: largest time in the observations

    friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct ProtocolSection {
    Protocol protocol = Protocol::smoothing;
    bool estimate = true;
    bool warm_start = true;

    friend bool operator==(const ProtocolSection&, const ProtocolSection&) = default;
};

struct CvSection {
    HoldoutPlan holdout;
    std::vector<CvMethod> methods{CvMethod::dfgp, CvMethod::lowrank, CvMethod::localkrige};
    LocalKrigeOptions krige;

    friend bool operator==(const CvSection&, const CvSection&) = default;
};

/// Everything a CLI run needs. One seed drives the scenario, the estimator, the
/// holdout and the kriging pilot (see `with_seed`).
struct RunConfig {
    std::uint64_t seed = 1;
    int threads = 0;  // 0: hardware concurrency
    GridSection grid;
    BasisSection basis;
    ModelSection model;
    DataSection data;
    EstimatorConfig estimator;
    ProtocolSection protocol;
    CvSection cv;
    /// Scenario truth and instruments; grid, basis and covariates come from the sections above.
    ScenarioConfig scenario;
    fs::path output_dir = "out";

    friend bool operator==(const RunConfig&, const RunConfig&) = default;

    /// Copy with `seed` propagated into every seeded sub-config.
    RunConfig with_seed(std::uint64_t s) const;
    /// Scenario config with grid/basis/model sections merged in.
    ScenarioConfig scenario_config() const;
};

/// INI text (sections [run] [grid] [basis] [model] [data] [estimator] [protocol]
/// [holdout] [localkrige] [scenario] [instrument1] ...). Relative paths are resolved
/// against `base_dir`. Unknown sections or keys are errors.
RunConfig parse_config(const std::string& text, const fs::path& base_dir = {});
RunConfig load_config(const fs::path& path);
std::string serialize_config(const RunConfig& cfg);

/// Grid, basis and model built from the configuration.
struct ModelSetup {
    BauGrid grid;
    BisquareBasis basis;
    Model model;
};
ModelSetup build_model(const RunConfig& cfg);

}  // namespace dfgp
