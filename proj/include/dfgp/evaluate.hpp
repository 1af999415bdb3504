#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfgp/estimate.hpp"
#include "dfgp/grid.hpp"

namespace dfgp {

/// Anisotropic space-time exponential covariance with nugget.
struct ExpCovParams {
    double sigma2 = 1.0;
    double phi_s = 1.0;
    double phi_t = 1.0;
    double nugget = 0.0;

    void validate() const;
};

/// sigma2 exp(-sqrt(h^2/phi_s^2 + u^2/phi_t^2)) + nugget * [h = 0 and u = 0].
double exp_cov(double h, double u, const ExpCovParams& p);

/// An observation treated as a point at its footprint centroid.
struct PointObservation {
    Coord location;
    double time = 0.0;
    double value = 0.0;
};

struct KrigeResult {
    double mean = 0.0;
    /// Kriging variance of the latent value (nugget excluded).
    double variance = 0.0;
};

struct LocalKrigeOptions {
    int k = 500;
    int max_evals = 400;
    /// Nelder-Mead simplex size at which the ML fit stops (log-parameter units).
    double tol = 1e-3;
    /// Targets whose centroids fall in the same square tile of this side (and share a
    /// time) share one ML fit made at the tile center. 0 fits every target separately.
    double tile_size = 0.0;
    std::uint64_t seed = 1;

    friend bool operator==(const LocalKrigeOptions&, const LocalKrigeOptions&) = default;
};

/// Negative twice log-likelihood (no constants) with the constant mean profiled out by GLS.
double exp_cov_neg2_loglik(const std::vector<PointObservation>& obs, const ExpCovParams& p);

/// Maximum-likelihood fit by a bounded Nelder-Mead search over log-parameters.
ExpCovParams fit_exp_cov(const std::vector<PointObservation>& obs, const ExpCovParams& start,
                         const LocalKrigeOptions& opts = {});

/// Kriging with a GLS-estimated constant mean: mean = mu + c' C^{-1} (y - mu 1).
/// Measurement error sits on the diagonal only, so collocated records stay distinct.
KrigeResult krige(const std::vector<PointObservation>& window, Coord location, double time, const ExpCovParams& p);

/// The k observations nearest to (location, time) under the scaled distance
/// sqrt(h^2/phi_s^2 + u^2/phi_t^2) of `metric`.
std::vector<PointObservation> nearest_window(const std::vector<PointObservation>& obs, Coord location, double time,
                                             int k, const ExpCovParams& metric);

/// Moving-window kriging at one target: window by the metric of `pilot`, local ML fit
/// started at `pilot`, then kriging.
KrigeResult local_krige(Coord location, double time, const std::vector<PointObservation>& obs,
                        const ExpCovParams& pilot, const LocalKrigeOptions& opts = {});

struct KrigeTarget {
    Coord location;
    double time = 0.0;
};

struct LocalKrigeBatch {
    std::vector<KrigeResult> results;
    /// Fitted parameters used for each target (nugget feeds predictive variances).
    std::vector<ExpCovParams> params;
    ExpCovParams pilot;
};

/// Pilot fit on a random subsample for the neighbor metric, then per-tile (or per-target)
/// local fits and kriging. Tiles run in parallel.
LocalKrigeBatch local_krige_batch(const std::vector<KrigeTarget>& targets, const std::vector<PointObservation>& obs,
                                  const LocalKrigeOptions& opts = {});

double rmspe(const Vector& predictions, const Vector& truth);
/// Closed-form CRPS of N(mu, sigma^2) at y; sigma must be positive.
double crps_gaussian(double mu, double sigma, double y);

enum class Protocol { filtering, smoothing };
Protocol parse_protocol(const std::string& name);
std::string to_string(Protocol p);

enum class CvMethod { dfgp, lowrank, localkrige, truth };
CvMethod parse_method(const std::string& name);
std::string to_string(CvMethod m);

struct Dataset {
    BauGrid grid;
    Model model;
    std::vector<TimeSlice> data;
};

/// Block region and time range held out in full, plus a random fraction of the remaining
/// records of one instrument. Only single-BAU footprints are eligible.
struct HoldoutPlan {
    Box block;
    int block_first = 1;
    int block_last = 1 << 30;
    double random_fraction = 0.1;
    int instrument = 1;
    std::uint64_t seed = 1;

    void validate(const BauGrid& grid) const;

    friend bool operator==(const HoldoutPlan&, const HoldoutPlan&) = default;
};

enum class HoldoutKind : std::uint8_t { kept = 0, block = 1, random = 2 };

/// Per time step (index t-1), per record: whether and why it is held out.
struct HoldoutMask {
    std::vector<std::vector<HoldoutKind>> kind;

    std::vector<bool> kept(int time) const;
    std::size_t held_count(int time) const;
};

/// Filtering holds out at t = 2..T, smoothing at t = 1..T-1. Both protocols hold out the
/// same records at the times they share.
HoldoutMask make_holdout(const Dataset& ds, const HoldoutPlan& plan, Protocol protocol);

struct CvPrediction {
    CvMethod method;
    int time = 0;
    std::size_t row = 0;
    HoldoutKind kind = HoldoutKind::random;
    double value = 0.0;
    double mean = 0.0;
    /// Predictive standard deviation for the held-out record (latent MSPE plus its noise).
    double sd = 0.0;
};

struct MetricRow {
    std::string method;
    std::string protocol;
    int time = 0;  // 0 marks the aggregate row: mean of the per-time values
    std::string subset = "all";
    double rmspe = 0.0;
    double crps = 0.0;
    std::size_t n_holdout = 0;
};

struct CvOptions {
    EstimatorConfig estimator;
    /// Skip estimation and use these parameters (truncated per horizon when filtering).
    std::optional<DfgpParams> known_params;
    LocalKrigeOptions krige;
};

struct CvResult {
    HoldoutMask mask;
    std::vector<CvPrediction> predictions;
    std::vector<MetricRow> metrics;    // subset "all", per time plus aggregate
    std::vector<MetricRow> by_subset;  // "block" and "random", per time plus aggregate
};

CvResult run_cv(const Dataset& ds, const HoldoutMask& mask, const std::vector<CvMethod>& methods, Protocol protocol,
                const CvOptions& opts = {});
CvResult run_cv(const Dataset& ds, const HoldoutPlan& plan, const std::vector<CvMethod>& methods, Protocol protocol,
                const CvOptions& opts = {});

/// Footprint centroid (mean of the covered BAU centroids) of row i of a slice.
Coord footprint_centroid(const BauGrid& grid, const TimeSlice& slice, Index i);

}  // namespace dfgp
