#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfgp/dynamics.hpp"
#include "dfgp/error.hpp"

namespace dfgp {

enum class EmMode { exact, sem };

EmMode parse_em_mode(const std::string& name);
std::string to_string(EmMode mode);

struct EstimatorConfig {
    EmMode mode = EmMode::sem;
    int max_iter = 100;
    /// Stop when the relative change of -2 ln L stays below rel_tol for rel_window
    /// consecutive iterations, or when the relative parameter change drops below param_tol.
    double rel_tol = 1e-6;
    int rel_window = 5;
    double param_tol = 1e-5;
    /// One sigma^2 per instrument shared by all time steps.
    bool time_invariant_nugget = false;
    /// Last time step of each H/U block (T_1 < ... < T_b). Empty: one common H and U.
    /// Entries beyond the fitted horizon are dropped and the horizon closes the last block.
    std::vector<int> block_ends;
    /// Conditional draws per SEM iteration (1 is the plain stochastic EM).
    int draws = 1;
    /// SEM point estimate: average of the iterates in this trailing fraction of the run.
    double average_fraction = 0.2;
    /// Exact EM keeps dense N x N xi moments and is refused above this size.
    Index exact_cap = 256;
    /// Points of the coarse gamma scan that brackets the Brent refinement.
    int gamma_grid = 100;
    std::uint64_t seed = 1;

    void validate() const;
    /// Block boundaries for horizon u.
    std::vector<int> blocks_for(int u) const;

    friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;
};

/// Conditional expectations (or draw-based stand-ins) consumed by the M-step.
struct SufficientStats {
    std::vector<Vector> eta;  // eta_{t|u}, t = 0..u
    std::vector<Matrix> K;    // P_{t|u} + eta eta', t = 0..u
    std::vector<Matrix> L;    // P_{t,t-1|u} + eta_t eta_{t-1}', index t-1
    /// xi_t: posterior mean (exact EM) or the draw (average of draws), index t-1. Empty in low-rank mode.
    std::vector<Vector> xi;
    /// Footprint-level signal S eta + B xi used by the measurement block (beta, sigma^2):
    /// the posterior mean (exact EM) or the paired (eta, xi) draw, averaged over draws. Index t-1.
    std::vector<Vector> signal;
    /// Per observation: conditional variance of the footprint-level signal that is not
    /// carried by `signal`. Index t-1.
    std::vector<Vector> fit_var;
    /// tr(diag(e) C_t) and tr(E C_t) for the xi spread C_t not carried by xi (zero for one draw).
    std::vector<double> xi_extra_degree;
    std::vector<double> xi_extra_adjacency;
    /// -2 ln L at the parameters the statistics were computed under.
    double neg2loglik = 0.0;

    int horizon() const { return static_cast<int>(L.size()); }
};

struct ConditionalDraw {
    std::vector<Vector> eta;  // t = 0..u
    std::vector<Vector> xi;   // t = 1..u, index t-1
};

/// One draw from [eta, xi | Z_{1:u}] by correcting a prior draw with the
/// difference of two conditional means.
ConditionalDraw conditional_simulate(const Model& model, const std::vector<TimeSlice>& data,
                                     const DfgpParams& params, std::uint64_t seed,
                                     const CarLogDet* car_logdet = nullptr);

/// Same, reusing already built systems and a smoothed run at the same parameters.
ConditionalDraw conditional_simulate(const std::vector<SliceSystem>& systems, const KalmanResult& run,
                                     const DfgpParams& params, std::uint64_t seed);

SufficientStats e_step(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                       const EstimatorConfig& config, std::uint64_t seed, const CarLogDet* car_logdet = nullptr);

/// Closed-form block updates. Each maximizes the expected complete-data log-likelihood
/// over its block with the other blocks held at `prev`.
std::vector<Vector> update_beta(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                                const DfgpParams& prev);
std::vector<Vector> update_sigma2(const Model& model, const std::vector<TimeSlice>& data,
                                  const SufficientStats& stats, const std::vector<Vector>& beta,
                                  const DfgpParams& prev, bool time_invariant);
struct DynamicsUpdate {
    std::vector<Matrix> H;  // per time, index t-1
    std::vector<Matrix> U;
    Matrix K0;
};
DynamicsUpdate update_dynamics(const SufficientStats& stats, const std::vector<int>& block_ends);

/// Expected CAR quadratic forms of one time step: a = E xi' diag(e) xi, b = E xi' E xi.
struct CarMoments {
    double a = 0.0;
    double b = 0.0;
};
CarMoments car_moments(const Model& model, const SufficientStats& stats, int time);
/// Joint maximizer of -(a - gamma b)/tau2 - N ln tau2 + ln|I - gamma W| over the gamma range:
/// tau2 is profiled out, gamma found by a grid scan refined with Brent's method.
/// The previous gamma is kept if the search does not improve on it.
CarParams update_car(const CarMoments& m, Index n, const CarLogDet& logdet, const GammaRange& range,
                     std::optional<double> previous_gamma = std::nullopt, int grid = 100);

DfgpParams m_step(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                  const DfgpParams& prev, const EstimatorConfig& config, const CarLogDet* car_logdet = nullptr);

/// -2 x expected complete-data log-likelihood at `params` under `stats` (no constants).
double neg2_expected_complete(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                              const DfgpParams& params, const CarLogDet* car_logdet = nullptr);

/// Default starting values: per-time OLS beta, 0.1 x per-instrument OLS residual variance,
/// K0 = U = var(Z) I, H = I, tau2 = 0.01 var(Z), gamma = 0.5.
DfgpParams initial_params(const Model& model, const std::vector<TimeSlice>& data);

struct TracePoint {
    int iteration = 0;
    double neg2loglik = 0.0;
};

struct EstimateResult {
    DfgpParams params;
    std::vector<TracePoint> trace;
    int iterations = 0;
    bool converged = false;
    /// -2 ln L at the returned parameters.
    double neg2loglik = 0.0;
};

/// Numerical failure inside the estimator, with the parameters in force when it happened.
class EstimationFailure : public NumericalError {
  public:
    EstimationFailure(const NumericalError& cause, int iteration, DfgpParams snapshot)
        : NumericalError(std::string(cause.what()) + " at EM iteration " + std::to_string(iteration), cause.time()),
          iteration_(iteration), snapshot_(std::move(snapshot)) {}
    int iteration() const noexcept { return iteration_; }
    const DfgpParams& snapshot() const noexcept { return snapshot_; }

  private:
    int iteration_;
    DfgpParams snapshot_;
};

EstimateResult run_estimator(const Model& model, const std::vector<TimeSlice>& data, const EstimatorConfig& config,
                             std::optional<DfgpParams> init = std::nullopt);

/// Filtering protocol: one fit per horizon u = 2..T on Z_{1:u}, each warm-started
/// from the previous horizon's estimate unless disabled. Result index u-2.
std::vector<EstimateResult> fit_filtering_sequence(const Model& model, const std::vector<TimeSlice>& data,
                                                   const EstimatorConfig& config, bool warm_start = true);

}  // namespace dfgp
