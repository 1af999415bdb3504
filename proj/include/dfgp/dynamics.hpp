#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "dfgp/car.hpp"
#include "dfgp/sparse_cholesky.hpp"
#include "dfgp/types.hpp"

namespace dfgp {

/// BAU-level design shared by all time steps: covariates X (N x p) and
/// low-rank basis S (N x r). Footprint-level rows are B_t X and B_t S.
struct SpatialDesign {
    Matrix covariates;
    Matrix basis;
};

/// Everything that does not depend on parameters.
struct Model {
    SpatialDesign design;
    CarStructure car;
    int instruments = 1;
    GammaRange gamma_range;
    /// Fixed-rank filtering/smoothing: drop the fine-scale CAR component (xi = 0).
    bool lowrank_only = false;

    Index state_size() const { return design.basis.rows(); }
    Index basis_size() const { return design.basis.cols(); }
    Index covariate_size() const { return design.covariates.cols(); }
};

/// Stacked observations of one time step.
struct TimeSlice {
    int time = 1;
    Vector z;
    /// n_t x N change-of-support matrix B_t; rows sum to one.
    SparseRowMatrix footprints;
    /// Instrument of each row, 1..k0.
    std::vector<int> instrument;
    /// Known variance factor v(A) of each row.
    Vector var_factor;
    /// Optional external footprint id of each row (empty if unknown).
    std::vector<std::int64_t> footprint_id;

    Index size() const { return z.size(); }
    void validate(Index n_state, int instruments) const;
    Matrix covariates(const Model& m) const { return footprints * m.design.covariates; }
    Matrix basis(const Model& m) const { return footprints * m.design.basis; }
    /// Diagonal of V_t given per-instrument sigma^2 (index k-1).
    Vector noise_variance(const Vector& sigma2) const;
    /// Rows for which keep[i] is true.
    TimeSlice subset(const std::vector<bool>& keep) const;
};

/// Model parameters for times 1..u. Per-time H_t and U_t let blockwise variants
/// share the same engine; the default is one common H and U.
struct DfgpParams {
    std::vector<Vector> beta;
    std::vector<Matrix> H;
    std::vector<Matrix> U;
    Matrix K0;
    std::vector<CarParams> car;
    std::vector<Vector> sigma2;

    int horizon() const { return static_cast<int>(beta.size()); }

    static DfgpParams uniform(int horizon, const Vector& beta, const Matrix& H, const Matrix& U, const Matrix& K0,
                              const CarParams& car, const Vector& sigma2);
    /// Throws InvalidParameter on inconsistent dimensions, non-SPD U/K0 or non-positive variances.
    void validate(const Model& model) const;
    /// First u time steps.
    DfgpParams truncated(int u) const;
    /// Extends to u time steps by repeating the last time step's parameters.
    DfgpParams extended(int u) const;
    /// Flattened numeric vector (used for parameter-change norms).
    Vector flatten() const;
};

/// Gaussian moments of the r-dimensional state.
struct Moments {
    Vector mean;
    Matrix cov;
};

/// Innovation alpha_t with the two terms it contributes to -2 ln L.
struct InnovationRecord {
    Vector alpha;
    double quad = 0.0;
    double logdet = 0.0;
};

/// Per-time linear algebra for fixed parameters. The n_t x n_t matrices D_t and
/// Sigma_t are never formed: everything goes through one sparse factorization of
/// A_t = Q_t + B_t' V_t^{-1} B_t and r x r algebra.
struct SliceOptions {
    bool logdet = true;  // compute ln|D_t^{-1}| for the likelihood
};

class SliceSystem {
  public:
    using Options = SliceOptions;

    /// `car_logdet` may be null; ln|Q_t| is then taken from a factorization of Q_t.
    SliceSystem(const Model& model, const TimeSlice& slice, const DfgpParams& params, int time,
                const CarLogDet* car_logdet = nullptr, Options opts = {});

    int time() const { return time_; }
    Index observations() const { return n_; }
    bool lowrank_only() const { return lowrank_; }
    const TimeSlice& slice() const { return *slice_; }

    /// S_t' D_t S_t (r x r).
    const Matrix& sds() const { return sds_; }
    /// z_t - X_t beta_t.
    const Vector& detrended() const { return resid0_; }
    /// S_t' D_t (z_t - X_t beta_t).
    const Vector& sd_detrended() const { return sd_resid0_; }
    /// F_t = A_t^{-1} B_t' V_t^{-1} S_t (N x r); empty in low-rank mode.
    const Matrix& f() const { return f_; }
    /// c_t = A_t^{-1} B_t' V_t^{-1} (z_t - X_t beta_t); E(xi_t | eta_t, z_t) = c_t - F_t eta_t.
    const Vector& c() const { return c_; }
    /// ln|D_t^{-1}| = ln|A_t| - ln|Q_t| + ln|V_t| (ln|V_t| in low-rank mode).
    double logdet_dinv() const { return logdet_dinv_; }
    const Vector& vinv() const { return vinv_; }

    /// S_t' D_t x for an n_t-vector x.
    Vector sd_apply(const Vector& x) const;
    /// A_t^{-1} B_t' V_t^{-1} x for an n_t-vector x (zero vector in low-rank mode).
    Vector xi_offset(const Vector& x) const;
    /// x' D_t x.
    double d_quadratic(const Vector& x) const;
    /// S_t eta as footprint values.
    Vector basis_times(const Vector& eta) const;

    /// diag(A_t^{-1}); computed on first use.
    const Vector& a_inverse_diagonal() const;
    /// Columns A_t^{-1} e_j for state indices j.
    Matrix a_inverse_columns(const std::vector<Index>& cols) const;
    const std::optional<SparseCholesky>& a_factor() const { return a_; }
    const SparseMatrix& precision() const { return q_; }
    const Model& model() const { return *model_; }

  private:
    const Model* model_;
    const TimeSlice* slice_;
    int time_;
    Index n_;
    bool lowrank_;
    Vector vinv_;
    SparseMatrix q_;
    std::optional<SparseCholesky> a_;
    Matrix sds_;
    Matrix ws_;  // B' V^{-1} S (N x r)
    Matrix f_;
    Vector resid0_;
    Vector sd_resid0_;
    Vector c_;
    double resid0_d_resid0_ = 0.0;
    double logdet_dinv_ = 0.0;
    mutable std::optional<Vector> ainv_diag_;
};

/// One-step-ahead forecast: (H m, H P H' + U), symmetrized.
Moments forecast_step(const Moments& prev, const Matrix& H, const Matrix& U);

struct FilterUpdate {
    Moments filtered;
    /// I - G_t S_t = (I + P_{t|t-1} S' D S)^{-1}.
    Matrix gain_complement;
    InnovationRecord innovation;
};

/// Kalman update of the low-rank state with the fused data at one time step.
FilterUpdate filter_update(const Moments& forecast, const SliceSystem& sys);

/// Filter/smoother output over t = 0..u. Vectors indexed by t hold t = 0 at index 0;
/// forecast, gain_complement, innovations and lag1 are indexed t - 1.
struct KalmanResult {
    std::vector<Moments> forecast;
    std::vector<Moments> filtered;
    std::vector<Matrix> gain_complement;
    std::vector<InnovationRecord> innovations;
    std::vector<Moments> smoothed;
    std::vector<Matrix> smoother_gain;  // J_t, t = 0..u-1
    std::vector<Matrix> lag1;           // P_{t,t-1|u}, t = 1..u

    int horizon() const { return static_cast<int>(forecast.size()); }
    bool has_smoother() const { return !smoothed.empty(); }
};

/// Builds the per-time systems for t = 1..u.
std::vector<SliceSystem> build_systems(const Model& model, const std::vector<TimeSlice>& data,
                                       const DfgpParams& params, const CarLogDet* car_logdet = nullptr,
                                       SliceSystem::Options opts = {});

KalmanResult kalman_filter(const std::vector<SliceSystem>& systems, const DfgpParams& params);

/// Filter that builds one system at a time and hands it to `visit` before discarding
/// it; memory stays at one N x r block regardless of the horizon.
using SliceVisitor = std::function<void(const SliceSystem&, const Moments& filtered)>;
KalmanResult kalman_filter_streaming(const Model& model, const std::vector<TimeSlice>& data,
                                     const DfgpParams& params, const SliceVisitor& visit,
                                     const CarLogDet* car_logdet = nullptr, SliceSystem::Options opts = {});

/// Backward smoothing recursion (t = u-1..0) plus lag-1 cross covariances.
void smoother_pass(KalmanResult& run, const DfgpParams& params);

/// Lag-1 covariances P_{t,t-1|u}; requires a completed smoother pass.
std::vector<Matrix> lag1_cov(const KalmanResult& run, const DfgpParams& params);

/// Filter and smoother means only, for a different data vector per time and zero
/// trend, reusing the gains of `run`. Used by conditional simulation.
std::vector<Vector> smoothed_means(const std::vector<SliceSystem>& systems, const KalmanResult& run,
                                   const DfgpParams& params, const std::vector<Vector>& data);

/// Predicted latent field at a set of BAUs (state indices).
struct PredictionField {
    int time = 0;
    std::vector<Index> bau;
    Vector mean;
    Vector std_error;
    /// delta^P_{t|u} and diag(R^P_{t|u}).
    Vector delta;
    Vector delta_var;
};

/// Prediction-set slices of the per-time quantities that the predictors need.
struct FieldPieces {
    int time = 0;
    std::vector<Index> bau;
    Matrix basis;       // S^P (m x r)
    Matrix covariates;  // X^P (m x p)
    Matrix f;           // B^P F_t (m x r); empty in low-rank mode
    Vector c;           // B^P c_t
    Vector a_inv_diag;  // diag(B^P A_t^{-1} B^P')
};

FieldPieces field_pieces(const SliceSystem& sys, const std::vector<Index>& bau);

/// E(Y^P | data) and MSPE standard errors under the given state moments:
/// mean = X^P beta + S^P eta + delta^P, with delta^P = c^P - F^P eta.
PredictionField predict_field(const FieldPieces& pieces, const Moments& state, const Vector& beta);

/// DFGPF: filtered state at t.
PredictionField predict_filter(const FieldPieces& pieces, const KalmanResult& run, const Vector& beta);
/// DFGPS: smoothed state at t.
PredictionField predict_smooth(const FieldPieces& pieces, const KalmanResult& run, const Vector& beta);

/// Cross covariance C = cov(eta_t, delta^P_t | data) = -P F^P' (r x m).
Matrix field_cross_covariance(const FieldPieces& pieces, const Moments& state);

/// Full m x m MSPE covariance, for small prediction sets.
Matrix field_covariance(const SliceSystem& sys, const std::vector<Index>& bau, const Moments& state);

/// All valid BAUs as a prediction set.
std::vector<Index> all_baus(const Model& model);

}  // namespace dfgp
