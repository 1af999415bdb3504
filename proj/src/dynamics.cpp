#include "dfgp/dynamics.hpp"

#include <cmath>
#include <string>

#include <spdlog/spdlog.h>

#include "dfgp/error.hpp"
#include "dfgp/parallel.hpp"

namespace dfgp {

namespace {

bool is_spd(const Matrix& m) {
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + m.cwiseAbs().maxCoeff())) return false;
    Eigen::LLT<Matrix> llt(symmetrized(m));
    return llt.info() == Eigen::Success;
}

Matrix rows_of(const Matrix& m, const std::vector<Index>& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

Vector entries_of(const Vector& v, const std::vector<Index>& rows) {
    Vector out(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Index>(i)] = v[rows[i]];
    return out;
}

}  // namespace

void TimeSlice::validate(Index n_state, int instruments) const {
    const Index n = z.size();
    if (footprints.rows() != n || footprints.cols() != n_state)
        throw InvalidArgument("time slice " + std::to_string(time) + ": footprint matrix is " +
                              std::to_string(footprints.rows()) + "x" + std::to_string(footprints.cols()) +
                              ", expected " + std::to_string(n) + "x" + std::to_string(n_state));
    if (static_cast<Index>(instrument.size()) != n || var_factor.size() != n)
        throw InvalidArgument("time slice " + std::to_string(time) + ": record arrays differ in length");
    for (int k : instrument)
        if (k < 1 || k > instruments)
            throw InvalidArgument("time slice " + std::to_string(time) + ": instrument id " + std::to_string(k) +
                                  " outside 1.." + std::to_string(instruments));
    for (Index i = 0; i < n; ++i)
        if (!(var_factor[i] > 0.0)) throw InvalidArgument("variance factors must be positive");
}

Vector TimeSlice::noise_variance(const Vector& sigma2) const {
    Vector v(size());
    for (Index i = 0; i < size(); ++i) v[i] = sigma2[instrument[static_cast<std::size_t>(i)] - 1] * var_factor[i];
    return v;
}

TimeSlice TimeSlice::subset(const std::vector<bool>& keep) const {
    if (static_cast<Index>(keep.size()) != size()) throw InvalidArgument("subset: mask length differs from slice size");
    std::vector<Index> rows;
    for (Index i = 0; i < size(); ++i)
        if (keep[static_cast<std::size_t>(i)]) rows.push_back(i);
    TimeSlice out;
    out.time = time;
    const auto m = static_cast<Index>(rows.size());
    out.z.resize(m);
    out.var_factor.resize(m);
    out.footprints.resize(m, footprints.cols());
    std::vector<Triplet> trips;
    for (Index j = 0; j < m; ++j) {
        const Index i = rows[static_cast<std::size_t>(j)];
        out.z[j] = z[i];
        out.var_factor[j] = var_factor[i];
        out.instrument.push_back(instrument[static_cast<std::size_t>(i)]);
        if (!footprint_id.empty()) out.footprint_id.push_back(footprint_id[static_cast<std::size_t>(i)]);
        for (SparseRowMatrix::InnerIterator it(footprints, i); it; ++it) trips.emplace_back(static_cast<int>(j), static_cast<int>(it.col()), it.value());
    }
    out.footprints.setFromTriplets(trips.begin(), trips.end());
    return out;
}

DfgpParams DfgpParams::uniform(int horizon, const Vector& beta, const Matrix& H, const Matrix& U, const Matrix& K0,
                               const CarParams& car, const Vector& sigma2) {
    DfgpParams p;
    p.beta.assign(static_cast<std::size_t>(horizon), beta);
    p.H.assign(static_cast<std::size_t>(horizon), H);
    p.U.assign(static_cast<std::size_t>(horizon), U);
    p.K0 = K0;
    p.car.assign(static_cast<std::size_t>(horizon), car);
    p.sigma2.assign(static_cast<std::size_t>(horizon), sigma2);
    return p;
}

void DfgpParams::validate(const Model& model) const {
    const auto u = beta.size();
    const Index r = model.basis_size();
    const Index p = model.covariate_size();
    if (H.size() != u || U.size() != u || car.size() != u || sigma2.size() != u)
        throw InvalidParameter("parameter sequences differ in length");
    if (K0.rows() != r || K0.cols() != r || !is_spd(K0)) throw InvalidParameter("K0 must be r x r and SPD");
    for (std::size_t t = 0; t < u; ++t) {
        const std::string at = " at t=" + std::to_string(t + 1);
        if (beta[t].size() != p) throw InvalidParameter("beta has wrong length" + at);
        if (H[t].rows() != r || H[t].cols() != r) throw InvalidParameter("H must be r x r" + at);
        if (U[t].rows() != r || U[t].cols() != r || !is_spd(U[t])) throw InvalidParameter("U must be r x r SPD" + at);
        if (sigma2[t].size() != model.instruments) throw InvalidParameter("sigma2 needs one entry per instrument" + at);
        for (Index k = 0; k < sigma2[t].size(); ++k)
            if (!(sigma2[t][k] > 0.0)) throw InvalidParameter("sigma2 must be positive" + at);
        if (!model.lowrank_only) {
            if (!model.gamma_range.contains(car[t].gamma)) throw InvalidParameter("gamma outside range" + at);
            if (!(car[t].tau2 > 0.0)) throw InvalidParameter("tau2 must be positive" + at);
        }
    }
}

DfgpParams DfgpParams::truncated(int u) const {
    if (u < 0 || u > horizon()) throw InvalidArgument("truncated: horizon out of range");
    DfgpParams p = *this;
    const auto n = static_cast<std::size_t>(u);
    p.beta.resize(n);
    p.H.resize(n);
    p.U.resize(n);
    p.car.resize(n);
    p.sigma2.resize(n);
    return p;
}

DfgpParams DfgpParams::extended(int u) const {
    if (horizon() < 1) throw InvalidArgument("extended: empty parameter set");
    DfgpParams p = *this;
    while (p.horizon() < u) {
        p.beta.push_back(p.beta.back());
        p.H.push_back(p.H.back());
        p.U.push_back(p.U.back());
        p.car.push_back(p.car.back());
        p.sigma2.push_back(p.sigma2.back());
    }
    return p;
}

Vector DfgpParams::flatten() const {
    std::vector<double> out;
    auto put = [&out](const auto& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
    for (const auto& b : beta) put(b);
    for (const auto& h : H) put(h);
    for (const auto& uu : U) put(uu);
    put(K0);
    for (const auto& c : car) {
        out.push_back(c.gamma);
        out.push_back(c.tau2);
    }
    for (const auto& s : sigma2) put(s);
    return Eigen::Map<Vector>(out.data(), static_cast<Index>(out.size()));
}

SliceSystem::SliceSystem(const Model& model, const TimeSlice& slice, const DfgpParams& params, int time,
                         const CarLogDet* car_logdet, Options opts)
    : model_(&model), slice_(&slice), time_(time), n_(slice.size()), lowrank_(model.lowrank_only) {
    if (time < 1 || time > params.horizon())
        throw InvalidArgument("slice time " + std::to_string(time) + " outside parameter horizon");
    const Index nstate = model.state_size();
    slice.validate(nstate, model.instruments);
    const auto ti = static_cast<std::size_t>(time - 1);

    const Vector var = slice.noise_variance(params.sigma2[ti]);
    vinv_ = var.cwiseInverse();
    resid0_ = slice.z - slice.footprints * (model.design.covariates * params.beta[ti]);

    const SparseMatrix bt = SparseMatrix(slice.footprints.transpose());
    const SparseMatrix btv = bt * vinv_.asDiagonal();
    const SparseMatrix btvb = btv * SparseMatrix(slice.footprints);
    ws_ = btvb * model.design.basis;
    const Vector btv_resid = btv * resid0_;

    const Matrix svs = model.design.basis.transpose() * ws_;
    const Vector sv_resid = model.design.basis.transpose() * btv_resid;
    const double rvr = resid0_.dot(vinv_.cwiseProduct(resid0_));
    const double logdet_v = var.array().log().sum();

    if (lowrank_) {
        sds_ = symmetrized(svs);
        sd_resid0_ = sv_resid;
        resid0_d_resid0_ = rvr;
        logdet_dinv_ = logdet_v;
        return;
    }

    q_ = build_precision(model.car, params.car[ti], model.gamma_range);
    a_.emplace(SparseMatrix(q_ + btvb), time);
    f_ = a_->solve(ws_);
    c_ = a_->solve(btv_resid);
    sds_ = symmetrized(svs - ws_.transpose() * f_);
    sd_resid0_ = sv_resid - ws_.transpose() * c_;
    resid0_d_resid0_ = rvr - btv_resid.dot(c_);
    if (opts.logdet) {
        const double logdet_q =
            car_logdet ? car_logdet->precision_logdet(params.car[ti]) : SparseCholesky(q_, time).logdet();
        logdet_dinv_ = a_->logdet() - logdet_q + logdet_v;
    }
}

Vector SliceSystem::sd_apply(const Vector& x) const {
    const Vector w = slice_->footprints.transpose() * vinv_.cwiseProduct(x);
    Vector out = model_->design.basis.transpose() * w;
    if (!lowrank_) out -= ws_.transpose() * a_->solve(w);
    return out;
}

Vector SliceSystem::xi_offset(const Vector& x) const {
    if (lowrank_) return Vector::Zero(model_->state_size());
    const Vector w = slice_->footprints.transpose() * vinv_.cwiseProduct(x);
    return a_->solve(w);
}

double SliceSystem::d_quadratic(const Vector& x) const {
    double q = x.dot(vinv_.cwiseProduct(x));
    if (!lowrank_) {
        const Vector w = slice_->footprints.transpose() * vinv_.cwiseProduct(x);
        q -= w.dot(a_->solve(w));
    }
    return q;
}

Vector SliceSystem::basis_times(const Vector& eta) const {
    return slice_->footprints * (model_->design.basis * eta);
}

const Vector& SliceSystem::a_inverse_diagonal() const {
    if (!ainv_diag_) {
        if (lowrank_) throw InvalidArgument("a_inverse_diagonal: no fine-scale component in low-rank mode");
        ainv_diag_ = a_->inverse_diagonal();
    }
    return *ainv_diag_;
}

Matrix SliceSystem::a_inverse_columns(const std::vector<Index>& cols) const {
    if (lowrank_) throw InvalidArgument("a_inverse_columns: no fine-scale component in low-rank mode");
    Matrix e = Matrix::Zero(model_->state_size(), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) e(cols[j], static_cast<Index>(j)) = 1.0;
    return a_->solve(e);
}

Moments forecast_step(const Moments& prev, const Matrix& H, const Matrix& U) {
    const Index r = prev.mean.size();
    if (prev.cov.rows() != r || prev.cov.cols() != r || H.rows() != r || H.cols() != r || U.rows() != r ||
        U.cols() != r)
        throw InvalidArgument("forecast_step: dimension mismatch");
    Moments out;
    out.mean = H * prev.mean;
    out.cov = H * prev.cov * H.transpose() + U;
    symmetrize(out.cov);
    return out;
}

FilterUpdate filter_update(const Moments& forecast, const SliceSystem& sys) {
    const Index r = forecast.mean.size();
    if (sys.sds().rows() != r) throw InvalidArgument("filter_update: state dimension mismatch");
    FilterUpdate out;
    out.innovation.alpha = sys.detrended() - sys.basis_times(forecast.mean);
    if (sys.observations() == 0) {
        out.filtered = forecast;
        out.gain_complement = Matrix::Identity(r, r);
        return out;
    }
    const Matrix& p = forecast.cov;
    const Vector s = sys.sd_apply(out.innovation.alpha);
    const Matrix m = Matrix::Identity(r, r) + p * sys.sds();
    const Eigen::PartialPivLU<Matrix> lu(m);
    const Vector lu_diag = lu.matrixLU().diagonal();
    if (!lu_diag.allFinite() || (lu_diag.array() == 0.0).any())
        throw NumericalError("filter update: singular inner r x r system", sys.time());
    out.gain_complement = lu.inverse();
    out.filtered.cov = out.gain_complement * p;
    symmetrize(out.filtered.cov);
    out.filtered.mean = forecast.mean + out.gain_complement * (p * s);
    out.innovation.quad = sys.d_quadratic(out.innovation.alpha) - s.dot(out.filtered.cov * s);
    out.innovation.logdet = lu_diag.array().abs().log().sum() + sys.logdet_dinv();
    if (!std::isfinite(out.innovation.logdet) || !out.filtered.mean.allFinite())
        throw NumericalError("filter update produced non-finite moments", sys.time());
    return out;
}

std::vector<SliceSystem> build_systems(const Model& model, const std::vector<TimeSlice>& data,
                                       const DfgpParams& params, const CarLogDet* car_logdet,
                                       SliceSystem::Options opts) {
    if (static_cast<int>(data.size()) > params.horizon())
        throw InvalidArgument("build_systems: more time slices than parameter horizon");
    std::vector<std::optional<SliceSystem>> built(data.size());
    parallel_for(data.size(), [&](std::size_t t) {
        built[t].emplace(model, data[t], params, static_cast<int>(t) + 1, car_logdet, opts);
    });
    std::vector<SliceSystem> out;
    out.reserve(data.size());
    for (auto& s : built) out.push_back(std::move(*s));
    return out;
}

namespace {

KalmanResult start_run(const DfgpParams& params) {
    KalmanResult run;
    run.filtered.push_back({Vector::Zero(params.K0.rows()), params.K0});
    return run;
}

void advance(KalmanResult& run, const DfgpParams& params, const SliceSystem& sys) {
    const auto ti = static_cast<std::size_t>(sys.time() - 1);
    Moments fc = forecast_step(run.filtered.back(), params.H[ti], params.U[ti]);
    FilterUpdate upd = filter_update(fc, sys);
    run.forecast.push_back(std::move(fc));
    run.filtered.push_back(std::move(upd.filtered));
    run.gain_complement.push_back(std::move(upd.gain_complement));
    run.innovations.push_back(std::move(upd.innovation));
}

}  // namespace

KalmanResult kalman_filter(const std::vector<SliceSystem>& systems, const DfgpParams& params) {
    KalmanResult run = start_run(params);
    for (const auto& sys : systems) advance(run, params, sys);
    return run;
}

KalmanResult kalman_filter_streaming(const Model& model, const std::vector<TimeSlice>& data,
                                     const DfgpParams& params, const SliceVisitor& visit,
                                     const CarLogDet* car_logdet, SliceSystem::Options opts) {
    KalmanResult run = start_run(params);
    for (std::size_t t = 0; t < data.size(); ++t) {
        const SliceSystem sys(model, data[t], params, static_cast<int>(t) + 1, car_logdet, opts);
        advance(run, params, sys);
        if (visit) visit(sys, run.filtered.back());
    }
    return run;
}

namespace {

/// Solves X P = B for X, i.e. B P^{-1}, for a symmetric positive (semi)definite P.
Matrix right_solve_symmetric(const Matrix& b, const Matrix& p, int time) {
    const Eigen::LDLT<Matrix> ldlt(p);
    if (ldlt.info() != Eigen::Success) throw NumericalError("smoother: forecast covariance not invertible", time);
    return ldlt.solve(b.transpose()).transpose();
}

}  // namespace

void smoother_pass(KalmanResult& run, const DfgpParams& params) {
    const int u = run.horizon();
    run.smoothed.assign(static_cast<std::size_t>(u) + 1, {});
    run.smoother_gain.assign(static_cast<std::size_t>(u), {});
    run.smoothed[static_cast<std::size_t>(u)] = run.filtered[static_cast<std::size_t>(u)];
    for (int t = u - 1; t >= 0; --t) {
        const auto ti = static_cast<std::size_t>(t);
        const Moments& filt = run.filtered[ti];
        const Moments& next_fc = run.forecast[ti];
        const Moments& next_sm = run.smoothed[ti + 1];
        const Matrix j = right_solve_symmetric(filt.cov * params.H[ti].transpose(), next_fc.cov, t + 1);
        Moments sm;
        sm.mean = filt.mean + j * (next_sm.mean - next_fc.mean);
        sm.cov = filt.cov + j * (next_sm.cov - next_fc.cov) * j.transpose();
        symmetrize(sm.cov);
        run.smoothed[ti] = std::move(sm);
        run.smoother_gain[ti] = j;
    }
    run.lag1 = lag1_cov(run, params);
}

std::vector<Matrix> lag1_cov(const KalmanResult& run, const DfgpParams& params) {
    const int u = run.horizon();
    if (static_cast<int>(run.smoother_gain.size()) != u) throw InvalidArgument("lag1_cov: smoother has not run");
    std::vector<Matrix> lag(static_cast<std::size_t>(u));
    if (u == 0) return lag;
    const auto last = static_cast<std::size_t>(u - 1);
    lag[last] = run.gain_complement[last] * params.H[last] * run.filtered[last].cov;
    for (int t = u - 1; t >= 1; --t) {
        const auto ti = static_cast<std::size_t>(t);
        const Matrix& pt = run.filtered[ti].cov;
        const Matrix& jt = run.smoother_gain[ti];
        const Matrix& jprev = run.smoother_gain[ti - 1];
        lag[ti - 1] = pt * jprev.transpose() + jt * (lag[ti] - params.H[ti] * pt) * jprev.transpose();
    }
    return lag;
}

std::vector<Vector> smoothed_means(const std::vector<SliceSystem>& systems, const KalmanResult& run,
                                   const DfgpParams& params, const std::vector<Vector>& data) {
    const int u = run.horizon();
    if (static_cast<int>(systems.size()) != u || static_cast<int>(data.size()) != u || !run.has_smoother())
        throw InvalidArgument("smoothed_means: needs systems, data and a smoothed run of equal horizon");
    const Index r = params.K0.rows();
    std::vector<Vector> pred(static_cast<std::size_t>(u));
    std::vector<Vector> filt(static_cast<std::size_t>(u) + 1);
    filt[0] = Vector::Zero(r);
    for (int t = 1; t <= u; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        const SliceSystem& sys = systems[ti - 1];
        pred[ti - 1] = params.H[ti - 1] * filt[ti - 1];
        if (sys.observations() == 0) {
            filt[ti] = pred[ti - 1];
            continue;
        }
        const Vector alpha = data[ti - 1] - sys.basis_times(pred[ti - 1]);
        filt[ti] = pred[ti - 1] + run.filtered[ti].cov * sys.sd_apply(alpha);
    }
    std::vector<Vector> sm(static_cast<std::size_t>(u) + 1);
    sm[static_cast<std::size_t>(u)] = filt[static_cast<std::size_t>(u)];
    for (int t = u - 1; t >= 0; --t) {
        const auto ti = static_cast<std::size_t>(t);
        sm[ti] = filt[ti] + run.smoother_gain[ti] * (sm[ti + 1] - pred[ti]);
    }
    return sm;
}

FieldPieces field_pieces(const SliceSystem& sys, const std::vector<Index>& bau) {
    const Model& model = sys.model();
    for (Index i : bau)
        if (i < 0 || i >= model.state_size())
            throw InvalidArgument("prediction BAU index " + std::to_string(i) + " outside the state");
    FieldPieces p;
    p.time = sys.time();
    p.bau = bau;
    p.basis = rows_of(model.design.basis, bau);
    p.covariates = rows_of(model.design.covariates, bau);
    if (!sys.lowrank_only()) {
        p.f = rows_of(sys.f(), bau);
        p.c = entries_of(sys.c(), bau);
        p.a_inv_diag = entries_of(sys.a_inverse_diagonal(), bau);
    }
    return p;
}

PredictionField predict_field(const FieldPieces& pieces, const Moments& state, const Vector& beta) {
    const Index m = static_cast<Index>(pieces.bau.size());
    const bool lowrank = pieces.f.size() == 0 && m > 0 && pieces.c.size() == 0;
    PredictionField out;
    out.time = pieces.time;
    out.bau = pieces.bau;
    Matrix g = pieces.basis;
    if (lowrank) {
        out.delta = Vector::Zero(m);
        out.delta_var = Vector::Zero(m);
    } else {
        out.delta = pieces.c - pieces.f * state.mean;
        out.delta_var = pieces.a_inv_diag + (pieces.f * state.cov).cwiseProduct(pieces.f).rowwise().sum();
        g -= pieces.f;
    }
    out.mean = pieces.covariates * beta + pieces.basis * state.mean + out.delta;
    Vector var = (g * state.cov).cwiseProduct(g).rowwise().sum();
    if (!lowrank) var += pieces.a_inv_diag;
    out.std_error.resize(m);
    for (Index i = 0; i < m; ++i) {
        if (var[i] < 0.0) {
            const double scale = (pieces.basis.row(i) * state.cov).dot(pieces.basis.row(i)) +
                                 (lowrank ? 0.0 : out.delta_var[i]);
            if (var[i] < -1e-10 * std::max(scale, 1e-300))
                throw NumericalError("negative prediction variance at BAU " + std::to_string(pieces.bau[static_cast<std::size_t>(i)]),
                                     pieces.time);
            spdlog::warn("t={}: prediction variance {} at BAU {} clamped to 0", pieces.time, var[i],
                         pieces.bau[static_cast<std::size_t>(i)]);
            var[i] = 0.0;
        }
        out.std_error[i] = std::sqrt(var[i]);
    }
    return out;
}

PredictionField predict_filter(const FieldPieces& pieces, const KalmanResult& run, const Vector& beta) {
    return predict_field(pieces, run.filtered.at(static_cast<std::size_t>(pieces.time)), beta);
}

PredictionField predict_smooth(const FieldPieces& pieces, const KalmanResult& run, const Vector& beta) {
    if (!run.has_smoother()) throw InvalidArgument("predict_smooth: smoother has not run");
    return predict_field(pieces, run.smoothed.at(static_cast<std::size_t>(pieces.time)), beta);
}

Matrix field_cross_covariance(const FieldPieces& pieces, const Moments& state) {
    if (pieces.f.size() == 0) return Matrix::Zero(state.cov.rows(), static_cast<Index>(pieces.bau.size()));
    return -state.cov * pieces.f.transpose();
}

Matrix field_covariance(const SliceSystem& sys, const std::vector<Index>& bau, const Moments& state) {
    const FieldPieces pieces = [&] {
        FieldPieces p;
        p.basis = rows_of(sys.model().design.basis, bau);
        if (!sys.lowrank_only()) p.f = rows_of(sys.f(), bau);
        return p;
    }();
    Matrix g = pieces.basis;
    if (!sys.lowrank_only()) g -= pieces.f;
    Matrix cov = g * state.cov * g.transpose();
    if (!sys.lowrank_only()) cov += rows_of(sys.a_inverse_columns(bau), bau);
    symmetrize(cov);
    return cov;
}

std::vector<Index> all_baus(const Model& model) {
    std::vector<Index> out(static_cast<std::size_t>(model.state_size()));
    for (Index i = 0; i < model.state_size(); ++i) out[static_cast<std::size_t>(i)] = i;
    return out;
}

}  // namespace dfgp
