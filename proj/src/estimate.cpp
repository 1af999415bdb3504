#include "dfgp/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/tools/minima.hpp>
#include <spdlog/spdlog.h>

#include "dfgp/error.hpp"
#include "dfgp/likelihood.hpp"

namespace dfgp {

EmMode parse_em_mode(const std::string& name) {
    if (name == "exact" || name == "em") return EmMode::exact;
    if (name == "sem") return EmMode::sem;
    throw InvalidArgument("unknown estimation mode '" + name + "' (expected exact or sem)");
}

std::string to_string(EmMode mode) { return mode == EmMode::exact ? "exact" : "sem"; }

void EstimatorConfig::validate() const {
    if (max_iter < 1) throw InvalidArgument("max_iter must be at least 1");
    if (!(rel_tol >= 0.0) || !(param_tol >= 0.0)) throw InvalidArgument("convergence thresholds must be >= 0");
    if (rel_window < 1) throw InvalidArgument("rel_window must be at least 1");
    if (draws < 1) throw InvalidArgument("draws must be at least 1");
    if (!(average_fraction >= 0.0 && average_fraction <= 1.0))
        throw InvalidArgument("average_fraction must lie in [0, 1]");
    if (gamma_grid < 2) throw InvalidArgument("gamma_grid must be at least 2");
    for (std::size_t b = 0; b < block_ends.size(); ++b)
        if (block_ends[b] < 1 || (b > 0 && block_ends[b] <= block_ends[b - 1]))
            throw InvalidArgument("block ends must be positive and strictly increasing");
}

std::vector<int> EstimatorConfig::blocks_for(int u) const {
    std::vector<int> out;
    for (int e : block_ends)
        if (e < u) out.push_back(e);
    out.push_back(u);
    return out;
}

namespace {

Vector rowwise_quadratic(const Matrix& g, const Matrix& p) { return (g * p).cwiseProduct(g).rowwise().sum(); }

/// Solves X M = B for X with M symmetric positive definite; jitters M if needed.
Matrix right_solve_spd(const Matrix& b, const Matrix& m, const char* what) {
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) {
        const double jitter = 1e-10 * std::max(m.trace() / static_cast<double>(m.rows()), 1e-300);
        spdlog::warn("{} is singular; adding {:.3g} to its diagonal", what, jitter);
        llt.compute(m + jitter * Matrix::Identity(m.rows(), m.cols()));
        if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite", 0);
    }
    return llt.solve(b.transpose()).transpose();
}

/// Symmetrizes and, if Cholesky fails, lifts small or negative eigenvalues.
Matrix ensure_spd(const Matrix& m, const char* what) {
    Matrix s = symmetrized(m);
    if (Eigen::LLT<Matrix>(s).info() == Eigen::Success) return s;
    const Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    const double floor = 1e-10 * top;
    // Rounding-level rank deficiency is expected when the estimates approach a singular
    // boundary (K0 from a single initial state, U as the dynamics absorb the trajectory).
    const auto level = es.eigenvalues().minCoeff() > -1e-8 * top ? spdlog::level::debug : spdlog::level::warn;
    spdlog::log(level, "{} lost positive definiteness (min eigenvalue {:.3g}); clamping", what, es.eigenvalues().minCoeff());
    s = es.eigenvectors() * es.eigenvalues().cwiseMax(floor).asDiagonal() * es.eigenvectors().transpose();
    return symmetrized(s);
}

double adjacency_form(const SparseMatrix& e, const Vector& x) { return x.dot(e * x); }

/// Footprint-level fitted signal S_t eta + B_t xi.
Vector footprint_signal(const Model& model, const TimeSlice& slice, const Vector& eta, const Vector* xi) {
    Vector fine = model.design.basis * eta;
    if (xi) fine += *xi;
    return slice.footprints * fine;
}

double logdet_spd(const Matrix& m, const char* what) {
    const Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite", 0);
    return 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
}

}  // namespace

ConditionalDraw conditional_simulate(const std::vector<SliceSystem>& systems, const KalmanResult& run,
                                     const DfgpParams& params, std::uint64_t seed) {
    if (systems.empty()) throw InvalidArgument("conditional_simulate: no time steps");
    const Model& model = systems.front().model();
    const int u = static_cast<int>(systems.size());
    const Index r = model.basis_size();
    const bool lowrank = model.lowrank_only;

    Rng state_rng(derive_seed(seed, 0));
    std::vector<Vector> eta_prior(static_cast<std::size_t>(u) + 1);
    eta_prior[0] = psd_factor(params.K0) * standard_normal(state_rng, r);
    for (int t = 1; t <= u; ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        eta_prior[ti + 1] = params.H[ti] * eta_prior[ti] + psd_factor(params.U[ti]) * standard_normal(state_rng, r);
    }

    Rng noise_rng(derive_seed(seed, 1));
    std::vector<Vector> xi_prior(static_cast<std::size_t>(u));
    std::vector<Vector> d(static_cast<std::size_t>(u));
    for (int t = 1; t <= u; ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        const SliceSystem& sys = systems[ti];
        if (!lowrank)
            xi_prior[ti] = sample_car(model.car, params.car[ti], derive_seed(seed, 2 + static_cast<std::uint64_t>(t)),
                                      model.gamma_range);
        const Vector noise = sys.vinv().cwiseInverse().cwiseSqrt().cwiseProduct(
            standard_normal(noise_rng, sys.observations()));
        d[ti] = sys.detrended() - footprint_signal(model, sys.slice(), eta_prior[ti + 1],
                                                   lowrank ? nullptr : &xi_prior[ti]) -
                noise;
    }

    const std::vector<Vector> eta_shift = smoothed_means(systems, run, params, d);
    ConditionalDraw out;
    out.eta.resize(static_cast<std::size_t>(u) + 1);
    for (std::size_t t = 0; t <= static_cast<std::size_t>(u); ++t) out.eta[t] = eta_prior[t] + eta_shift[t];
    if (!lowrank) {
        out.xi.resize(static_cast<std::size_t>(u));
        for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t)
            out.xi[t] = xi_prior[t] + systems[t].xi_offset(d[t] - systems[t].basis_times(eta_shift[t + 1]));
    }
    return out;
}

ConditionalDraw conditional_simulate(const Model& model, const std::vector<TimeSlice>& data,
                                     const DfgpParams& params, std::uint64_t seed, const CarLogDet* car_logdet) {
    const auto systems = build_systems(model, data, params, car_logdet, {.logdet = false});
    KalmanResult run = kalman_filter(systems, params);
    smoother_pass(run, params);
    return conditional_simulate(systems, run, params, seed);
}

SufficientStats e_step(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                       const EstimatorConfig& config, std::uint64_t seed, const CarLogDet* car_logdet) {
    const int u = static_cast<int>(data.size());
    if (u < 1) throw InvalidArgument("e_step: no time steps");
    if (params.horizon() < u) throw InvalidArgument("e_step: parameter horizon shorter than data");
    const Index n_state = model.state_size();
    if (config.mode == EmMode::exact && !model.lowrank_only && n_state > config.exact_cap)
        throw InvalidArgument("exact EM needs dense N x N moments; N = " + std::to_string(n_state) + " exceeds cap " +
                              std::to_string(config.exact_cap));

    const auto systems = build_systems(model, data, params, car_logdet);
    KalmanResult run = kalman_filter(systems, params);
    smoother_pass(run, params);

    SufficientStats st;
    st.neg2loglik = neg2_loglik(run);
    st.eta.resize(static_cast<std::size_t>(u) + 1);
    st.K.resize(static_cast<std::size_t>(u) + 1);
    st.L.resize(static_cast<std::size_t>(u));
    for (std::size_t t = 0; t <= static_cast<std::size_t>(u); ++t) {
        st.eta[t] = run.smoothed[t].mean;
        st.K[t] = symmetrized(run.smoothed[t].cov + st.eta[t] * st.eta[t].transpose());
    }
    for (std::size_t t = 1; t <= static_cast<std::size_t>(u); ++t)
        st.L[t - 1] = run.lag1[t - 1] + st.eta[t] * st.eta[t - 1].transpose();
    st.fit_var.resize(static_cast<std::size_t>(u));
    st.xi_extra_degree.assign(static_cast<std::size_t>(u), 0.0);
    st.xi_extra_adjacency.assign(static_cast<std::size_t>(u), 0.0);

    st.signal.resize(static_cast<std::size_t>(u));
    if (model.lowrank_only) {
        for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
            st.signal[t] = footprint_signal(model, data[t], st.eta[t + 1], nullptr);
            st.fit_var[t] = rowwise_quadratic(data[t].basis(model), run.smoothed[t + 1].cov);
        }
        return st;
    }

    st.xi.resize(static_cast<std::size_t>(u));
    const SparseMatrix& adj = model.car.adjacency;
    const Vector& deg = model.car.degree;

    if (config.mode == EmMode::exact) {
        const auto all = all_baus(model);
        for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
            const SliceSystem& sys = systems[t];
            const Matrix& p = run.smoothed[t + 1].cov;
            const Matrix ainv = symmetrized(sys.a_inverse_columns(all));
            st.xi[t] = sys.c() - sys.f() * st.eta[t + 1];
            st.signal[t] = footprint_signal(model, data[t], st.eta[t + 1], &st.xi[t]);
            const Matrix cov = ainv + sys.f() * p * sys.f().transpose();
            st.xi_extra_degree[t] = deg.dot(cov.diagonal());
            double tr_e = 0.0;
            for (Index k = 0; k < adj.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(adj, k); it; ++it) tr_e += it.value() * cov(it.row(), it.col());
            st.xi_extra_adjacency[t] = tr_e;
            const Matrix g = data[t].footprints * (model.design.basis - sys.f());
            const Matrix bainv = data[t].footprints * ainv;
            st.fit_var[t] = rowwise_quadratic(g, p) + bainv.cwiseProduct(Matrix(data[t].footprints)).rowwise().sum();
        }
        return st;
    }

    const auto nd = static_cast<std::size_t>(config.draws);
    std::vector<ConditionalDraw> draws;
    draws.reserve(nd);
    for (std::size_t k = 0; k < nd; ++k) draws.push_back(conditional_simulate(systems, run, params, derive_seed(seed, k)));
    // The measurement block uses the paired draw of (eta, xi). Pairing the eta mean with a
    // xi draw would drop the (negative) posterior covariance between the two components
    // and inflate the residual variance.
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        Vector mean = Vector::Zero(n_state);
        Vector signal = Vector::Zero(data[t].size());
        std::vector<Vector> paired;
        for (const auto& dr : draws) {
            mean += dr.xi[t];
            paired.push_back(footprint_signal(model, data[t], dr.eta[t + 1], &dr.xi[t]));
            signal += paired.back();
        }
        mean /= static_cast<double>(nd);
        signal /= static_cast<double>(nd);
        st.xi[t] = mean;
        st.signal[t] = signal;
        st.fit_var[t] = Vector::Zero(data[t].size());
        if (nd > 1) {
            double extra_deg = 0.0, extra_adj = 0.0;
            for (std::size_t k = 0; k < nd; ++k) {
                const Vector dev = draws[k].xi[t] - mean;
                extra_deg += deg.dot(dev.cwiseProduct(dev));
                extra_adj += adjacency_form(adj, dev);
                st.fit_var[t] += (paired[k] - signal).cwiseAbs2() / static_cast<double>(nd);
            }
            st.xi_extra_degree[t] = extra_deg / static_cast<double>(nd);
            st.xi_extra_adjacency[t] = extra_adj / static_cast<double>(nd);
        }
    }
    return st;
}

std::vector<Vector> update_beta(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                                const DfgpParams& prev) {
    const int u = stats.horizon();
    std::vector<Vector> beta(static_cast<std::size_t>(u));
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        const TimeSlice& slice = data[t];
        if (slice.size() == 0) {
            beta[t] = prev.beta[t];
            continue;
        }
        const Matrix x = slice.covariates(model);
        const Vector w = slice.noise_variance(prev.sigma2[t]).cwiseInverse();
        const Vector y = slice.z - stats.signal[t];
        const Matrix xtwx = x.transpose() * w.asDiagonal() * x;
        const Vector xtwy = x.transpose() * w.cwiseProduct(y);
        const Eigen::LDLT<Matrix> ldlt(xtwx);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
            ldlt.vectorD().minCoeff() > 1e-12 * ldlt.vectorD().maxCoeff()) {
            beta[t] = ldlt.solve(xtwy);
        } else {
            spdlog::warn("t={}: covariate cross-product is rank deficient; using a minimum-norm solution", t + 1);
            beta[t] = xtwx.completeOrthogonalDecomposition().solve(xtwy);
        }
    }
    return beta;
}

std::vector<Vector> update_sigma2(const Model& model, const std::vector<TimeSlice>& data,
                                  const SufficientStats& stats, const std::vector<Vector>& beta,
                                  const DfgpParams& prev, bool time_invariant) {
    const int u = stats.horizon();
    const int k0 = model.instruments;
    Matrix sum = Matrix::Zero(u, k0);
    Matrix count = Matrix::Zero(u, k0);
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        const TimeSlice& slice = data[t];
        if (slice.size() == 0) continue;
        const Vector e = slice.z - slice.footprints * (model.design.covariates * beta[t]) - stats.signal[t];
        for (Index i = 0; i < slice.size(); ++i) {
            const int k = slice.instrument[static_cast<std::size_t>(i)] - 1;
            sum(static_cast<Index>(t), k) += (e[i] * e[i] + stats.fit_var[t][i]) / slice.var_factor[i];
            count(static_cast<Index>(t), k) += 1.0;
        }
    }
    std::vector<Vector> out(static_cast<std::size_t>(u));
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        out[t] = prev.sigma2[t];
        for (int k = 0; k < k0; ++k) {
            const double s = time_invariant ? sum.col(k).sum() : sum(static_cast<Index>(t), k);
            const double c = time_invariant ? count.col(k).sum() : count(static_cast<Index>(t), k);
            if (c > 0.0) out[t][k] = s / c;
        }
    }
    return out;
}

DynamicsUpdate update_dynamics(const SufficientStats& stats, const std::vector<int>& block_ends) {
    const int u = stats.horizon();
    if (block_ends.empty() || block_ends.back() != u) throw InvalidArgument("block ends must close at the horizon");
    DynamicsUpdate out;
    out.K0 = ensure_spd(stats.K[0], "K0");
    out.H.resize(static_cast<std::size_t>(u));
    out.U.resize(static_cast<std::size_t>(u));
    int start = 0;
    for (int end : block_ends) {
        const Index r = stats.K[0].rows();
        Matrix sl = Matrix::Zero(r, r), sk_prev = Matrix::Zero(r, r), sk = Matrix::Zero(r, r);
        for (int t = start + 1; t <= end; ++t) {
            const auto ti = static_cast<std::size_t>(t);
            sl += stats.L[ti - 1];
            sk_prev += stats.K[ti - 1];
            sk += stats.K[ti];
        }
        const Matrix h = right_solve_spd(sl, symmetrized(sk_prev), "sum of K_{t-1}");
        const Matrix uu = ensure_spd((sk - h * sl.transpose()) / static_cast<double>(end - start), "U");
        for (int t = start + 1; t <= end; ++t) {
            out.H[static_cast<std::size_t>(t - 1)] = h;
            out.U[static_cast<std::size_t>(t - 1)] = uu;
        }
        start = end;
    }
    return out;
}

CarMoments car_moments(const Model& model, const SufficientStats& stats, int time) {
    const auto ti = static_cast<std::size_t>(time - 1);
    const Vector& xi = stats.xi.at(ti);
    CarMoments m;
    m.a = model.car.degree.dot(xi.cwiseAbs2()) + stats.xi_extra_degree[ti];
    m.b = adjacency_form(model.car.adjacency, xi) + stats.xi_extra_adjacency[ti];
    return m;
}

CarParams update_car(const CarMoments& m, Index n, const CarLogDet& logdet, const GammaRange& range,
                     std::optional<double> previous_gamma, int grid) {
    const double nn = static_cast<double>(n);
    auto h = [&](double g) {
        const double q = m.a - g * m.b;
        if (!(q > 0.0)) return std::numeric_limits<double>::infinity();
        return nn * std::log(q) - logdet(g);
    };
    const double step = (range.upper - range.lower) / grid;
    int best_i = 0;
    double best_h = h(range.lower);
    for (int i = 1; i <= grid; ++i) {
        const double v = h(range.lower + i * step);
        if (v < best_h) {
            best_h = v;
            best_i = i;
        }
    }
    double best = range.lower + best_i * step;
    const double lo = range.lower + std::max(best_i - 1, 0) * step;
    const double hi = std::min(range.lower + std::min(best_i + 1, grid) * step, range.upper);
    if (hi > lo) {
        const auto refined = boost::math::tools::brent_find_minima(h, lo, hi, std::numeric_limits<double>::digits / 2);
        if (refined.second < best_h) {
            best = refined.first;
            best_h = refined.second;
        }
    }
    if (previous_gamma && range.contains(*previous_gamma) && h(*previous_gamma) <= best_h) best = *previous_gamma;
    const double tau2 = (m.a - best * m.b) / nn;
    if (!(tau2 > 0.0) || !std::isfinite(tau2)) throw NumericalError("CAR update: non-positive tau2", 0);
    return {best, tau2};
}

DfgpParams m_step(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                  const DfgpParams& prev, const EstimatorConfig& config, const CarLogDet* car_logdet) {
    const int u = stats.horizon();
    if (prev.horizon() != u || static_cast<int>(data.size()) != u)
        throw InvalidArgument("m_step: data, statistics and parameters must share the horizon");
    DfgpParams out = prev;
    out.beta = update_beta(model, data, stats, prev);
    out.sigma2 = update_sigma2(model, data, stats, out.beta, prev, config.time_invariant_nugget);
    DynamicsUpdate dyn = update_dynamics(stats, config.blocks_for(u));
    out.H = std::move(dyn.H);
    out.U = std::move(dyn.U);
    out.K0 = std::move(dyn.K0);
    if (!model.lowrank_only) {
        std::optional<CarLogDet> local;
        if (!car_logdet) car_logdet = &local.emplace(model.car);
        const int grid = car_logdet->dense() ? config.gamma_grid : std::min(config.gamma_grid, 20);
        for (int t = 1; t <= u; ++t)
            out.car[static_cast<std::size_t>(t - 1)] =
                update_car(car_moments(model, stats, t), model.state_size(), *car_logdet, model.gamma_range,
                           prev.car[static_cast<std::size_t>(t - 1)].gamma, grid);
    }
    return out;
}

double neg2_expected_complete(const Model& model, const std::vector<TimeSlice>& data, const SufficientStats& stats,
                              const DfgpParams& params, const CarLogDet* car_logdet) {
    const int u = stats.horizon();
    CompensatedSum total;
    total.add(logdet_spd(params.K0, "K0"));
    total.add(params.K0.llt().solve(stats.K[0]).trace());
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        const TimeSlice& slice = data[t];
        const Vector var = slice.noise_variance(params.sigma2[t]);
        const Vector e = slice.z - slice.footprints * (model.design.covariates * params.beta[t]) - stats.signal[t];
        total.add(var.array().log().sum());
        total.add(((e.cwiseAbs2() + stats.fit_var[t]).array() / var.array()).sum());

        const Matrix& h = params.H[t];
        const Matrix inner =
            stats.K[t + 1] - h * stats.L[t].transpose() - stats.L[t] * h.transpose() + h * stats.K[t] * h.transpose();
        total.add(logdet_spd(params.U[t], "U"));
        total.add(params.U[t].llt().solve(inner).trace());

        if (!model.lowrank_only) {
            const CarMoments m = car_moments(model, stats, static_cast<int>(t) + 1);
            const CarParams& cp = params.car[t];
            const double logdet_q =
                car_logdet ? car_logdet->precision_logdet(cp)
                           : SparseCholesky(build_precision(model.car, cp, model.gamma_range)).logdet();
            total.add((m.a - cp.gamma * m.b) / cp.tau2);
            total.add(-logdet_q);
        }
    }
    return total.value();
}

DfgpParams initial_params(const Model& model, const std::vector<TimeSlice>& data) {
    const int u = static_cast<int>(data.size());
    if (u < 1) throw InvalidArgument("initial_params: no time steps");
    const Index p = model.covariate_size();
    const Index r = model.basis_size();

    Matrix xtx_all = Matrix::Zero(p, p);
    Vector xty_all = Vector::Zero(p);
    double zsum = 0.0, zsq = 0.0, zn = 0.0;
    std::vector<Matrix> xs(static_cast<std::size_t>(u));
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        xs[t] = data[t].covariates(model);
        xtx_all += xs[t].transpose() * xs[t];
        xty_all += xs[t].transpose() * data[t].z;
        zsum += data[t].z.sum();
        zsq += data[t].z.squaredNorm();
        zn += static_cast<double>(data[t].size());
    }
    if (zn < 2.0) throw InvalidArgument("initial_params: need at least two observations");
    const double mean = zsum / zn;
    const double varz = std::max((zsq - zn * mean * mean) / (zn - 1.0), 1e-12);
    const Vector pooled = xtx_all.completeOrthogonalDecomposition().solve(xty_all);

    DfgpParams out;
    const int k0 = model.instruments;
    Vector rsum = Vector::Zero(k0), rsq = Vector::Zero(k0), rn = Vector::Zero(k0);
    for (std::size_t t = 0; t < static_cast<std::size_t>(u); ++t) {
        Vector b = pooled;
        if (data[t].size() > 2 * p) {
            const Matrix xtx = xs[t].transpose() * xs[t];
            const Eigen::LDLT<Matrix> ldlt(xtx);
            if (ldlt.isPositive() && ldlt.vectorD().minCoeff() > 1e-10 * ldlt.vectorD().maxCoeff())
                b = ldlt.solve(xs[t].transpose() * data[t].z);
        }
        out.beta.push_back(b);
        const Vector res = data[t].z - xs[t] * b;
        for (Index i = 0; i < res.size(); ++i) {
            const int k = data[t].instrument[static_cast<std::size_t>(i)] - 1;
            rsum[k] += res[i];
            rsq[k] += res[i] * res[i];
            rn[k] += 1.0;
        }
    }
    Vector sigma2(k0);
    for (int k = 0; k < k0; ++k) {
        const double v =
            rn[k] > 1.0 ? (rsq[k] - rsum[k] * rsum[k] / rn[k]) / (rn[k] - 1.0) : varz;
        sigma2[k] = 0.1 * std::max(v, 1e-12 * varz);
    }
    const double gamma = std::clamp(0.5, model.gamma_range.lower, model.gamma_range.upper);
    for (int t = 0; t < u; ++t) {
        out.H.push_back(Matrix::Identity(r, r));
        out.U.push_back(varz * Matrix::Identity(r, r));
        out.car.push_back({gamma, 0.01 * varz});
        out.sigma2.push_back(sigma2);
    }
    out.K0 = varz * Matrix::Identity(r, r);
    return out;
}

namespace {

DfgpParams average_params(std::vector<DfgpParams>::const_iterator first, std::vector<DfgpParams>::const_iterator last) {
    DfgpParams avg = *first;
    const double n = static_cast<double>(last - first);
    for (auto it = first + 1; it != last; ++it) {
        for (std::size_t t = 0; t < avg.beta.size(); ++t) {
            avg.beta[t] += it->beta[t];
            avg.H[t] += it->H[t];
            avg.U[t] += it->U[t];
            avg.car[t].gamma += it->car[t].gamma;
            avg.car[t].tau2 += it->car[t].tau2;
            avg.sigma2[t] += it->sigma2[t];
        }
        avg.K0 += it->K0;
    }
    for (std::size_t t = 0; t < avg.beta.size(); ++t) {
        avg.beta[t] /= n;
        avg.H[t] /= n;
        avg.U[t] /= n;
        avg.car[t].gamma /= n;
        avg.car[t].tau2 /= n;
        avg.sigma2[t] /= n;
    }
    avg.K0 /= n;
    return avg;
}

void floor_variances(DfgpParams& p, double scale) {
    const double floor = 1e-10 * scale;
    for (auto& s : p.sigma2)
        for (Index k = 0; k < s.size(); ++k)
            if (!(s[k] > floor)) {
                spdlog::warn("nugget variance {:.3g} floored at {:.3g}", s[k], floor);
                s[k] = floor;
            }
}

}  // namespace

EstimateResult run_estimator(const Model& model, const std::vector<TimeSlice>& data, const EstimatorConfig& config,
                             std::optional<DfgpParams> init) {
    config.validate();
    const int u = static_cast<int>(data.size());
    if (u < 1) throw InvalidArgument("run_estimator: no time steps");
    DfgpParams params = init ? init->extended(u).truncated(u) : initial_params(model, data);
    params.validate(model);

    std::optional<CarLogDet> logdet;
    if (!model.lowrank_only) logdet.emplace(model.car);
    const CarLogDet* ld = logdet ? &*logdet : nullptr;

    double scale = 0.0;
    for (const auto& s : params.sigma2) scale = std::max(scale, s.maxCoeff());

    EstimateResult res;
    std::vector<DfgpParams> history;
    int stable = 0;
    int it = 0;
    try {
        for (; it < config.max_iter; ++it) {
            const SufficientStats stats = e_step(model, data, params, config, derive_seed(config.seed, it), ld);
            res.trace.push_back({it, stats.neg2loglik});
            if (it > 0) {
                const double prev = res.trace[res.trace.size() - 2].neg2loglik;
                const double rel = std::abs(stats.neg2loglik - prev) / std::max(1.0, std::abs(prev));
                stable = rel < config.rel_tol ? stable + 1 : 0;
                if (stable >= config.rel_window) {
                    res.converged = true;
                    break;
                }
            }
            DfgpParams next = m_step(model, data, stats, params, config, ld);
            floor_variances(next, scale);
            const Vector before = params.flatten();
            const double change = (next.flatten() - before).norm() / std::max(1.0, before.norm());
            history.push_back(next);
            params = std::move(next);
            res.iterations = it + 1;
            if (change < config.param_tol) {
                res.converged = true;
                break;
            }
        }
    } catch (const EstimationFailure&) {
        throw;
    } catch (const NumericalError& e) {
        throw EstimationFailure(e, it, params);
    }
    if (config.mode == EmMode::sem && !history.empty() && config.average_fraction > 0.0) {
        const auto keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(config.average_fraction * static_cast<double>(history.size()))));
        params = average_params(history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
    }
    if (!res.converged) spdlog::info("estimator stopped after {} iterations without meeting the convergence rule",
                                     res.iterations);
    res.neg2loglik = neg2_loglik(model, data, params, ld);
    res.params = std::move(params);
    return res;
}

std::vector<EstimateResult> fit_filtering_sequence(const Model& model, const std::vector<TimeSlice>& data,
                                                   const EstimatorConfig& config, bool warm_start) {
    const int big_t = static_cast<int>(data.size());
    if (big_t < 2) throw InvalidArgument("filtering protocol needs at least two time steps");
    std::vector<EstimateResult> out;
    for (int u = 2; u <= big_t; ++u) {
        const std::vector<TimeSlice> head(data.begin(), data.begin() + u);
        EstimatorConfig cfg = config;
        cfg.seed = derive_seed(config.seed, static_cast<std::uint64_t>(u));
        std::optional<DfgpParams> init;
        if (warm_start && !out.empty()) init = out.back().params.extended(u);
        out.push_back(run_estimator(model, head, cfg, init));
    }
    return out;
}

}  // namespace dfgp
