#include "dfgp/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>
#include <spdlog/spdlog.h>

#include "dfgp/error.hpp"
#include "dfgp/parallel.hpp"

namespace dfgp {

void ExpCovParams::validate() const {
    if (!(sigma2 > 0.0) || !(phi_s > 0.0) || !(phi_t > 0.0) || !(nugget >= 0.0) || !std::isfinite(sigma2) ||
        !std::isfinite(phi_s) || !std::isfinite(phi_t) || !std::isfinite(nugget))
        throw InvalidParameter("exponential covariance needs sigma2, phi_s, phi_t > 0 and nugget >= 0");
}

double exp_cov(double h, double u, const ExpCovParams& p) {
    if (h < 0.0 || u < 0.0) throw InvalidArgument("exp_cov: distances must be nonnegative");
    const double d = std::sqrt(h * h / (p.phi_s * p.phi_s) + u * u / (p.phi_t * p.phi_t));
    double c = p.sigma2 * std::exp(-d);
    if (h == 0.0 && u == 0.0) c += p.nugget;
    return c;
}

namespace {

double distance(Coord a, Coord b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Signal covariance between records (nugget added on the diagonal only).
Matrix window_covariance(const std::vector<PointObservation>& obs, const ExpCovParams& p) {
    const auto n = static_cast<Index>(obs.size());
    ExpCovParams signal = p;
    signal.nugget = 0.0;
    Matrix c(n, n);
    for (Index i = 0; i < n; ++i) {
        c(i, i) = p.sigma2 + p.nugget;
        for (Index j = 0; j < i; ++j) {
            const auto& a = obs[static_cast<std::size_t>(i)];
            const auto& b = obs[static_cast<std::size_t>(j)];
            c(i, j) = c(j, i) = exp_cov(distance(a.location, b.location), std::abs(a.time - b.time), signal);
        }
    }
    return c;
}

Eigen::LLT<Matrix> factor_window(const Matrix& c, double scale) {
    Eigen::LLT<Matrix> llt(c);
    if (llt.info() == Eigen::Success) return llt;
    spdlog::warn("local kriging window covariance is singular (collocated records?); regularizing");
    llt.compute(c + 1e-8 * scale * Matrix::Identity(c.rows(), c.cols()));
    if (llt.info() != Eigen::Success) throw NumericalError("local kriging window covariance not positive definite", 0);
    return llt;
}

Vector values_of(const std::vector<PointObservation>& obs) {
    Vector y(static_cast<Index>(obs.size()));
    for (std::size_t i = 0; i < obs.size(); ++i) y[static_cast<Index>(i)] = obs[i].value;
    return y;
}

struct Bounds {
    double lo[4];
    double hi[4];
};

Bounds fit_bounds(const std::vector<PointObservation>& obs) {
    double vx = 0.0, mean = 0.0;
    for (const auto& o : obs) mean += o.value;
    mean /= static_cast<double>(obs.size());
    for (const auto& o : obs) vx += (o.value - mean) * (o.value - mean);
    vx = std::max(vx / std::max<double>(1.0, static_cast<double>(obs.size()) - 1.0), 1e-12);
    double x0 = obs[0].location.x, x1 = x0, y0 = obs[0].location.y, y1 = y0, t0 = obs[0].time, t1 = t0;
    for (const auto& o : obs) {
        x0 = std::min(x0, o.location.x);
        x1 = std::max(x1, o.location.x);
        y0 = std::min(y0, o.location.y);
        y1 = std::max(y1, o.location.y);
        t0 = std::min(t0, o.time);
        t1 = std::max(t1, o.time);
    }
    const double ext = std::max(std::hypot(x1 - x0, y1 - y0), 1e-6);
    const double text = std::max(t1 - t0, 1.0);
    return {{std::log(1e-6 * vx), std::log(1e-3 * ext), std::log(1e-3 * text), std::log(1e-8 * vx)},
            {std::log(1e3 * vx), std::log(1e2 * ext), std::log(1e2 * text), std::log(10.0 * vx)}};
}

struct FitContext {
    const std::vector<PointObservation>* obs;
    Bounds bounds;
};

ExpCovParams from_log(const double* x) { return {std::exp(x[0]), std::exp(x[1]), std::exp(x[2]), std::exp(x[3])}; }

double fit_objective(const gsl_vector* v, void* ctx_ptr) {
    const auto* ctx = static_cast<const FitContext*>(ctx_ptr);
    double x[4];
    for (int i = 0; i < 4; ++i) {
        x[i] = gsl_vector_get(v, static_cast<std::size_t>(i));
        if (x[i] < ctx->bounds.lo[i] || x[i] > ctx->bounds.hi[i]) return 1e300;
    }
    try {
        const double f = exp_cov_neg2_loglik(*ctx->obs, from_log(x));
        return std::isfinite(f) ? f : 1e300;
    } catch (const Error&) {
        return 1e300;
    }
}

}  // namespace

double exp_cov_neg2_loglik(const std::vector<PointObservation>& obs, const ExpCovParams& p) {
    p.validate();
    if (obs.size() < 2) throw InvalidArgument("exp_cov likelihood needs at least two observations");
    const Matrix c = window_covariance(obs, p);
    const Eigen::LLT<Matrix> llt(c);
    if (llt.info() != Eigen::Success) throw NumericalError("window covariance not positive definite", 0);
    const Vector y = values_of(obs);
    const Vector ones = Vector::Ones(y.size());
    const Vector ci_one = llt.solve(ones);
    const double mu = ci_one.dot(y) / ci_one.dot(ones);
    const Vector r = y - mu * ones;
    return 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum() + r.dot(llt.solve(r));
}

ExpCovParams fit_exp_cov(const std::vector<PointObservation>& obs, const ExpCovParams& start,
                         const LocalKrigeOptions& opts) {
    if (obs.size() < 2) throw InvalidArgument("fit_exp_cov needs at least two observations");
    FitContext ctx{&obs, fit_bounds(obs)};
    double x0[4] = {std::log(start.sigma2), std::log(start.phi_s), std::log(start.phi_t),
                    std::log(std::max(start.nugget, 1e-3 * start.sigma2))};
    for (int i = 0; i < 4; ++i) x0[i] = std::clamp(x0[i], ctx.bounds.lo[i] + 1e-9, ctx.bounds.hi[i] - 1e-9);

    gsl_set_error_handler_off();
    gsl_multimin_function fn{&fit_objective, 4, &ctx};
    gsl_vector* x = gsl_vector_alloc(4);
    gsl_vector* step = gsl_vector_alloc(4);
    for (std::size_t i = 0; i < 4; ++i) {
        gsl_vector_set(x, i, x0[i]);
        gsl_vector_set(step, i, 0.5);
    }
    gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 4);
    gsl_multimin_fminimizer_set(s, &fn, x, step);
    for (int it = 0; it < opts.max_evals; ++it) {
        if (gsl_multimin_fminimizer_iterate(s) != GSL_SUCCESS) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), opts.tol) == GSL_SUCCESS) break;
    }
    double best[4];
    for (std::size_t i = 0; i < 4; ++i) best[i] = gsl_vector_get(s->x, i);
    const bool improved = s->fval < 1e299;
    gsl_multimin_fminimizer_free(s);
    gsl_vector_free(step);
    gsl_vector_free(x);
    if (!improved) {
        spdlog::warn("local kriging ML fit found no admissible point; keeping the start values");
        return start;
    }
    return from_log(best);
}

KrigeResult krige(const std::vector<PointObservation>& window, Coord location, double time, const ExpCovParams& p) {
    p.validate();
    if (window.size() < 2) throw InvalidArgument("kriging needs at least two observations in the window");
    const Matrix c = window_covariance(window, p);
    const auto llt = factor_window(c, p.sigma2 + p.nugget);
    ExpCovParams signal = p;
    signal.nugget = 0.0;
    Vector k(static_cast<Index>(window.size()));
    for (std::size_t i = 0; i < window.size(); ++i)
        k[static_cast<Index>(i)] =
            exp_cov(distance(window[i].location, location), std::abs(window[i].time - time), signal);
    const Vector y = values_of(window);
    const Vector ones = Vector::Ones(y.size());
    const Vector ci_one = llt.solve(ones);
    const double mu = ci_one.dot(y) / ci_one.dot(ones);
    const Vector ci_k = llt.solve(k);
    KrigeResult out;
    out.mean = mu + ci_k.dot(y - mu * ones);
    out.variance = std::max(p.sigma2 - k.dot(ci_k), 0.0);
    return out;
}

std::vector<PointObservation> nearest_window(const std::vector<PointObservation>& obs, Coord location, double time,
                                             int k, const ExpCovParams& metric) {
    std::vector<std::pair<double, std::size_t>> d(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const double h = distance(obs[i].location, location) / metric.phi_s;
        const double u = (obs[i].time - time) / metric.phi_t;
        d[i] = {h * h + u * u, i};
    }
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
    std::vector<PointObservation> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) out.push_back(obs[d[i].second]);
    return out;
}

KrigeResult local_krige(Coord location, double time, const std::vector<PointObservation>& obs,
                        const ExpCovParams& pilot, const LocalKrigeOptions& opts) {
    const auto window = nearest_window(obs, location, time, opts.k, pilot);
    if (window.size() < 2) throw InvalidArgument("local kriging needs at least two observations");
    return krige(window, location, time, fit_exp_cov(window, pilot, opts));
}

namespace {

ExpCovParams pilot_fit(const std::vector<PointObservation>& obs, const LocalKrigeOptions& opts) {
    std::vector<std::size_t> idx(obs.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(opts.seed, 0));
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(opts.k), obs.size());
    for (std::size_t i = 0; i < m; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(obs.size() - i));
        std::swap(idx[i], idx[std::min(j, obs.size() - 1)]);
    }
    std::vector<PointObservation> sub;
    for (std::size_t i = 0; i < m; ++i) sub.push_back(obs[idx[i]]);
    const Bounds b = fit_bounds(sub);
    double mean = 0.0, var = 0.0;
    for (const auto& o : sub) mean += o.value;
    mean /= static_cast<double>(sub.size());
    for (const auto& o : sub) var += (o.value - mean) * (o.value - mean);
    var = std::max(var / static_cast<double>(sub.size()), 1e-12);
    const double extent = std::exp(b.hi[1]) / 1e2;
    const ExpCovParams start{0.8 * var, 0.1 * extent, 1.0, 0.2 * var};
    return fit_exp_cov(sub, start, opts);
}

}  // namespace

LocalKrigeBatch local_krige_batch(const std::vector<KrigeTarget>& targets, const std::vector<PointObservation>& obs,
                                  const LocalKrigeOptions& opts) {
    if (obs.size() < 2) throw InvalidArgument("local kriging needs at least two observations");
    LocalKrigeBatch out;
    out.pilot = pilot_fit(obs, opts);
    out.results.resize(targets.size());
    out.params.resize(targets.size());

    std::map<std::tuple<long, long, double>, std::vector<std::size_t>> tiles;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (opts.tile_size > 0.0) {
            const auto tx = static_cast<long>(std::floor(targets[i].location.x / opts.tile_size));
            const auto ty = static_cast<long>(std::floor(targets[i].location.y / opts.tile_size));
            tiles[{tx, ty, targets[i].time}].push_back(i);
        } else {
            tiles[{static_cast<long>(i), 0, targets[i].time}].push_back(i);
        }
    }
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [key, members] : tiles) groups.push_back(std::move(members));

    parallel_for(groups.size(), [&](std::size_t g) {
        const auto& members = groups[g];
        Coord center{0.0, 0.0};
        for (std::size_t i : members) {
            center.x += targets[i].location.x / static_cast<double>(members.size());
            center.y += targets[i].location.y / static_cast<double>(members.size());
        }
        const double time = targets[members.front()].time;
        const ExpCovParams fitted = fit_exp_cov(nearest_window(obs, center, time, opts.k, out.pilot), out.pilot, opts);
        for (std::size_t i : members) {
            const auto window = nearest_window(obs, targets[i].location, targets[i].time, opts.k, out.pilot);
            out.results[i] = krige(window, targets[i].location, targets[i].time, fitted);
            out.params[i] = fitted;
        }
    });
    return out;
}

double rmspe(const Vector& predictions, const Vector& truth) {
    if (predictions.size() != truth.size()) throw InvalidArgument("rmspe: length mismatch");
    if (predictions.size() == 0) throw InvalidArgument("rmspe: empty input");
    return std::sqrt((predictions - truth).squaredNorm() / static_cast<double>(predictions.size()));
}

double crps_gaussian(double mu, double sigma, double y) {
    if (!(sigma > 0.0)) throw InvalidArgument("crps_gaussian: sigma must be positive");
    const double z = (y - mu) / sigma;
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
    const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(M_PI));
}

Protocol parse_protocol(const std::string& name) {
    if (name == "filtering") return Protocol::filtering;
    if (name == "smoothing") return Protocol::smoothing;
    throw InvalidArgument("unknown protocol '" + name + "' (expected filtering or smoothing)");
}

std::string to_string(Protocol p) { return p == Protocol::filtering ? "filtering" : "smoothing"; }

CvMethod parse_method(const std::string& name) {
    if (name == "dfgp") return CvMethod::dfgp;
    if (name == "lowrank") return CvMethod::lowrank;
    if (name == "localkrige") return CvMethod::localkrige;
    if (name == "truth") return CvMethod::truth;
    throw InvalidArgument("unknown method '" + name + "' (expected dfgp, lowrank, localkrige or truth)");
}

std::string to_string(CvMethod m) {
    switch (m) {
        case CvMethod::dfgp: return "dfgp";
        case CvMethod::lowrank: return "lowrank";
        case CvMethod::localkrige: return "localkrige";
        case CvMethod::truth: return "truth";
    }
    return "?";
}

void HoldoutPlan::validate(const BauGrid& grid) const {
    if (!(random_fraction > 0.0 && random_fraction < 1.0))
        throw InvalidArgument("holdout random fraction must lie in (0, 1)");
    if (block_first > block_last) throw InvalidArgument("holdout block time range is empty");
    const Box b = grid.bounds();
    if (block.x0 < b.x0 || block.y0 < b.y0 || block.x1 > b.x1 || block.y1 > b.y1 || block.x0 > block.x1 ||
        block.y0 > block.y1)
        throw InvalidArgument("holdout block must lie within the domain");
}

std::vector<bool> HoldoutMask::kept(int time) const {
    const auto& k = kind.at(static_cast<std::size_t>(time - 1));
    std::vector<bool> out(k.size());
    for (std::size_t i = 0; i < k.size(); ++i) out[i] = k[i] == HoldoutKind::kept;
    return out;
}

std::size_t HoldoutMask::held_count(int time) const {
    const auto& k = kind.at(static_cast<std::size_t>(time - 1));
    return static_cast<std::size_t>(std::count_if(k.begin(), k.end(), [](HoldoutKind h) { return h != HoldoutKind::kept; }));
}

Coord footprint_centroid(const BauGrid& grid, const TimeSlice& slice, Index i) {
    Coord c{0.0, 0.0};
    for (SparseRowMatrix::InnerIterator it(slice.footprints, i); it; ++it) {
        const Coord b = grid.centroid(grid.grid_index(it.col()));
        c.x += it.value() * b.x;
        c.y += it.value() * b.y;
    }
    return c;
}

namespace {

bool eligible_time(int t, int big_t, Protocol p) { return p == Protocol::filtering ? t >= 2 : t <= big_t - 1; }

}  // namespace

HoldoutMask make_holdout(const Dataset& ds, const HoldoutPlan& plan, Protocol protocol) {
    plan.validate(ds.grid);
    const int big_t = static_cast<int>(ds.data.size());
    HoldoutMask mask;
    mask.kind.resize(ds.data.size());
    for (int t = 1; t <= big_t; ++t) {
        // One stream per time step, so both protocols hold out the same records at shared times.
        Rng rng(derive_seed(derive_seed(plan.seed, 17), static_cast<std::uint64_t>(t)));
        const TimeSlice& s = ds.data[static_cast<std::size_t>(t - 1)];
        auto& kind = mask.kind[static_cast<std::size_t>(t - 1)];
        kind.assign(static_cast<std::size_t>(s.size()), HoldoutKind::kept);
        if (!eligible_time(t, big_t, protocol)) continue;
        std::vector<std::size_t> rest;
        for (Index i = 0; i < s.size(); ++i) {
            if (s.instrument[static_cast<std::size_t>(i)] != plan.instrument || s.footprints.row(i).nonZeros() != 1)
                continue;
            if (t >= plan.block_first && t <= plan.block_last && plan.block.contains(footprint_centroid(ds.grid, s, i)))
                kind[static_cast<std::size_t>(i)] = HoldoutKind::block;
            else
                rest.push_back(static_cast<std::size_t>(i));
        }
        const auto take = static_cast<std::size_t>(std::llround(plan.random_fraction * static_cast<double>(rest.size())));
        for (std::size_t i = 0; i < take; ++i) {
            const auto j = i + std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(rest.size() - i)),
                                        rest.size() - i - 1);
            std::swap(rest[i], rest[j]);
            kind[rest[i]] = HoldoutKind::random;
        }
    }
    return mask;
}

namespace {

struct HeldRecord {
    int time;
    std::size_t row;
    HoldoutKind kind;
    double value;
    Index state;
    int instrument;
    double var_factor;
};

std::vector<HeldRecord> held_records(const Dataset& ds, const HoldoutMask& mask) {
    std::vector<HeldRecord> out;
    for (std::size_t t = 0; t < ds.data.size(); ++t) {
        const TimeSlice& s = ds.data[t];
        for (Index i = 0; i < s.size(); ++i) {
            const HoldoutKind k = mask.kind[t][static_cast<std::size_t>(i)];
            if (k == HoldoutKind::kept) continue;
            SparseRowMatrix::InnerIterator it(s.footprints, i);
            out.push_back({static_cast<int>(t) + 1, static_cast<std::size_t>(i), k, s.z[i], it.col(),
                           s.instrument[static_cast<std::size_t>(i)], s.var_factor[i]});
        }
    }
    return out;
}

/// Predictions for the held records at one time from a model fit.
void predict_held(const std::vector<SliceSystem>& systems, const KalmanResult& run, const DfgpParams& params,
                  int time, bool smoothed, const std::vector<const HeldRecord*>& recs, CvMethod method,
                  std::vector<CvPrediction>& out) {
    if (recs.empty()) return;
    std::vector<Index> baus;
    for (const auto* r : recs) baus.push_back(r->state);
    const auto ti = static_cast<std::size_t>(time - 1);
    const FieldPieces pieces = field_pieces(systems[ti], baus);
    const PredictionField f = smoothed ? predict_smooth(pieces, run, params.beta[ti])
                                       : predict_filter(pieces, run, params.beta[ti]);
    for (std::size_t j = 0; j < recs.size(); ++j) {
        const auto* r = recs[j];
        const double noise = params.sigma2[ti][r->instrument - 1] * r->var_factor;
        const auto jj = static_cast<Index>(j);
        out.push_back({method, time, r->row, r->kind, r->value, f.mean[jj],
                       std::sqrt(f.std_error[jj] * f.std_error[jj] + noise)});
    }
}

void run_state_space(const Dataset& ds, const std::vector<TimeSlice>& training,
                     const std::vector<std::vector<const HeldRecord*>>& by_time, CvMethod method, Protocol protocol,
                     const CvOptions& opts, std::vector<CvPrediction>& out) {
    Model model = ds.model;
    model.lowrank_only = method == CvMethod::lowrank;
    const int big_t = static_cast<int>(training.size());
    if (protocol == Protocol::smoothing) {
        const DfgpParams params =
            opts.known_params ? opts.known_params->extended(big_t).truncated(big_t)
                              : run_estimator(model, training, opts.estimator).params;
        const auto systems = build_systems(model, training, params, nullptr, {.logdet = false});
        KalmanResult run = kalman_filter(systems, params);
        smoother_pass(run, params);
        for (int t = 1; t <= big_t; ++t)
            predict_held(systems, run, params, t, true, by_time[static_cast<std::size_t>(t - 1)], method, out);
        return;
    }
    std::vector<DfgpParams> fits;
    if (opts.known_params) {
        for (int u = 2; u <= big_t; ++u) fits.push_back(opts.known_params->extended(u).truncated(u));
    } else {
        for (auto& r : fit_filtering_sequence(model, training, opts.estimator)) fits.push_back(std::move(r.params));
    }
    for (int u = 2; u <= big_t; ++u) {
        const auto& recs = by_time[static_cast<std::size_t>(u - 1)];
        if (recs.empty()) continue;
        const DfgpParams& params = fits[static_cast<std::size_t>(u - 2)];
        const std::vector<TimeSlice> head(training.begin(), training.begin() + u);
        const auto systems = build_systems(model, head, params, nullptr, {.logdet = false});
        const KalmanResult run = kalman_filter(systems, params);
        predict_held(systems, run, params, u, false, recs, method, out);
    }
}

void run_local_kriging(const Dataset& ds, const std::vector<TimeSlice>& training, const std::vector<HeldRecord>& held,
                       const CvOptions& opts, std::vector<CvPrediction>& out) {
    std::vector<PointObservation> obs;
    for (const auto& s : training)
        for (Index i = 0; i < s.size(); ++i)
            obs.push_back({footprint_centroid(ds.grid, s, i), static_cast<double>(s.time), s.z[i]});
    std::vector<KrigeTarget> targets;
    for (const auto& r : held)
        targets.push_back({ds.grid.centroid(ds.grid.grid_index(r.state)), static_cast<double>(r.time)});
    const LocalKrigeBatch batch = local_krige_batch(targets, obs, opts.krige);
    for (std::size_t j = 0; j < held.size(); ++j) {
        const auto& r = held[j];
        const double var = batch.results[j].variance + batch.params[j].nugget;
        out.push_back({CvMethod::localkrige, r.time, r.row, r.kind, r.value, batch.results[j].mean, std::sqrt(var)});
    }
}

double crps_or_point(double mu, double sd, double y) { return sd > 0.0 ? crps_gaussian(mu, sd, y) : std::abs(y - mu); }

void summarize(const std::vector<CvPrediction>& preds, CvMethod method, Protocol protocol, int big_t,
               const std::string& subset, std::vector<MetricRow>& out) {
    std::vector<MetricRow> per_time;
    for (int t = 1; t <= big_t; ++t) {
        std::vector<double> ms, ys, cr;
        for (const auto& p : preds) {
            if (p.method != method || p.time != t) continue;
            if (subset == "block" && p.kind != HoldoutKind::block) continue;
            if (subset == "random" && p.kind != HoldoutKind::random) continue;
            ms.push_back(p.mean);
            ys.push_back(p.value);
            cr.push_back(crps_or_point(p.mean, p.sd, p.value));
        }
        if (ms.empty()) continue;
        const Vector mv = Eigen::Map<const Vector>(ms.data(), static_cast<Index>(ms.size()));
        const Vector yv = Eigen::Map<const Vector>(ys.data(), static_cast<Index>(ys.size()));
        MetricRow row{to_string(method), to_string(protocol), t, subset, rmspe(mv, yv),
                      std::accumulate(cr.begin(), cr.end(), 0.0) / static_cast<double>(cr.size()), ms.size()};
        per_time.push_back(row);
    }
    if (per_time.empty()) return;
    MetricRow agg{to_string(method), to_string(protocol), 0, subset, 0.0, 0.0, 0};
    for (const auto& r : per_time) {
        agg.rmspe += r.rmspe / static_cast<double>(per_time.size());
        agg.crps += r.crps / static_cast<double>(per_time.size());
        agg.n_holdout += r.n_holdout;
    }
    out.insert(out.end(), per_time.begin(), per_time.end());
    out.push_back(agg);
}

}  // namespace

CvResult run_cv(const Dataset& ds, const HoldoutMask& mask, const std::vector<CvMethod>& methods, Protocol protocol,
                const CvOptions& opts) {
    const int big_t = static_cast<int>(ds.data.size());
    if (big_t < 2) throw InvalidArgument("cross-validation needs at least two time steps");
    if (mask.kind.size() != ds.data.size()) throw InvalidArgument("holdout mask does not match the dataset");
    CvResult res;
    res.mask = mask;
    std::vector<TimeSlice> training;
    for (int t = 1; t <= big_t; ++t) training.push_back(ds.data[static_cast<std::size_t>(t - 1)].subset(mask.kept(t)));
    const std::vector<HeldRecord> held = held_records(ds, mask);
    std::vector<std::vector<const HeldRecord*>> by_time(static_cast<std::size_t>(big_t));
    for (const auto& r : held)
        if (eligible_time(r.time, big_t, protocol)) by_time[static_cast<std::size_t>(r.time - 1)].push_back(&r);

    for (CvMethod m : methods) {
        switch (m) {
            case CvMethod::truth:
                for (const auto& r : held)
                    if (eligible_time(r.time, big_t, protocol))
                        res.predictions.push_back({m, r.time, r.row, r.kind, r.value, r.value, 0.0});
                break;
            case CvMethod::dfgp:
            case CvMethod::lowrank: run_state_space(ds, training, by_time, m, protocol, opts, res.predictions); break;
            case CvMethod::localkrige: {
                std::vector<HeldRecord> eligible;
                for (const auto& r : held)
                    if (eligible_time(r.time, big_t, protocol)) eligible.push_back(r);
                if (!eligible.empty()) run_local_kriging(ds, training, eligible, opts, res.predictions);
                break;
            }
        }
        summarize(res.predictions, m, protocol, big_t, "all", res.metrics);
        summarize(res.predictions, m, protocol, big_t, "block", res.by_subset);
        summarize(res.predictions, m, protocol, big_t, "random", res.by_subset);
    }
    return res;
}

CvResult run_cv(const Dataset& ds, const HoldoutPlan& plan, const std::vector<CvMethod>& methods, Protocol protocol,
                const CvOptions& opts) {
    return run_cv(ds, make_holdout(ds, plan, protocol), methods, protocol, opts);
}

}  // namespace dfgp
