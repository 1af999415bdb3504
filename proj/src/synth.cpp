#include "dfgp/synth.hpp"

#include <cmath>

#include "dfgp/error.hpp"
#include "dfgp/rng.hpp"

namespace dfgp {

bool SwathSpec::missing(int col, int time, int nx) const {
    if (width <= 0) return false;
    const int p = period > 0 ? period : nx;
    const long pos = (static_cast<long>(col) + offset + static_cast<long>(shift) * (time - 1)) % p;
    return (pos < 0 ? pos + p : pos) < width;
}

void ScenarioConfig::validate() const {
    if (nx < 1 || ny < 1 || !(cell_size > 0.0)) throw InvalidArgument("scenario grid needs nx, ny >= 1 and cell_size > 0");
    if (horizon < 1) throw InvalidArgument("scenario horizon must be at least 1");
    if (basis_counts.empty()) throw InvalidArgument("scenario needs at least one basis resolution");
    if (beta.size() != covariates.size()) throw InvalidArgument("scenario beta needs one entry per covariate");
    if (instruments.empty()) throw InvalidArgument("scenario needs at least one instrument");
    for (const auto& in : instruments) {
        if (in.block < 1) throw InvalidArgument("instrument block size must be at least 1");
        if (!(in.sigma2 > 0.0) || !(in.var_factor > 0.0))
            throw InvalidArgument("instrument noise variance and variance factor must be positive");
        if (!(in.drop_rate >= 0.0 && in.drop_rate < 1.0)) throw InvalidArgument("drop rate must lie in [0, 1)");
        if (in.swath.width < 0 || in.swath.period < 0) throw InvalidArgument("swath width and period must be >= 0");
    }
    if (!(u_var >= 0.0) || !(k0_var >= 0.0)) throw InvalidArgument("U and K0 scales must be nonnegative");
    if (!(tau2 > 0.0)) throw InvalidParameter("tau2 must be positive");
    if (!GammaRange{}.contains(gamma)) throw InvalidParameter("gamma outside [0, 1)");
}

Scenario build_scenario(const ScenarioConfig& cfg) {
    cfg.validate();
    BauGrid grid = build_grid(cfg.nx, cfg.ny, cfg.cell_size, cfg.origin);
    BisquareBasis basis = layout_multires(grid.bounds(), cfg.basis_counts, cfg.radius_factor);
    Model model;
    model.design.basis = basis_matrix(basis, grid, cfg.mc_points, 0);
    model.design.covariates = bau_covariates(covariate_terms(cfg.covariates, grid), grid, cfg.mc_points, 0);
    model.car = build_adjacency(grid, cfg.neighborhood);
    model.instruments = static_cast<int>(cfg.instruments.size());
    return {std::move(grid), std::move(basis), std::move(model)};
}

DfgpParams true_params(const ScenarioConfig& cfg, const Model& model) {
    const Index r = model.basis_size();
    Vector sigma2(static_cast<Index>(cfg.instruments.size()));
    for (std::size_t k = 0; k < cfg.instruments.size(); ++k) sigma2[static_cast<Index>(k)] = cfg.instruments[k].sigma2;
    const Vector beta = Eigen::Map<const Vector>(cfg.beta.data(), static_cast<Index>(cfg.beta.size()));
    return DfgpParams::uniform(cfg.horizon, beta, cfg.h_scale * Matrix::Identity(r, r),
                               cfg.u_var * Matrix::Identity(r, r), cfg.k0_var * Matrix::Identity(r, r),
                               {cfg.gamma, cfg.tau2}, sigma2);
}

Truth simulate_truth(const Model& model, const DfgpParams& params, int horizon, std::uint64_t seed) {
    if (params.horizon() < horizon) throw InvalidArgument("simulate_truth: parameter horizon too short");
    const Index r = model.basis_size();
    Rng rng(derive_seed(seed, 0));
    Truth out;
    out.eta.push_back(psd_factor(params.K0) * standard_normal(rng, r));
    for (int t = 1; t <= horizon; ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        out.eta.push_back(params.H[ti] * out.eta.back() + psd_factor(params.U[ti]) * standard_normal(rng, r));
        Vector y = model.design.covariates * params.beta[ti] + model.design.basis * out.eta.back();
        if (!model.lowrank_only) {
            out.xi.push_back(sample_car(model.car, params.car[ti], derive_seed(seed, 1000 + static_cast<std::uint64_t>(t)),
                                        model.gamma_range));
            y += out.xi.back();
        }
        out.y.push_back(std::move(y));
    }
    return out;
}

Truth simulate_truth(const ScenarioConfig& cfg) {
    const Scenario sc = build_scenario(cfg);
    return simulate_truth(sc.model, true_params(cfg, sc.model), cfg.horizon, cfg.seed);
}

ObservationSet observe(const Scenario& sc, const Truth& truth, const ScenarioConfig& cfg) {
    const BauGrid& grid = sc.grid;
    ObservationSet out;
    for (int t = 1; t <= static_cast<int>(truth.y.size()); ++t) {
        const Vector& y = truth.y[static_cast<std::size_t>(t - 1)];
        TimeSlice slice;
        slice.time = t;
        std::vector<Footprint> fps;
        std::vector<double> values, factors;
        for (std::size_t k = 0; k < cfg.instruments.size(); ++k) {
            const InstrumentSpec& in = cfg.instruments[k];
            Rng rng(derive_seed(cfg.seed, 5000 + 100 * static_cast<std::uint64_t>(t) + k));
            boost::random::normal_distribution<double> noise(0.0, std::sqrt(in.sigma2 * in.var_factor));
            for (int r0 = 0; r0 < grid.ny(); r0 += in.block) {
                for (int c0 = 0; c0 < grid.nx(); c0 += in.block) {
                    const int w = std::min(in.block, grid.nx() - c0);
                    const int h = std::min(in.block, grid.ny() - r0);
                    // Draws happen for every block so that gaps do not shift the noise stream.
                    const double drop = uniform01(rng);
                    const double e = noise(rng);
                    if (in.swath.missing(c0 + (w - 1) / 2, t, grid.nx()) || drop < in.drop_rate) continue;
                    Footprint fp;
                    fp.instrument = static_cast<int>(k) + 1;
                    fp.time = t;
                    double mean = 0.0;
                    for (int rr = r0; rr < r0 + h; ++rr)
                        for (int cc = c0; cc < c0 + w; ++cc) {
                            const std::size_t g = grid.index(rr, cc);
                            if (const auto s = grid.state_index(g)) {
                                fp.bau_indices.push_back(g);
                                mean += y[*s];
                            }
                        }
                    if (fp.bau_indices.empty()) continue;
                    mean /= static_cast<double>(fp.bau_indices.size());
                    slice.instrument.push_back(fp.instrument);
                    slice.footprint_id.push_back(static_cast<std::int64_t>(out.footprints.size() + fps.size()));
                    values.push_back(mean + e);
                    factors.push_back(in.var_factor);
                    fps.push_back(std::move(fp));
                }
            }
        }
        slice.z = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
        slice.var_factor = Eigen::Map<const Vector>(factors.data(), static_cast<Index>(factors.size()));
        slice.footprints = footprint_matrix(fps, grid);
        out.slices.push_back(std::move(slice));
        for (auto& fp : fps) out.footprints.push_back(std::move(fp));
    }
    return out;
}

}  // namespace dfgp
