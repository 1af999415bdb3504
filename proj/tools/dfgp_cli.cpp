// dfgp command-line tool: simulate | fit | filter | smooth | cv, driven by one INI config.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "dfgp/config.hpp"
#include "dfgp/dynamics.hpp"
#include "dfgp/error.hpp"
#include "dfgp/estimate.hpp"
#include "dfgp/evaluate.hpp"
#include "dfgp/io.hpp"
#include "dfgp/likelihood.hpp"
#include "dfgp/parallel.hpp"
#include "dfgp/synth.hpp"

#ifndef DFGP_VERSION
#define DFGP_VERSION "0.0.0"
#endif

namespace {

using namespace dfgp;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

/// Output directory bookkeeping: every file written goes into the manifest.
class Outputs {
  public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    fs::path operator()(const std::string& name) {
        files_.push_back(name);
        return dir_ / name;
    }
    const fs::path& dir() const { return dir_; }

    void manifest(const std::string& command, const RunConfig& cfg) {
        const std::string text = serialize_config(cfg);
        {
            std::ofstream out((*this)("config_used.ini"), std::ios::binary);
            out << text;
        }
        std::sort(files_.begin(), files_.end());
        files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
        std::vector<std::pair<std::string, std::string>> kv{{"version", DFGP_VERSION},
                                                            {"command", command},
                                                            {"seed", std::to_string(cfg.seed)},
                                                            {"config_sha256", io::sha256_text(text)}};
        for (const auto& f : files_) kv.emplace_back("sha256." + f, io::sha256_file(dir_ / f));
        io::write_key_values(dir_ / "manifest.txt", kv);
    }

  private:
    fs::path dir_;
    std::vector<std::string> files_;
};

struct Loaded {
    ModelSetup setup;
    std::vector<TimeSlice> data;
};

Loaded load_data(const RunConfig& cfg) {
    if (cfg.data.observations.empty() || cfg.data.footprints.empty())
        throw IoError("config [data] needs observations and footprints paths");
    ModelSetup setup = build_model(cfg);
    auto data = io::read_observations(cfg.data.observations, cfg.data.footprints, setup.grid, setup.model.instruments,
                                      cfg.data.horizon);
    for (const auto& s : data) s.validate(setup.model.state_size(), setup.model.instruments);
    return {std::move(setup), std::move(data)};
}

std::string fmtd(double v) { return io::format_double(v); }

using Report = std::vector<std::pair<std::string, std::string>>;

void add_fit(Report& rep, const std::string& prefix, const EstimateResult& r, const std::string& trace_file) {
    rep.emplace_back(prefix + "iterations", std::to_string(r.iterations));
    rep.emplace_back(prefix + "converged", r.converged ? "true" : "false");
    rep.emplace_back(prefix + "neg2loglik", fmtd(r.neg2loglik));
    rep.emplace_back(prefix + "trace_file", trace_file);
}

/// One estimation on the full data (or the configured parameters).
DfgpParams single_fit(const RunConfig& cfg, const Loaded& ld, Outputs& out, Report& rep) {
    const int big_t = static_cast<int>(ld.data.size());
    if (!cfg.protocol.estimate) {
        if (cfg.data.params.empty()) throw IoError("estimation is off but [data] params is not set");
        DfgpParams p = io::read_params(cfg.data.params).extended(big_t).truncated(big_t);
        p.validate(ld.setup.model);
        rep.emplace_back("params_source", cfg.data.params.string());
        return p;
    }
    const EstimateResult r = run_estimator(ld.setup.model, ld.data, cfg.estimator);
    io::write_trace(out("trace.csv"), r.trace);
    io::write_params(out("params.csv"), r.params);
    add_fit(rep, "", r, "trace.csv");
    return r.params;
}

/// Filtering-protocol fits for horizons u = 2..T (index u-2).
std::vector<DfgpParams> horizon_fits(const RunConfig& cfg, const Loaded& ld, Outputs& out, Report& rep) {
    const int big_t = static_cast<int>(ld.data.size());
    std::vector<DfgpParams> fits;
    if (!cfg.protocol.estimate) {
        const DfgpParams p = single_fit(cfg, ld, out, rep);
        for (int u = 2; u <= big_t; ++u) fits.push_back(p.truncated(u));
        return fits;
    }
    const auto results = fit_filtering_sequence(ld.setup.model, ld.data, cfg.estimator, cfg.protocol.warm_start);
    for (int u = 2; u <= big_t; ++u) {
        const auto& r = results[static_cast<std::size_t>(u - 2)];
        const std::string tag = "u" + std::to_string(u);
        io::write_trace(out("trace_" + tag + ".csv"), r.trace);
        io::write_params(out("params_" + tag + ".csv"), r.params);
        add_fit(rep, tag + ".", r, "trace_" + tag + ".csv");
        fits.push_back(r.params);
    }
    return fits;
}

void base_report(Report& rep, const std::string& command, const RunConfig& cfg, const Loaded& ld) {
    rep.emplace_back("command", command);
    rep.emplace_back("seed", std::to_string(cfg.seed));
    rep.emplace_back("protocol", to_string(cfg.protocol.protocol));
    rep.emplace_back("mode", to_string(cfg.estimator.mode));
    rep.emplace_back("lowrank_only", ld.setup.model.lowrank_only ? "true" : "false");
    rep.emplace_back("bau_count", std::to_string(ld.setup.model.state_size()));
    rep.emplace_back("basis_size", std::to_string(ld.setup.model.basis_size()));
    rep.emplace_back("horizon", std::to_string(ld.data.size()));
}

int cmd_simulate(const RunConfig& cfg) {
    const ScenarioConfig sc = cfg.scenario_config();
    const Scenario scenario = build_scenario(sc);
    const DfgpParams truth_params = true_params(sc, scenario.model);
    const Truth truth = simulate_truth(scenario.model, truth_params, sc.horizon, sc.seed);
    const ObservationSet obs = observe(scenario, truth, sc);

    Outputs out(cfg.output_dir);
    io::write_observations(out("observations.csv"), out("footprints.csv"), obs, scenario.grid);
    io::write_truth(out("truth.csv"), truth, scenario.grid);
    io::write_latent(out("latent.csv"), truth, scenario.grid);
    io::write_params(out("params_true.csv"), truth_params);
    io::write_basis(out("basis.csv"), scenario.basis);

    // Ready-to-run config for the other commands, pointing at the files above.
    RunConfig next = cfg;
    next.model.instruments = static_cast<int>(sc.instruments.size());
    next.data.observations = fs::absolute(out.dir() / "observations.csv");
    next.data.footprints = fs::absolute(out.dir() / "footprints.csv");
    next.data.truth = fs::absolute(out.dir() / "truth.csv");
    next.data.params = fs::absolute(out.dir() / "params_true.csv");
    {
        std::ofstream f(out("run.ini"), std::ios::binary);
        f << serialize_config(next);
    }
    Report rep;
    rep.emplace_back("command", "simulate");
    rep.emplace_back("seed", std::to_string(cfg.seed));
    rep.emplace_back("horizon", std::to_string(sc.horizon));
    rep.emplace_back("bau_count", std::to_string(scenario.grid.size()));
    rep.emplace_back("basis_size", std::to_string(scenario.basis.size()));
    for (const auto& s : obs.slices) rep.emplace_back("observations.t" + std::to_string(s.time), std::to_string(s.size()));
    io::write_key_values(out("report.txt"), rep);
    out.manifest("simulate", cfg);
    return kExitOk;
}

int cmd_fit(const RunConfig& cfg) {
    const Loaded ld = load_data(cfg);
    Outputs out(cfg.output_dir);
    Report rep;
    base_report(rep, "fit", cfg, ld);
    if (cfg.protocol.protocol == Protocol::smoothing) single_fit(cfg, ld, out, rep);
    else horizon_fits(cfg, ld, out, rep);
    io::write_key_values(out("report.txt"), rep);
    out.manifest("fit", cfg);
    return kExitOk;
}

io::Checkpoint checkpoint_of(const std::vector<Moments>& states, int first, int last) {
    io::Checkpoint cp;
    for (int t = first; t <= last; ++t) {
        cp.time.push_back(t);
        cp.state.push_back(states[static_cast<std::size_t>(t)]);
    }
    return cp;
}

int cmd_filter(const RunConfig& cfg) {
    const Loaded ld = load_data(cfg);
    Outputs out(cfg.output_dir);
    Report rep;
    base_report(rep, "filter", cfg, ld);
    const int big_t = static_cast<int>(ld.data.size());
    const auto baus = all_baus(ld.setup.model);
    io::Checkpoint cp;
    auto emit = [&](const SliceSystem& sys, const Moments& filtered, const Vector& beta) {
        const PredictionField f = predict_field(field_pieces(sys, baus), filtered, beta);
        io::write_prediction(out("filter_t" + std::to_string(sys.time()) + ".csv"), f, ld.setup.grid);
        cp.time.push_back(sys.time());
        cp.state.push_back(filtered);
    };
    if (cfg.protocol.protocol == Protocol::smoothing || big_t < 2) {
        const DfgpParams params = single_fit(cfg, ld, out, rep);
        const KalmanResult run = kalman_filter_streaming(
            ld.setup.model, ld.data, params,
            [&](const SliceSystem& sys, const Moments& m) { emit(sys, m, params.beta[static_cast<std::size_t>(sys.time() - 1)]); });
        rep.emplace_back("neg2loglik_filter", fmtd(neg2_loglik(run)));
    } else {
        // Prediction at time t uses the fit on Z_{1:max(t,2)}.
        const auto fits = horizon_fits(cfg, ld, out, rep);
        for (int t = 1; t <= big_t; ++t) {
            const DfgpParams& params = fits[static_cast<std::size_t>(std::max(t, 2) - 2)];
            const std::vector<TimeSlice> head(ld.data.begin(), ld.data.begin() + t);
            kalman_filter_streaming(ld.setup.model, head, params, [&](const SliceSystem& sys, const Moments& m) {
                if (sys.time() == t) emit(sys, m, params.beta[static_cast<std::size_t>(t - 1)]);
            });
        }
    }
    io::write_checkpoint(out("states.bin"), cp);
    io::write_key_values(out("report.txt"), rep);
    out.manifest("filter", cfg);
    return kExitOk;
}

int cmd_smooth(const RunConfig& cfg) {
    const Loaded ld = load_data(cfg);
    Outputs out(cfg.output_dir);
    Report rep;
    base_report(rep, "smooth", cfg, ld);
    const DfgpParams params = single_fit(cfg, ld, out, rep);
    const int big_t = static_cast<int>(ld.data.size());
    // Pass 1: filter keeping only r x r moments; pass 2 rebuilds one system per time for the fields.
    KalmanResult run = kalman_filter_streaming(ld.setup.model, ld.data, params, [](const SliceSystem&, const Moments&) {});
    smoother_pass(run, params);
    rep.emplace_back("neg2loglik", fmtd(neg2_loglik(run)));
    const auto baus = all_baus(ld.setup.model);
    for (int t = 1; t <= big_t; ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        const SliceSystem sys(ld.setup.model, ld.data[ti], params, t, nullptr, {.logdet = false});
        const PredictionField f = predict_smooth(field_pieces(sys, baus), run, params.beta[ti]);
        io::write_prediction(out("smooth_t" + std::to_string(t) + ".csv"), f, ld.setup.grid);
    }
    io::write_checkpoint(out("states.bin"), checkpoint_of(run.smoothed, 0, big_t));
    io::write_key_values(out("report.txt"), rep);
    out.manifest("smooth", cfg);
    return kExitOk;
}

int cmd_cv(const RunConfig& cfg) {
    Loaded ld = load_data(cfg);
    Outputs out(cfg.output_dir);
    Report rep;
    base_report(rep, "cv", cfg, ld);
    const Dataset ds{ld.setup.grid, ld.setup.model, ld.data};
    CvOptions opts;
    opts.estimator = cfg.estimator;
    opts.krige = cfg.cv.krige;
    if (!cfg.protocol.estimate) {
        if (cfg.data.params.empty()) throw IoError("estimation is off but [data] params is not set");
        opts.known_params = io::read_params(cfg.data.params);
    }
    const CvResult res = run_cv(ds, cfg.cv.holdout, cfg.cv.methods, cfg.protocol.protocol, opts);
    io::write_metrics(out("metrics.csv"), res.metrics, false);
    io::write_metrics(out("metrics_by_subset.csv"), res.by_subset, true);
    io::write_holdout_mask(out("holdout_mask.csv"), res.mask, ds.data);
    io::write_cv_predictions(out("cv_predictions.csv"), res, ds.data);
    for (const auto& m : res.metrics)
        if (m.time == 0) {
            rep.emplace_back(m.method + ".rmspe", fmtd(m.rmspe));
            rep.emplace_back(m.method + ".crps", fmtd(m.crps));
        }
    io::write_key_values(out("report.txt"), rep);
    out.manifest("cv", cfg);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic fused Gaussian process: simulate, fit, filter, smooth and cross-validate"};
    app.set_version_flag("--version", DFGP_VERSION);
    app.require_subcommand(1, 1);

    fs::path config_path;
    std::optional<fs::path> out_dir;
    std::optional<std::uint64_t> seed;
    int threads = -1;
    bool lowrank = false;
    bool verbose = false;
    std::map<std::string, CLI::App*> subs;
    for (const char* name : {"simulate", "fit", "filter", "smooth", "cv"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "run configuration (INI)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory (overrides [run] output_dir)");
        sub->add_option("--seed", seed, "seed (overrides [run] seed)");
        sub->add_option("--threads", threads, "worker thread cap");
        sub->add_flag("--lowrank-only", lowrank, "drop the fine-scale CAR component (fixed-rank comparator)");
        sub->add_flag("-v,--verbose", verbose, "log progress");
        subs[name] = sub;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);
    spdlog::set_pattern("[%l] %v");

    std::string command;
    for (const auto& [name, sub] : subs)
        if (sub->parsed()) command = name;

    fs::path failure_dir = out_dir ? *out_dir : fs::path(".");
    try {
        RunConfig cfg = load_config(config_path);
        if (seed) cfg = cfg.with_seed(*seed);
        if (out_dir) cfg.output_dir = *out_dir;
        if (threads >= 0) cfg.threads = threads;
        if (lowrank) cfg.model.lowrank_only = true;
        if (cfg.threads > 0) set_thread_limit(cfg.threads);
        failure_dir = cfg.output_dir;

        if (command == "simulate") return cmd_simulate(cfg);
        if (command == "fit") return cmd_fit(cfg);
        if (command == "filter") return cmd_filter(cfg);
        if (command == "smooth") return cmd_smooth(cfg);
        return cmd_cv(cfg);
    } catch (const EstimationFailure& e) {
        std::cerr << "dfgp " << command << ": numerical failure: " << e.what() << '\n';
        try {
            fs::create_directories(failure_dir);
            const fs::path snap = failure_dir / "params_failure.csv";
            io::write_params(snap, e.snapshot());
            std::cerr << "parameter snapshot written to " << snap.string() << '\n';
        } catch (const std::exception&) {
        }
        return kExitNumerical;
    } catch (const NumericalError& e) {
        std::cerr << "dfgp " << command << ": numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "dfgp " << command << ": " << e.what() << '\n';
        return kExitUsage;
    }
}
