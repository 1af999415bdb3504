// Python module dfgp._core: scenarios, estimation, filtering/smoothing and cross-validation.

#include <optional>
#include <string>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dfgp/config.hpp"
#include "dfgp/dynamics.hpp"
#include "dfgp/error.hpp"
#include "dfgp/estimate.hpp"
#include "dfgp/evaluate.hpp"
#include "dfgp/io.hpp"
#include "dfgp/likelihood.hpp"
#include "dfgp/synth.hpp"

namespace py = pybind11;
using namespace dfgp;

namespace {

/// Grid, model and data, plus the truth when the data were simulated.
struct Problem {
    BauGrid grid;
    Model model;
    std::vector<TimeSlice> data;
    std::optional<std::vector<Vector>> truth;
    std::optional<DfgpParams> true_params;

    int horizon() const { return static_cast<int>(data.size()); }
    Dataset dataset() const { return {grid, model, data}; }
};

Problem simulate(const ScenarioConfig& cfg) {
    const Scenario sc = build_scenario(cfg);
    const DfgpParams params = true_params(cfg, sc.model);
    const Truth truth = simulate_truth(sc.model, params, cfg.horizon, cfg.seed);
    ObservationSet obs = observe(sc, truth, cfg);
    return {sc.grid, sc.model, std::move(obs.slices), truth.y, params};
}

Problem from_config(const fs::path& path) {
    const RunConfig cfg = load_config(path);
    ModelSetup setup = build_model(cfg);
    auto data = io::read_observations(cfg.data.observations, cfg.data.footprints, setup.grid, setup.model.instruments,
                                      cfg.data.horizon);
    for (const auto& s : data) s.validate(setup.model.state_size(), setup.model.instruments);
    return {std::move(setup.grid), std::move(setup.model), std::move(data), std::nullopt, std::nullopt};
}

/// Filtered or smoothed BAU field at every time: (mean, std_error), each T x N.
std::pair<Matrix, Matrix> predict(const Problem& pb, const DfgpParams& params, const std::string& kind) {
    if (kind != "filter" && kind != "smooth") throw InvalidArgument("kind must be 'filter' or 'smooth'");
    params.validate(pb.model);
    const int big_t = pb.horizon();
    const auto baus = all_baus(pb.model);
    Matrix mean(big_t, static_cast<Index>(baus.size())), se(mean.rows(), mean.cols());
    auto store = [&](const PredictionField& f, int t) {
        mean.row(t - 1) = f.mean.transpose();
        se.row(t - 1) = f.std_error.transpose();
    };
    py::gil_scoped_release release;
    KalmanResult run = kalman_filter_streaming(pb.model, pb.data, params, [&](const SliceSystem& sys, const Moments& m) {
        if (kind == "filter")
            store(predict_field(field_pieces(sys, baus), m, params.beta[static_cast<std::size_t>(sys.time() - 1)]),
                  sys.time());
    });
    if (kind == "smooth") {
        smoother_pass(run, params);
        for (int t = 1; t <= big_t; ++t) {
            const auto ti = static_cast<std::size_t>(t - 1);
            const SliceSystem sys(pb.model, pb.data[ti], params, t, nullptr, {.logdet = false});
            store(predict_smooth(field_pieces(sys, baus), run, params.beta[ti]), t);
        }
    }
    return {mean, se};
}

py::list metric_rows(const std::vector<MetricRow>& rows) {
    py::list out;
    for (const auto& r : rows) {
        py::dict d;
        d["method"] = r.method;
        d["protocol"] = r.protocol;
        d["time"] = r.time;
        d["subset"] = r.subset;
        d["rmspe"] = r.rmspe;
        d["crps"] = r.crps;
        d["n_holdout"] = r.n_holdout;
        out.append(d);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Dynamic fused Gaussian process: multi-instrument spatio-temporal fusion";
    m.attr("__version__") = DFGP_VERSION;

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
    py::register_exception<InvalidParameter>(m, "InvalidParameter", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    py::class_<SwathSpec>(m, "SwathSpec")
        .def(py::init<>())
        .def(py::init([](int width, int shift, int period, int offset) { return SwathSpec{width, shift, period, offset}; }),
             py::arg("width"), py::arg("shift") = 0, py::arg("period") = 0, py::arg("offset") = 0)
        .def_readwrite("width", &SwathSpec::width)
        .def_readwrite("shift", &SwathSpec::shift)
        .def_readwrite("period", &SwathSpec::period)
        .def_readwrite("offset", &SwathSpec::offset);

    py::class_<InstrumentSpec>(m, "InstrumentSpec")
        .def(py::init<>())
        .def_readwrite("block", &InstrumentSpec::block)
        .def_readwrite("sigma2", &InstrumentSpec::sigma2)
        .def_readwrite("var_factor", &InstrumentSpec::var_factor)
        .def_readwrite("swath", &InstrumentSpec::swath)
        .def_readwrite("drop_rate", &InstrumentSpec::drop_rate);

    py::class_<ScenarioConfig>(m, "ScenarioConfig")
        .def(py::init<>())
        .def_readwrite("nx", &ScenarioConfig::nx)
        .def_readwrite("ny", &ScenarioConfig::ny)
        .def_readwrite("cell_size", &ScenarioConfig::cell_size)
        .def_readwrite("horizon", &ScenarioConfig::horizon)
        .def_readwrite("basis_counts", &ScenarioConfig::basis_counts)
        .def_readwrite("beta", &ScenarioConfig::beta)
        .def_readwrite("h_scale", &ScenarioConfig::h_scale)
        .def_readwrite("u_var", &ScenarioConfig::u_var)
        .def_readwrite("k0_var", &ScenarioConfig::k0_var)
        .def_readwrite("gamma", &ScenarioConfig::gamma)
        .def_readwrite("tau2", &ScenarioConfig::tau2)
        .def_readwrite("instruments", &ScenarioConfig::instruments)
        .def_readwrite("seed", &ScenarioConfig::seed)
        .def("validate", &ScenarioConfig::validate);

    py::class_<CarParams>(m, "CarParams")
        .def(py::init<>())
        .def_readwrite("gamma", &CarParams::gamma)
        .def_readwrite("tau2", &CarParams::tau2);

    py::class_<DfgpParams>(m, "Params")
        .def(py::init<>())
        .def_readwrite("beta", &DfgpParams::beta)
        .def_readwrite("H", &DfgpParams::H)
        .def_readwrite("U", &DfgpParams::U)
        .def_readwrite("K0", &DfgpParams::K0)
        .def_readwrite("car", &DfgpParams::car)
        .def_readwrite("sigma2", &DfgpParams::sigma2)
        .def_property_readonly("horizon", &DfgpParams::horizon)
        .def("flatten", &DfgpParams::flatten)
        .def("save", [](const DfgpParams& p, const fs::path& path) { io::write_params(path, p); })
        .def_static("load", &io::read_params);

    py::class_<EstimatorConfig>(m, "EstimatorConfig")
        .def(py::init<>())
        .def_property(
            "mode", [](const EstimatorConfig& c) { return to_string(c.mode); },
            [](EstimatorConfig& c, const std::string& s) { c.mode = parse_em_mode(s); })
        .def_readwrite("max_iter", &EstimatorConfig::max_iter)
        .def_readwrite("rel_tol", &EstimatorConfig::rel_tol)
        .def_readwrite("param_tol", &EstimatorConfig::param_tol)
        .def_readwrite("time_invariant_nugget", &EstimatorConfig::time_invariant_nugget)
        .def_readwrite("block_ends", &EstimatorConfig::block_ends)
        .def_readwrite("draws", &EstimatorConfig::draws)
        .def_readwrite("average_fraction", &EstimatorConfig::average_fraction)
        .def_readwrite("seed", &EstimatorConfig::seed);

    py::class_<Problem>(m, "Problem")
        .def_static("simulate", &simulate, py::arg("config"), "Simulate truth and observations from a scenario.")
        .def_static("from_config", &from_config, py::arg("path"), "Load the grid, model and data named by an INI file.")
        .def_property_readonly("horizon", &Problem::horizon)
        .def_property_readonly("n_bau", [](const Problem& p) { return p.model.state_size(); })
        .def_property_readonly("basis_size", [](const Problem& p) { return p.model.basis_size(); })
        .def_property_readonly("shape", [](const Problem& p) { return std::make_pair(p.grid.ny(), p.grid.nx()); })
        .def_property_readonly("bau_index",
                               [](const Problem& p) {
                                   std::vector<std::size_t> out(p.grid.active().begin(), p.grid.active().end());
                                   return out;
                               })
        .def_property_readonly("truth", [](const Problem& p) { return p.truth; })
        .def_property_readonly("true_params", [](const Problem& p) { return p.true_params; })
        .def("observations",
             [](const Problem& p, int t) {
                 if (t < 1 || t > p.horizon()) throw InvalidArgument("time out of range");
                 const TimeSlice& s = p.data[static_cast<std::size_t>(t - 1)];
                 return py::make_tuple(s.z, s.instrument, s.var_factor);
             },
             py::arg("t"), "(z, instrument, var_factor) of time step t (1-based).")
        .def("n_obs", [](const Problem& p) {
            std::vector<Index> out;
            for (const auto& s : p.data) out.push_back(s.size());
            return out;
        });

    m.def("initial_params", [](const Problem& p) { return initial_params(p.model, p.data); }, py::arg("problem"));

    m.def(
        "neg2_loglik",
        [](const Problem& p, const DfgpParams& params) {
            params.validate(p.model);
            return neg2_loglik(p.model, p.data, params);
        },
        py::arg("problem"), py::arg("params"), "-2 ln L of the data.");

    m.def(
        "fit",
        [](const Problem& p, const EstimatorConfig& cfg, std::optional<DfgpParams> init) {
            cfg.validate();
            EstimateResult r;
            {
                py::gil_scoped_release release;
                r = run_estimator(p.model, p.data, cfg, std::move(init));
            }
            std::vector<double> trace;
            for (const auto& tp : r.trace) trace.push_back(tp.neg2loglik);
            return py::make_tuple(std::move(r.params), trace, r.converged);
        },
        py::arg("problem"), py::arg("config") = EstimatorConfig{}, py::arg("init") = std::nullopt,
        "EM/SEM estimate: (params, -2 ln L trace, converged).");

    m.def("predict", &predict, py::arg("problem"), py::arg("params"), py::arg("kind") = "smooth",
          "BAU-level predictions (mean, std_error), each horizon x n_bau.");

    m.def(
        "cross_validate",
        [](const Problem& p, const std::string& protocol, const std::vector<std::string>& methods,
           std::tuple<double, double, double, double> block, int block_first, int block_last, double random_fraction,
           std::uint64_t seed, const EstimatorConfig& estimator, std::optional<DfgpParams> known) {
            HoldoutPlan plan;
            plan.block = {std::get<0>(block), std::get<1>(block), std::get<2>(block), std::get<3>(block)};
            plan.block_first = block_first;
            plan.block_last = block_last;
            plan.random_fraction = random_fraction;
            plan.seed = seed;
            std::vector<CvMethod> ms;
            for (const auto& s : methods) ms.push_back(parse_method(s));
            CvOptions opts;
            opts.estimator = estimator;
            opts.known_params = std::move(known);
            opts.krige.seed = seed;
            const Protocol proto = parse_protocol(protocol);
            CvResult res;
            {
                py::gil_scoped_release release;
                res = run_cv(p.dataset(), plan, ms, proto, opts);
            }
            return py::make_tuple(metric_rows(res.metrics), metric_rows(res.by_subset));
        },
        py::arg("problem"), py::arg("protocol") = "smoothing",
        py::arg("methods") = std::vector<std::string>{"dfgp", "lowrank"}, py::arg("block"),
        py::arg("block_first") = 1, py::arg("block_last") = 1 << 30, py::arg("random_fraction") = 0.1,
        py::arg("seed") = 1, py::arg("estimator") = EstimatorConfig{}, py::arg("known_params") = std::nullopt,
        "Hold-out validation: (metrics, metrics by subset), lists of dicts.");

    m.def("crps_gaussian", &crps_gaussian, py::arg("mu"), py::arg("sigma"), py::arg("y"));
    m.def("rmspe", &rmspe, py::arg("predictions"), py::arg("truth"));
}
