#include "dfgp/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dfgp/error.hpp"
#include "dfgp/io.hpp"

namespace dfgp {

namespace pt = boost::property_tree;

namespace {

std::string to_string(Neighborhood h) { return h == Neighborhood::queen ? "queen" : "rook"; }

std::string fmt(double v) { return io::format_double(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
template <class T>
std::string fmt(T v)
    requires std::is_integral_v<T>
{
    return std::to_string(v);
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_same_v<T, std::string>) out += v[i];
        else if constexpr (std::is_same_v<T, CvMethod>) out += to_string(v[i]);
        else out += fmt(v[i]);
    }
    return out;
}

/// One INI section with typed accessors that remember which keys were consumed.
class Section {
  public:
    Section(std::string name, const pt::ptree* tree) : name_(std::move(name)), tree_(tree) {}

    template <class T>
    void get(const char* key, T& out) {
        const auto raw = raw_value(key);
        if (!raw) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                const std::string v = boost::algorithm::to_lower_copy(*raw);
                if (v == "true" || v == "1" || v == "yes") out = true;
                else if (v == "false" || v == "0" || v == "no") out = false;
                else throw boost::bad_lexical_cast();
            } else {
                out = boost::lexical_cast<T>(*raw);
            }
        } catch (const boost::bad_lexical_cast&) {
            throw InvalidArgument("config [" + name_ + "] " + key + ": cannot parse '" + *raw + "'");
        }
    }

    template <class T>
    void get_list(const char* key, std::vector<T>& out) {
        const auto raw = raw_value(key);
        if (!raw) return;
        out.clear();
        if (raw->empty()) return;
        std::vector<std::string> parts;
        boost::algorithm::split(parts, *raw, boost::is_any_of(","));
        for (auto& p : parts) {
            boost::algorithm::trim(p);
            try {
                if constexpr (std::is_same_v<T, std::string>) out.push_back(p);
                else if constexpr (std::is_same_v<T, CvMethod>) out.push_back(parse_method(p));
                else out.push_back(boost::lexical_cast<T>(p));
            } catch (const boost::bad_lexical_cast&) {
                throw InvalidArgument("config [" + name_ + "] " + key + ": cannot parse '" + p + "'");
            }
        }
    }

    void get_path(const char* key, fs::path& out, const fs::path& base) {
        const auto raw = raw_value(key);
        if (!raw) return;
        if (raw->empty()) {
            out.clear();
            return;
        }
        fs::path p(*raw);
        if (p.is_relative() && !base.empty()) p = base / p;
        out = p.lexically_normal();
    }

    std::optional<std::string> raw_value(const char* key) {
        used_.insert(key);
        if (!tree_) return std::nullopt;
        const auto v = tree_->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
        if (!v) return std::nullopt;
        return boost::algorithm::trim_copy(*v);
    }

    void check_unknown() const {
        if (!tree_) return;
        for (const auto& [k, v] : *tree_)
            if (!used_.count(k)) throw InvalidArgument("config [" + name_ + "]: unknown key '" + k + "'");
    }

  private:
    std::string name_;
    const pt::ptree* tree_;
    std::set<std::string> used_;
};

}  // namespace

RunConfig RunConfig::with_seed(std::uint64_t s) const {
    RunConfig c = *this;
    c.seed = s;
    c.scenario.seed = s;
    c.estimator.seed = s;
    c.cv.holdout.seed = s;
    c.cv.krige.seed = s;
    return c;
}

ScenarioConfig RunConfig::scenario_config() const {
    ScenarioConfig s = scenario;
    s.nx = grid.nx;
    s.ny = grid.ny;
    s.cell_size = grid.cell_size;
    s.origin = grid.origin;
    s.basis_counts = basis.counts;
    s.radius_factor = basis.radius_factor;
    s.mc_points = basis.mc_points;
    s.covariates = model.covariates;
    s.neighborhood = model.neighborhood;
    s.seed = seed;
    return s;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }

    std::map<std::string, const pt::ptree*> sections;
    for (const auto& [name, child] : tree) {
        if (child.empty() && !child.data().empty())
            throw InvalidArgument("config: key '" + name + "' outside any section");
        sections[name] = &child;
    }
    std::set<std::string> seen;
    auto section = [&](const std::string& name) {
        seen.insert(name);
        const auto it = sections.find(name);
        return Section(name, it == sections.end() ? nullptr : it->second);
    };

    RunConfig c;
    {
        auto s = section("run");
        s.get("seed", c.seed);
        s.get("threads", c.threads);
        s.get_path("output_dir", c.output_dir, base_dir);
        s.check_unknown();
    }
    {
        auto s = section("grid");
        s.get("nx", c.grid.nx);
        s.get("ny", c.grid.ny);
        s.get("cell_size", c.grid.cell_size);
        s.get("origin_x", c.grid.origin.x);
        s.get("origin_y", c.grid.origin.y);
        s.get_path("mask", c.grid.mask, base_dir);
        s.check_unknown();
    }
    {
        auto s = section("basis");
        s.get_list("counts", c.basis.counts);
        s.get("radius_factor", c.basis.radius_factor);
        s.get("mc_points", c.basis.mc_points);
        s.get_path("centers", c.basis.centers, base_dir);
        s.check_unknown();
    }
    {
        auto s = section("model");
        s.get_list("covariates", c.model.covariates);
        std::string hood = to_string(c.model.neighborhood);
        s.get("neighborhood", hood);
        c.model.neighborhood = parse_neighborhood(hood);
        s.get("gamma_lower", c.model.gamma_lower);
        s.get("instruments", c.model.instruments);
        s.get("lowrank_only", c.model.lowrank_only);
        s.check_unknown();
    }
    {
        auto s = section("data");
        s.get_path("observations", c.data.observations, base_dir);
        s.get_path("footprints", c.data.footprints, base_dir);
        s.get_path("truth", c.data.truth, base_dir);
        s.get_path("params", c.data.params, base_dir);
        s.get("horizon", c.data.horizon);
        s.check_unknown();
    }
    {
        auto s = section("estimator");
        auto& e = c.estimator;
        std::string mode = to_string(e.mode);
        s.get("mode", mode);
        e.mode = parse_em_mode(mode);
        s.get("max_iter", e.max_iter);
        s.get("rel_tol", e.rel_tol);
        s.get("rel_window", e.rel_window);
        s.get("param_tol", e.param_tol);
        s.get("time_invariant_nugget", e.time_invariant_nugget);
        s.get_list("block_ends", e.block_ends);
        s.get("draws", e.draws);
        s.get("average_fraction", e.average_fraction);
        s.get("exact_cap", e.exact_cap);
        s.get("gamma_grid", e.gamma_grid);
        s.check_unknown();
    }
    {
        auto s = section("protocol");
        std::string p = to_string(c.protocol.protocol);
        s.get("protocol", p);
        c.protocol.protocol = parse_protocol(p);
        s.get("estimate", c.protocol.estimate);
        s.get("warm_start", c.protocol.warm_start);
        s.check_unknown();
    }
    {
        auto s = section("holdout");
        auto& h = c.cv.holdout;
        s.get("block_x0", h.block.x0);
        s.get("block_y0", h.block.y0);
        s.get("block_x1", h.block.x1);
        s.get("block_y1", h.block.y1);
        s.get("block_first", h.block_first);
        s.get("block_last", h.block_last);
        s.get("random_fraction", h.random_fraction);
        s.get("instrument", h.instrument);
        s.get_list("methods", c.cv.methods);
        s.check_unknown();
    }
    {
        auto s = section("localkrige");
        s.get("k", c.cv.krige.k);
        s.get("max_evals", c.cv.krige.max_evals);
        s.get("tol", c.cv.krige.tol);
        s.get("tile_size", c.cv.krige.tile_size);
        s.check_unknown();
    }
    {
        auto s = section("scenario");
        auto& sc = c.scenario;
        s.get("horizon", sc.horizon);
        s.get_list("beta", sc.beta);
        s.get("h_scale", sc.h_scale);
        s.get("u_var", sc.u_var);
        s.get("k0_var", sc.k0_var);
        s.get("gamma", sc.gamma);
        s.get("tau2", sc.tau2);
        s.check_unknown();
    }
    // [instrument1], [instrument2], ... replace the default instrument list when present.
    std::vector<InstrumentSpec> instruments;
    for (int k = 1; sections.count("instrument" + std::to_string(k)); ++k) {
        auto s = section("instrument" + std::to_string(k));
        InstrumentSpec in;
        s.get("block", in.block);
        s.get("sigma2", in.sigma2);
        s.get("var_factor", in.var_factor);
        s.get("drop_rate", in.drop_rate);
        s.get("swath_width", in.swath.width);
        s.get("swath_shift", in.swath.shift);
        s.get("swath_period", in.swath.period);
        s.get("swath_offset", in.swath.offset);
        s.check_unknown();
        instruments.push_back(in);
    }
    if (!instruments.empty()) c.scenario.instruments = std::move(instruments);

    for (const auto& [name, child] : sections)
        if (!seen.count(name)) throw InvalidArgument("config: unknown section [" + name + "]");

    return c.with_seed(c.seed);
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), fs::absolute(path).parent_path());
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream o;
    auto kv = [&o](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
    o << "[run]\n";
    kv("seed", fmt(c.seed));
    kv("threads", fmt(c.threads));
    kv("output_dir", c.output_dir.string());
    o << "\n[grid]\n";
    kv("nx", fmt(c.grid.nx));
    kv("ny", fmt(c.grid.ny));
    kv("cell_size", fmt(c.grid.cell_size));
    kv("origin_x", fmt(c.grid.origin.x));
    kv("origin_y", fmt(c.grid.origin.y));
    kv("mask", c.grid.mask.string());
    o << "\n[basis]\n";
    kv("counts", join(c.basis.counts));
    kv("radius_factor", fmt(c.basis.radius_factor));
    kv("mc_points", fmt(c.basis.mc_points));
    kv("centers", c.basis.centers.string());
    o << "\n[model]\n";
    kv("covariates", join(c.model.covariates));
    kv("neighborhood", to_string(c.model.neighborhood));
    kv("gamma_lower", fmt(c.model.gamma_lower));
    kv("instruments", fmt(c.model.instruments));
    kv("lowrank_only", fmt(c.model.lowrank_only));
    o << "\n[data]\n";
    kv("observations", c.data.observations.string());
    kv("footprints", c.data.footprints.string());
    kv("truth", c.data.truth.string());
    kv("params", c.data.params.string());
    kv("horizon", fmt(c.data.horizon));
    const auto& e = c.estimator;
    o << "\n[estimator]\n";
    kv("mode", to_string(e.mode));
    kv("max_iter", fmt(e.max_iter));
    kv("rel_tol", fmt(e.rel_tol));
    kv("rel_window", fmt(e.rel_window));
    kv("param_tol", fmt(e.param_tol));
    kv("time_invariant_nugget", fmt(e.time_invariant_nugget));
    kv("block_ends", join(e.block_ends));
    kv("draws", fmt(e.draws));
    kv("average_fraction", fmt(e.average_fraction));
    kv("exact_cap", fmt(e.exact_cap));
    kv("gamma_grid", fmt(e.gamma_grid));
    o << "\n[protocol]\n";
    kv("protocol", to_string(c.protocol.protocol));
    kv("estimate", fmt(c.protocol.estimate));
    kv("warm_start", fmt(c.protocol.warm_start));
    const auto& h = c.cv.holdout;
    o << "\n[holdout]\n";
    kv("block_x0", fmt(h.block.x0));
    kv("block_y0", fmt(h.block.y0));
    kv("block_x1", fmt(h.block.x1));
    kv("block_y1", fmt(h.block.y1));
    kv("block_first", fmt(h.block_first));
    kv("block_last", fmt(h.block_last));
    kv("random_fraction", fmt(h.random_fraction));
    kv("instrument", fmt(h.instrument));
    kv("methods", join(c.cv.methods));
    o << "\n[localkrige]\n";
    kv("k", fmt(c.cv.krige.k));
    kv("max_evals", fmt(c.cv.krige.max_evals));
    kv("tol", fmt(c.cv.krige.tol));
    kv("tile_size", fmt(c.cv.krige.tile_size));
    const auto& sc = c.scenario;
    o << "\n[scenario]\n";
    kv("horizon", fmt(sc.horizon));
    kv("beta", join(sc.beta));
    kv("h_scale", fmt(sc.h_scale));
    kv("u_var", fmt(sc.u_var));
    kv("k0_var", fmt(sc.k0_var));
    kv("gamma", fmt(sc.gamma));
    kv("tau2", fmt(sc.tau2));
    for (std::size_t k = 0; k < sc.instruments.size(); ++k) {
        const auto& in = sc.instruments[k];
        o << "\n[instrument" << k + 1 << "]\n";
        kv("block", fmt(in.block));
        kv("sigma2", fmt(in.sigma2));
        kv("var_factor", fmt(in.var_factor));
        kv("drop_rate", fmt(in.drop_rate));
        kv("swath_width", fmt(in.swath.width));
        kv("swath_shift", fmt(in.swath.shift));
        kv("swath_period", fmt(in.swath.period));
        kv("swath_offset", fmt(in.swath.offset));
    }
    return o.str();
}

ModelSetup build_model(const RunConfig& cfg) {
    std::vector<bool> mask;
    if (!cfg.grid.mask.empty()) mask = io::read_mask(cfg.grid.mask, cfg.grid.nx, cfg.grid.ny);
    BauGrid grid = build_grid(cfg.grid.nx, cfg.grid.ny, cfg.grid.cell_size, cfg.grid.origin, std::move(mask));
    BisquareBasis basis = cfg.basis.centers.empty()
                              ? layout_multires(grid.bounds(), cfg.basis.counts, cfg.basis.radius_factor)
                              : io::read_basis(cfg.basis.centers);
    Model model;
    model.design.basis = basis_matrix(basis, grid, cfg.basis.mc_points, 0);
    model.design.covariates = bau_covariates(covariate_terms(cfg.model.covariates, grid), grid, cfg.basis.mc_points, 0);
    model.car = build_adjacency(grid, cfg.model.neighborhood);
    model.instruments = cfg.model.instruments;
    model.gamma_range.lower = cfg.model.gamma_lower;
    model.lowrank_only = cfg.model.lowrank_only;
    return {std::move(grid), std::move(basis), std::move(model)};
}

}  // namespace dfgp
