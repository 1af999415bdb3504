#include <doctest.h>

#include <cmath>

#include "dfgp/error.hpp"
#include "dfgp/synth.hpp"
#include "test_support.hpp"

using namespace dfgp;
using namespace dfgp::testing;

namespace {

ScenarioConfig tiny() {
    ScenarioConfig c;
    c.nx = 12;
    c.ny = 9;
    c.horizon = 3;
    c.basis_counts = {4};
    return c;
}

Index count_instrument(const TimeSlice& s, int k) {
    Index n = 0;
    for (int i : s.instrument) n += i == k;
    return n;
}

}  // namespace

TEST_CASE("swath gaps advance by the shift each day") {
    const SwathSpec s{2, 3, 10, 1};
    // Column c is missing on day t when (c + 1 + 3 (t - 1)) mod 10 < 2.
    CHECK(s.missing(9, 1, 40));
    CHECK(s.missing(0, 1, 40));
    CHECK_FALSE(s.missing(1, 1, 40));
    CHECK(s.missing(6, 2, 40));
    CHECK(s.missing(7, 2, 40));
    CHECK_FALSE(s.missing(8, 2, 40));
    CHECK(s.missing(16, 2, 40));
    CHECK_FALSE(SwathSpec{}.missing(3, 5, 40));
    // Period 0 means the grid width.
    CHECK(SwathSpec{1, 0, 0, 0}.missing(12, 1, 12));
}

TEST_CASE("a complete instrument observes every BAU every day") {
    ScenarioConfig c = tiny();
    c.instruments = {{1, 0.05, 1.0, {}, 0.0}};
    const Scenario sc = build_scenario(c);
    const ObservationSet obs = observe(sc, simulate_truth(c), c);
    REQUIRE(obs.slices.size() == 3);
    for (const auto& s : obs.slices) CHECK(s.size() == 12 * 9);
    CHECK(obs.footprints.size() == 3u * 12 * 9);
}

TEST_CASE("block footprints average their BAUs with equal weights") {
    ScenarioConfig c = tiny();
    c.instruments = {{3, 0.1, 2.0, {}, 0.0}};
    const Scenario sc = build_scenario(c);
    const ObservationSet obs = observe(sc, simulate_truth(c), c);
    const TimeSlice& s = obs.slices[0];
    CHECK(s.size() == 4 * 3);
    for (Index i = 0; i < s.size(); ++i) {
        CHECK(s.var_factor[i] == 2.0);
        int nnz = 0;
        for (SparseRowMatrix::InnerIterator it(s.footprints, i); it; ++it) {
            CHECK(it.value() == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
            ++nnz;
        }
        CHECK(nnz == 9);
    }
    // Partial blocks at the edge: 10 x 7 grid with 3 x 3 blocks.
    c.nx = 10;
    c.ny = 7;
    const Scenario sc2 = build_scenario(c);
    const ObservationSet o2 = observe(sc2, simulate_truth(c), c);
    CHECK(o2.slices[0].size() == 4 * 3);
    const Vector row_sums = o2.slices[0].footprints * Vector::Ones(70);
    CHECK(max_abs(row_sums - Vector::Ones(12)) < 1e-14);
}

TEST_CASE("observation noise has the configured variance") {
    ScenarioConfig c = tiny();
    c.nx = 40;
    c.ny = 40;
    c.horizon = 4;
    c.instruments = {{1, 0.3, 1.0, {}, 0.0}};
    const Scenario sc = build_scenario(c);
    const Truth truth = simulate_truth(c);
    const ObservationSet obs = observe(sc, truth, c);
    double ss = 0.0;
    Index n = 0;
    for (std::size_t t = 0; t < obs.slices.size(); ++t) {
        const Vector e = obs.slices[t].z - obs.slices[t].footprints * truth.y[t];
        ss += e.squaredNorm();
        n += e.size();
    }
    // 6400 draws: the sample variance has relative sd about 0.018.
    CHECK(ss / static_cast<double>(n) == doctest::Approx(0.3).epsilon(0.08));
}

TEST_CASE("random drops follow the drop rate") {
    ScenarioConfig c = tiny();
    c.nx = 50;
    c.ny = 50;
    c.horizon = 2;
    c.instruments = {{1, 0.05, 1.0, {}, 0.25}};
    const Scenario sc = build_scenario(c);
    const ObservationSet obs = observe(sc, simulate_truth(c), c);
    const double kept = static_cast<double>(obs.slices[0].size() + obs.slices[1].size()) / 5000.0;
    // Binomial(5000, 0.75): sd of the fraction about 0.006.
    CHECK(std::abs(kept - 0.75) < 0.03);
}

TEST_CASE("swath gaps remove whole columns") {
    ScenarioConfig c = tiny();
    c.instruments = {{1, 0.05, 1.0, {3, 2, 12, 0}, 0.0}};
    const Scenario sc = build_scenario(c);
    const ObservationSet obs = observe(sc, simulate_truth(c), c);
    for (int t = 1; t <= 3; ++t) {
        const TimeSlice& s = obs.slices[static_cast<std::size_t>(t - 1)];
        CHECK(s.size() == 9 * 9);
        for (Index i = 0; i < s.size(); ++i) {
            SparseRowMatrix::InnerIterator it(s.footprints, i);
            const int col = static_cast<int>(it.index() % 12);
            CHECK_FALSE(c.instruments[0].swath.missing(col, t, 12));
        }
    }
}

TEST_CASE("default scenario has two instruments at two resolutions") {
    ScenarioConfig c;
    c.horizon = 2;
    const Scenario sc = build_scenario(c);
    CHECK(sc.model.basis_size() == 9);
    CHECK(sc.model.design.covariates.cols() == 3);
    const ObservationSet obs = observe(sc, simulate_truth(c), c);
    for (const auto& s : obs.slices) {
        CHECK(count_instrument(s, 1) > 0);
        CHECK(count_instrument(s, 1) < 1600);
        CHECK(count_instrument(s, 2) > 0);
        CHECK(count_instrument(s, 2) <= 100);
    }
}

TEST_CASE("simulation is deterministic in the seed") {
    ScenarioConfig c = tiny();
    const Truth a = simulate_truth(c), b = simulate_truth(c);
    for (std::size_t t = 0; t < a.y.size(); ++t) CHECK(max_abs(a.y[t] - b.y[t]) == 0.0);
    const Scenario sc = build_scenario(c);
    const ObservationSet oa = observe(sc, a, c), ob = observe(sc, b, c);
    for (std::size_t t = 0; t < oa.slices.size(); ++t) CHECK(max_abs(oa.slices[t].z - ob.slices[t].z) == 0.0);
    c.seed = 2;
    const Truth d = simulate_truth(c);
    CHECK(max_abs(a.y[0] - d.y[0]) > 0.0);
}

TEST_CASE("identity dynamics with zero innovation freeze the state") {
    ScenarioConfig c = tiny();
    c.h_scale = 1.0;
    c.u_var = 0.0;
    const Truth tr = simulate_truth(c);
    for (std::size_t t = 1; t < tr.eta.size(); ++t) CHECK(max_abs(tr.eta[t] - tr.eta[0]) == 0.0);
    // The field then differs between days only through the fine-scale term.
    const Vector d = (tr.y[1] - tr.xi[1]) - (tr.y[0] - tr.xi[0]);
    CHECK(max_abs(d) < 1e-12);
}

TEST_CASE("truth is assembled from its parts") {
    const ScenarioConfig c = tiny();
    const Scenario sc = build_scenario(c);
    const DfgpParams p = true_params(c, sc.model);
    const Truth tr = simulate_truth(c);
    for (std::size_t t = 0; t < tr.y.size(); ++t) {
        const Vector y = sc.model.design.covariates * p.beta[t] + sc.model.design.basis * tr.eta[t + 1] + tr.xi[t];
        CHECK(max_abs(y - tr.y[t]) < 1e-12);
    }
}

TEST_CASE("scenario validation") {
    ScenarioConfig c = tiny();
    c.beta = {1.0};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = tiny();
    c.instruments[0].drop_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = tiny();
    c.gamma = 1.0;
    CHECK_THROWS_AS(c.validate(), InvalidParameter);
}
