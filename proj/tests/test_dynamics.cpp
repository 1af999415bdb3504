#include <doctest.h>

#include <numeric>

#include "dfgp/dynamics.hpp"
#include "dfgp/error.hpp"
#include "dfgp/likelihood.hpp"
#include "test_support.hpp"

using namespace dfgp;
using namespace dfgp::testing;

namespace {

constexpr double kTol = 1e-6;

void check_against_oracle(const Instance& inst) {
    const DfgpParams& p = inst.params;
    const auto systems = build_systems(inst.model, inst.data, p);
    KalmanResult run = kalman_filter(systems, p);
    smoother_pass(run, p);
    const DenseOracle oracle(inst, p);
    const int u = oracle.horizon();
    const auto all = oracle.condition(u);
    const auto baus = all_baus(inst.model);
    for (int t = 1; t <= u; ++t) {
        const auto upto_prev = oracle.condition(t - 1);
        const auto upto = oracle.condition(t);
        const auto ti = static_cast<std::size_t>(t);
        const Moments fc = oracle.eta(upto_prev, t), fi = oracle.eta(upto, t), sm = oracle.eta(all, t);
        CHECK(rel_diff(run.forecast[ti - 1].mean, fc.mean) < kTol);
        CHECK(rel_diff(run.forecast[ti - 1].cov, fc.cov) < kTol);
        CHECK(rel_diff(run.filtered[ti].mean, fi.mean) < kTol);
        CHECK(rel_diff(run.filtered[ti].cov, fi.cov) < kTol);
        CHECK(rel_diff(run.smoothed[ti].mean, sm.mean) < kTol);
        CHECK(rel_diff(run.smoothed[ti].cov, sm.cov) < kTol);
        CHECK(rel_diff(run.lag1[ti - 1], oracle.eta_cross(all, t, t - 1)) < kTol);

        const FieldPieces pieces = field_pieces(systems[ti - 1], baus);
        const auto [fmean, fsd] = oracle.field(upto, t);
        const PredictionField pf = predict_filter(pieces, run, p.beta[ti - 1]);
        CHECK(rel_diff(pf.mean, fmean) < kTol);
        CHECK(rel_diff(pf.std_error, fsd) < kTol);
        const auto [smean, ssd] = oracle.field(all, t);
        const PredictionField ps = predict_smooth(pieces, run, p.beta[ti - 1]);
        CHECK(rel_diff(ps.mean, smean) < kTol);
        CHECK(rel_diff(ps.std_error, ssd) < kTol);
    }
    CHECK(rel_diff(run.smoothed[0].mean, oracle.eta(all, 0).mean) < kTol);
    CHECK(rel_diff(run.smoothed[0].cov, oracle.eta(all, 0).cov) < kTol);
    CHECK(rel_diff(neg2_loglik(run), oracle.neg2loglik()) < 1e-8);
}

}  // namespace

TEST_CASE("filter, smoother, lag-1 and predictors match dense conditioning") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        CAPTURE(seed);
        check_against_oracle(random_instance(seed));
    }
}

TEST_CASE("low-rank mode matches dense conditioning without the fine-scale term") {
    InstanceOptions opt;
    opt.lowrank = true;
    for (std::uint64_t seed = 100; seed <= 105; ++seed) {
        CAPTURE(seed);
        check_against_oracle(random_instance(seed, opt));
    }
}

TEST_CASE("filter at T equals smoother at T") {
    const Instance inst = random_instance(7);
    const auto systems = build_systems(inst.model, inst.data, inst.params);
    KalmanResult run = kalman_filter(systems, inst.params);
    smoother_pass(run, inst.params);
    const auto big_t = static_cast<std::size_t>(run.horizon());
    CHECK(max_abs(run.filtered[big_t].mean - run.smoothed[big_t].mean) == 0.0);
    CHECK(max_abs(run.filtered[big_t].cov - run.smoothed[big_t].cov) == 0.0);
    const auto baus = all_baus(inst.model);
    const FieldPieces pieces = field_pieces(systems.back(), baus);
    const PredictionField a = predict_filter(pieces, run, inst.params.beta.back());
    const PredictionField b = predict_smooth(pieces, run, inst.params.beta.back());
    CHECK(max_abs(a.mean - b.mean) == 0.0);
    CHECK(max_abs(a.std_error - b.std_error) == 0.0);
}

TEST_CASE("a time step without data passes the forecast through") {
    Instance inst = random_instance(11);
    inst.data[0] = inst.data[0].subset(std::vector<bool>(static_cast<std::size_t>(inst.data[0].size()), false));
    const auto systems = build_systems(inst.model, inst.data, inst.params);
    const KalmanResult run = kalman_filter(systems, inst.params);
    CHECK(max_abs(run.filtered[1].mean - run.forecast[0].mean) == 0.0);
    CHECK(max_abs(run.filtered[1].cov - run.forecast[0].cov) == 0.0);
    CHECK(run.innovations[0].quad == 0.0);
    CHECK(run.innovations[0].logdet == 0.0);
}

TEST_CASE("streaming filter equals the batch filter") {
    const Instance inst = random_instance(21);
    const auto systems = build_systems(inst.model, inst.data, inst.params);
    const KalmanResult a = kalman_filter(systems, inst.params);
    int visits = 0;
    const KalmanResult b = kalman_filter_streaming(inst.model, inst.data, inst.params,
                                                   [&](const SliceSystem&, const Moments&) { ++visits; });
    CHECK(visits == a.horizon());
    for (std::size_t t = 0; t < a.filtered.size(); ++t) {
        CHECK(max_abs(a.filtered[t].mean - b.filtered[t].mean) == 0.0);
        CHECK(max_abs(a.filtered[t].cov - b.filtered[t].cov) == 0.0);
    }
    CHECK(neg2_loglik(a) == neg2_loglik(b));
}

TEST_CASE("reordering records within a time step does not change the posterior") {
    const Instance inst = random_instance(31);
    Instance perm = inst;
    for (auto& s : perm.data) {
        const Index n = s.size();
        if (n < 2) continue;
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::reverse(order.begin(), order.end());
        Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> pm(n);
        for (Index i = 0; i < n; ++i) pm.indices()[i] = static_cast<int>(order[static_cast<std::size_t>(i)]);
        s.z = pm * s.z;
        s.var_factor = pm * s.var_factor;
        s.footprints = pm * s.footprints;
        std::vector<int> inst_perm(s.instrument.size());
        for (Index i = 0; i < n; ++i) inst_perm[static_cast<std::size_t>(pm.indices()[i])] = s.instrument[static_cast<std::size_t>(i)];
        s.instrument = inst_perm;
    }
    auto run_of = [](const Instance& x) {
        KalmanResult r = kalman_filter(build_systems(x.model, x.data, x.params), x.params);
        smoother_pass(r, x.params);
        return r;
    };
    const KalmanResult a = run_of(inst), b = run_of(perm);
    for (std::size_t t = 0; t < a.smoothed.size(); ++t) {
        CHECK(rel_diff(b.smoothed[t].mean, a.smoothed[t].mean) < 1e-10);
        CHECK(rel_diff(b.smoothed[t].cov, a.smoothed[t].cov) < 1e-10);
    }
    CHECK(rel_diff(neg2_loglik(b), neg2_loglik(a)) < 1e-12);
}

TEST_CASE("posterior variances never exceed prior variances") {
    const Instance inst = random_instance(41);
    const auto systems = build_systems(inst.model, inst.data, inst.params);
    KalmanResult run = kalman_filter(systems, inst.params);
    smoother_pass(run, inst.params);
    for (int t = 1; t <= run.horizon(); ++t) {
        const auto ti = static_cast<std::size_t>(t);
        const Vector fc = run.forecast[ti - 1].cov.diagonal();
        CHECK((run.filtered[ti].cov.diagonal().array() <= fc.array() * (1 + 1e-12)).all());
        CHECK((run.smoothed[ti].cov.diagonal().array() <= run.filtered[ti].cov.diagonal().array() * (1 + 1e-12)).all());
    }
}

TEST_CASE("full prediction covariance agrees with the standard errors") {
    const Instance inst = random_instance(51);
    const auto systems = build_systems(inst.model, inst.data, inst.params);
    const KalmanResult run = kalman_filter(systems, inst.params);
    const std::vector<Index> baus{0, 1, 2};
    const Matrix c = field_covariance(systems[0], baus, run.filtered[1]);
    const PredictionField f = predict_filter(field_pieces(systems[0], baus), run, inst.params.beta[0]);
    CHECK(rel_diff(Vector(c.diagonal().cwiseSqrt()), f.std_error) < 1e-10);
    CHECK(rel_diff(c, Matrix(c.transpose())) < 1e-12);
}

TEST_CASE("parameter validation rejects bad inputs") {
    const Instance inst = random_instance(61);
    DfgpParams p = inst.params;
    p.U[0](0, 0) = -1.0;
    CHECK_THROWS_AS(p.validate(inst.model), InvalidParameter);
    p = inst.params;
    p.sigma2[0][0] = 0.0;
    CHECK_THROWS_AS(p.validate(inst.model), InvalidParameter);
    p = inst.params;
    p.car[0].gamma = 1.0;
    CHECK_THROWS_AS(p.validate(inst.model), InvalidParameter);
    p = inst.params;
    p.beta[0] = Vector::Zero(7);
    CHECK_THROWS_AS(p.validate(inst.model), InvalidParameter);
}

TEST_CASE("truncated and extended parameters") {
    const Instance inst = random_instance(71, {.min_t = 3, .max_t = 4});
    const DfgpParams t = inst.params.truncated(2);
    CHECK(t.horizon() == 2);
    const DfgpParams e = t.extended(5);
    CHECK(e.horizon() == 5);
    CHECK(max_abs(e.H[4] - t.H[1]) == 0.0);
    CHECK(e.car[4] == t.car[1]);
}
