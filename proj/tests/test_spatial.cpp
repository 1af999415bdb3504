#include <doctest.h>

#include <cmath>

#include "dfgp/basis.hpp"
#include "dfgp/car.hpp"
#include "dfgp/error.hpp"
#include "dfgp/grid.hpp"
#include "dfgp/sparse_cholesky.hpp"
#include "test_support.hpp"

using namespace dfgp;
using namespace dfgp::testing;

TEST_CASE("grid centroids and indexing") {
    const BauGrid g = build_grid(2, 2, 1.0, {0, 0});
    CHECK(g.size() == 4);
    CHECK(g.centroids() == std::vector<Coord>{{0.5, 0.5}, {1.5, 0.5}, {0.5, 1.5}, {1.5, 1.5}});
    const BauGrid one = build_grid(1, 1, 1.0, {0, 0});
    CHECK(one.size() == 1);
    CHECK(one.centroid(0) == Coord{0.5, 0.5});
    const BauGrid big = build_grid(3, 2, 9.0, {0, 0});
    CHECK(big.size() == 6);
    CHECK(big.centroid(0) == Coord{4.5, 4.5});
    CHECK(big.index(1, 2) == 5);
    CHECK(big.row(5) == 1);
    CHECK(big.col(5) == 2);
    CHECK(big.locate({26.9, 17.9}) == std::optional<std::size_t>(5));
    CHECK(!big.locate({-0.1, 1.0}));
}

TEST_CASE("masked grids address valid BAUs by state index") {
    std::vector<bool> mask{true, false, true, true};
    const BauGrid g = build_grid(2, 2, 1.0, {0, 0}, mask);
    CHECK(g.size() == 3);
    CHECK(g.active() == std::vector<std::size_t>{0, 2, 3});
    CHECK(!g.state_index(1));
    CHECK(g.state_index(2) == std::optional<Index>(1));
    CHECK_THROWS_AS(validate_footprint({{1}, 1, 1}, g), InvalidFootprint);
}

TEST_CASE("footprint averaging weights") {
    const BauGrid g = build_grid(2, 2, 1.0, {0, 0});
    const auto w1 = footprint_row({{3}, 1, 1}, g);
    REQUIRE(w1.size() == 1);
    CHECK(w1[0].state_index == 3);
    CHECK(w1[0].value == 1.0);
    const auto w3 = footprint_row({{1, 2, 3}, 1, 1}, g);
    REQUIRE(w3.size() == 3);
    for (const auto& w : w3) CHECK(w.value == doctest::Approx(1.0 / 3.0));
    const SparseRowMatrix b = footprint_matrix({{{0, 1}, 1, 1}}, g);
    Vector y(4);
    y << 1, 3, 0, 0;
    CHECK((b * y)[0] == 2.0);
    CHECK_THROWS_AS(validate_footprint({{}, 1, 1}, g), InvalidFootprint);
    CHECK_THROWS_AS(validate_footprint({{4}, 1, 1}, g), InvalidFootprint);
    CHECK_THROWS_AS(validate_footprint({{1, 1}, 1, 1}, g), InvalidFootprint);
}

TEST_CASE("Monte Carlo BAU averages") {
    const BauGrid g = build_grid(1, 1, 1.0, {0, 0});
    CHECK(mc_average([](Coord) { return 7.0; }, g, 0) == doctest::Approx(7.0).epsilon(1e-15));
    const int n = 30;
    const double v = mc_average([](Coord c) { return c.x; }, g, 0, n, 4);
    CHECK(std::abs(v - 0.5) <= 3.0 * (1.0 / std::sqrt(12.0)) / std::sqrt(n));
    CHECK(kDefaultMcPoints == 30);
}

TEST_CASE("covariate aggregation") {
    const BauGrid g = build_grid(4, 3, 1.0, {0, 0});
    const auto terms = covariate_terms({"1", "lat", "lat2"}, g);
    const Matrix x = bau_covariates(terms, g);
    CHECK((x.col(0).array() == 1.0).all());
    CHECK(x.col(1).cwiseAbs().maxCoeff() <= 1.0);
    const std::vector<Footprint> single{{{5}, 1, 1}, {{7}, 1, 1}};
    const Matrix xa = aggregate_covariates(terms, single, g);
    CHECK(max_abs(xa.row(0) - x.row(5)) < 1e-15);
    CHECK(max_abs(xa.row(1) - x.row(7)) < 1e-15);
    // Two BAUs with covariate values 0 and 2 average to 1.
    const BauGrid g2 = build_grid(2, 1, 1.0, {0, 0});
    const std::vector<PointFunction> step{[](Coord c) { return c.x < 1.0 ? 0.0 : 2.0; }};
    CHECK(aggregate_covariates(step, {{{0, 1}, 1, 1}}, g2)(0, 0) == doctest::Approx(1.0));
    CHECK_THROWS_AS(covariate_terms({"lon3"}, g), InvalidArgument);
}

TEST_CASE("bisquare function values") {
    const Coord c{1.0, 2.0};
    CHECK(bisquare_eval(c, c, 3.0) == 1.0);
    CHECK(bisquare_eval({4.0, 2.0}, c, 3.0) == 0.0);
    CHECK(bisquare_eval({2.5, 2.0}, c, 3.0) == doctest::Approx(0.5625));
    CHECK(bisquare_eval({10.0, 2.0}, c, 3.0) == 0.0);
}

TEST_CASE("multi-resolution basis layout") {
    const Box unit{0, 0, 1, 1};
    const BisquareBasis one = layout_multires(unit, {1});
    REQUIRE(one.size() == 1);
    CHECK(one.centers()[0] == Coord{0.5, 0.5});
    CHECK(layout_multires({0, 0, 500, 500}, {9, 30, 60}).size() == 99);
    const BisquareBasis four = layout_multires({0, 0, 500, 500}, {9, 30, 60, 82});
    CHECK(four.size() == 181);
    CHECK(four.resolution()[98] == 3);
    CHECK(four.resolution()[99] == 4);
    CHECK_THROWS_AS(layout_multires(unit, {}), InvalidArgument);
}

TEST_CASE("basis matrix rows") {
    const BauGrid g = build_grid(6, 6, 1.0, {0, 0});
    // Compact support: a function far away gives a zero column.
    const BisquareBasis far({{100.0, 100.0}}, {2.0});
    CHECK(max_abs(basis_matrix(far, g)) == 0.0);
    const BisquareBasis whole({{3.0, 3.0}}, {10.0});
    const Matrix s = basis_matrix(whole, g, 30, 2);
    const std::vector<Footprint> fps{{{7}, 1, 1}, {{0, 1, 6, 7}, 2, 1}};
    const Matrix sf = basis_matrix(whole, fps, g, 30, 2);
    CHECK(sf(0, 0) == doctest::Approx(s(7, 0)).epsilon(1e-14));
    // Footprint row = mean of the per-BAU Monte Carlo averages.
    double oracle = 0.0;
    for (std::size_t b : {0, 1, 6, 7})
        oracle += mc_average([&](Coord u) { return bisquare_eval(u, {3.0, 3.0}, 10.0); }, g, b, 30, 2) / 4.0;
    CHECK(sf(1, 0) == doctest::Approx(oracle).epsilon(1e-14));
}

TEST_CASE("rook and queen adjacency") {
    const BauGrid g = build_grid(3, 3, 1.0, {0, 0});
    const CarStructure car = build_adjacency(g);
    CHECK(car.degree[4] == 4.0);
    CHECK(car.degree[0] == 2.0);
    CHECK(max_abs(Matrix(car.adjacency) - Matrix(car.adjacency.transpose())) == 0.0);
    const CarStructure queen = build_adjacency(g, Neighborhood::queen);
    CHECK(queen.degree[4] == 8.0);
    CHECK(queen.degree[0] == 3.0);
    const CarStructure pair = build_adjacency(build_grid(2, 1, 1.0, {0, 0}));
    Matrix e(2, 2);
    e << 0, 1, 1, 0;
    CHECK(max_abs(Matrix(pair.adjacency) - e) == 0.0);
    CHECK(pair.degree == Vector::Ones(2));
    // A masked cell can isolate a neighbor.
    const BauGrid iso = build_grid(3, 1, 1.0, {0, 0}, {true, false, true});
    CHECK_THROWS_AS(build_adjacency(iso), StructureError);
}

TEST_CASE("CAR precision") {
    const CarStructure pair = build_adjacency(build_grid(2, 1, 1.0, {0, 0}));
    Matrix q = build_precision(pair, {0.3, 1.0});
    Matrix want(2, 2);
    want << 1, -0.3, -0.3, 1;
    CHECK(max_abs(q - want) < 1e-15);
    const CarStructure car = build_adjacency(build_grid(4, 3, 1.0, {0, 0}));
    const Matrix q0 = build_precision(car, {0.0, 2.0});
    CHECK(max_abs(q0 - Matrix(car.degree.asDiagonal()) / 2.0) < 1e-15);
    const Matrix q9 = build_precision(car, {0.95, 0.5});
    CHECK(max_abs(q9 - q9.transpose()) == 0.0);
    CHECK(Eigen::LLT<Matrix>(q9).info() == Eigen::Success);
    CHECK_THROWS_AS(build_precision(car, {1.0, 1.0}), InvalidParameter);
    CHECK_THROWS_AS(build_precision(car, {0.5, 0.0}), InvalidParameter);
}

TEST_CASE("sparse Cholesky solves and log-determinants") {
    SparseMatrix eye(5, 5);
    eye.setIdentity();
    const SparseCholesky ie(eye);
    CHECK(ie.logdet() == 0.0);
    Vector b = Vector::LinSpaced(5, 1, 5);
    CHECK(max_abs(ie.solve(b) - b) == 0.0);

    Rng rng(3);
    const Matrix m = random_spd(rng, 20, 0.5, 1.0);
    const SparseCholesky f(m.sparseView());
    const Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    CHECK(rel_diff(f.logdet(), es.eigenvalues().array().log().sum()) < 1e-8);
    const Matrix inv = m.inverse();
    CHECK(rel_diff(f.inverse_diagonal(), Vector(inv.diagonal())) < 1e-10);
    const Vector rhs = standard_normal(rng, 20);
    CHECK(rel_diff(f.solve(rhs), Vector(inv * rhs)) < 1e-10);

    const CarStructure pair = build_adjacency(build_grid(2, 1, 1.0, {0, 0}));
    CHECK(SparseCholesky(build_precision(pair, {0.5, 1.0})).logdet() == doctest::Approx(std::log(0.75)));

    Matrix bad = Matrix::Identity(3, 3);
    bad(2, 2) = -1.0;
    CHECK_THROWS_AS(SparseCholesky(bad.sparseView(), 4), NumericalError);
}

TEST_CASE("CAR log-determinant: eigenvalue and factorization routes agree") {
    const CarStructure car = build_adjacency(build_grid(7, 5, 1.0, {0, 0}));
    const CarLogDet dense(car);
    const CarLogDet sparse(car, 0);
    CHECK(dense.dense());
    CHECK(!sparse.dense());
    const Matrix w = Matrix(car.proximity());
    for (double g : {0.0, 0.3, 0.8, 0.99}) {
        const Matrix a = Matrix::Identity(35, 35) - g * w;
        const double want = std::log(a.determinant());
        CHECK(dense(g) == doctest::Approx(want).epsilon(1e-10));
        CHECK(sparse(g) == doctest::Approx(want).epsilon(1e-10));
    }
    const CarParams p{0.6, 0.4};
    const double direct = SparseCholesky(build_precision(car, p)).logdet();
    CHECK(dense.precision_logdet(p) == doctest::Approx(direct).epsilon(1e-12));
    CHECK(sparse.precision_logdet(p) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("CAR draws have covariance Q^{-1}") {
    const CarStructure car = build_adjacency(build_grid(4, 4, 1.0, {0, 0}));
    const CarParams p{0.8, 0.5};
    const Matrix sigma = Matrix(build_precision(car, p)).inverse();
    const int draws = 100000;
    Matrix acc = Matrix::Zero(16, 16);
    for (int k = 0; k < draws; ++k) {
        const Vector x = sample_car(car, p, static_cast<std::uint64_t>(k));
        acc.noalias() += x * x.transpose();
    }
    acc /= draws;
    int bad = 0;
    for (Index i = 0; i < 16; ++i)
        for (Index j = 0; j < 16; ++j) {
            // se of a sample second moment: sqrt((S_ii S_jj + S_ij^2) / n).
            const double se = std::sqrt((sigma(i, i) * sigma(j, j) + sigma(i, j) * sigma(i, j)) / draws);
            if (std::abs(acc(i, j) - sigma(i, j)) > 5.0 * se) ++bad;
        }
    CHECK(bad == 0);
    // Scaling: draws scale with tau.
    const Vector a = sample_car(car, {0.5, 1.0}, 9), b = sample_car(car, {0.5, 0.01}, 9);
    CHECK(max_abs(b - 0.1 * a) < 1e-12);
    CHECK(max_abs(sample_car(car, p, 3) - sample_car(car, p, 3)) == 0.0);
}
