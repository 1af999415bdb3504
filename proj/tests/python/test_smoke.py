import math

import numpy as np
import pytest

import dfgp


@pytest.fixture(scope="module")
def problem():
    return dfgp.Problem.simulate(dfgp.small_scenario(seed=3))


def test_simulated_problem_shapes(problem):
    assert problem.horizon == 4
    assert problem.n_bau == 144
    assert problem.basis_size == 4
    assert len(problem.truth) == 4
    assert problem.truth[0].shape == (144,)
    z, inst, v = problem.observations(1)
    assert len(z) == len(inst) == len(v) == problem.n_obs()[0]
    assert set(inst) <= {1, 2}
    with pytest.raises(ValueError):
        problem.observations(5)


def test_true_params_beat_initial_values(problem):
    truth = problem.true_params
    assert truth.horizon == 4
    assert dfgp.neg2_loglik(problem, truth) < dfgp.neg2_loglik(problem, dfgp.initial_params(problem))


def test_filter_and_smooth_at_true_params(problem):
    p = problem.true_params
    fm, fs = dfgp.predict(problem, p, "filter")
    sm, ss = dfgp.predict(problem, p, "smooth")
    assert fm.shape == sm.shape == (4, 144)
    # Last time step: the smoother has no later data.
    np.testing.assert_allclose(fm[-1], sm[-1], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fs[-1], ss[-1], rtol=1e-10, atol=1e-12)
    # Smoothing never increases the prediction variance.
    assert np.all(ss[0] <= fs[0] + 1e-12)
    truth = np.vstack(problem.truth)
    assert dfgp.rmspe(sm.ravel(), truth.ravel()) < truth.std()
    with pytest.raises(ValueError):
        dfgp.predict(problem, p, "forecast")


def test_fit_decreases_neg2_loglik(problem):
    cfg = dfgp.EstimatorConfig()
    cfg.mode = "sem"
    cfg.max_iter = 15
    cfg.seed = 2
    params, trace, _ = dfgp.fit(problem, cfg)
    assert len(trace) >= 2
    assert all(math.isfinite(x) for x in trace)
    assert trace[-1] < trace[0]
    assert params.horizon == 4
    assert all(np.all(s > 0) for s in params.sigma2)


def test_params_round_trip(problem, tmp_path):
    p = problem.true_params
    p.save(tmp_path / "p.csv")
    back = dfgp.Params.load(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.flatten(), p.flatten())


def test_cross_validation_with_known_params(problem):
    metrics, by_subset = dfgp.cross_validate(
        problem, "smoothing", ["dfgp", "lowrank", "truth"], block=(3, 3, 8, 8),
        block_first=2, block_last=3, known_params=problem.true_params)
    agg = {m["method"]: m for m in metrics if m["time"] == 0}
    assert agg["truth"]["rmspe"] == pytest.approx(0.0, abs=1e-12)
    assert agg["dfgp"]["n_holdout"] > 0
    assert {m["subset"] for m in by_subset} <= {"block", "random"}


def test_scoring_rules():
    # CRPS of N(0, 1) at its mean is 2 phi(0) - 1/sqrt(pi).
    expected = 2 / math.sqrt(2 * math.pi) - 1 / math.sqrt(math.pi)
    assert dfgp.crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(expected, rel=1e-12)
    assert dfgp.rmspe(np.array([4.0, 6.0]), np.array([1.0, 2.0])) == math.sqrt(12.5)


def test_invalid_scenario_raises():
    cfg = dfgp.ScenarioConfig()
    cfg.gamma = 1.0
    with pytest.raises(ValueError):
        dfgp.Problem.simulate(cfg)
