import numpy as np
import pytest

from lingauss.examples import build_random_walk, build_underdetermined
from lingauss.kalman import (
    FilterError,
    FilterState,
    _run_filter_generic,
    kalman_step,
    run_filter,
    run_filter_with_sensitivities,
    stacked_log_likelihood,
)
from lingauss.model import AffineFamily, ModelSpec
from lingauss.objectives import eval_objective

from conftest import random_affine_spec, rel_err


def scalar_matrices(A=1.0, b=0.0, C=1.0, Q=1.0, R=1.0):
    return {"A": [[A]], "b": [b], "C": [[C]], "Q": [[Q]], "R": [[R]]}


def test_kalman_step_hand_values():
    state, rec = kalman_step(FilterState(np.array([0.0]), np.array([[1.0]])), scalar_matrices(), [1.0])
    assert rec.gain[0, 0] == pytest.approx(0.5)
    assert rec.innov_cov[0, 0] == pytest.approx(2.0)
    assert rec.innov[0] == pytest.approx(1.0)
    assert state.mean[0] == pytest.approx(0.5)
    assert state.cov[0, 0] == pytest.approx(1.5)
    assert rec.logdet == pytest.approx(np.log(2.0))
    assert np.allclose(rec.innov_cov @ rec.innov_cov_inv, np.eye(1), atol=1e-12)


def test_kalman_step_riccati_fixed_point():
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    state = FilterState(np.array([0.0]), np.array([[1.0]]))
    for _ in range(80):
        state, _ = kalman_step(state, scalar_matrices(), [0.0])
    assert state.cov[0, 0] == pytest.approx(golden, abs=1e-12)


def test_kalman_step_zero_observation_matrix():
    state, rec = kalman_step(
        FilterState(np.array([2.0]), np.array([[3.0]])), scalar_matrices(A=0.5, b=1.0, C=0.0), [7.0]
    )
    assert rec.gain[0, 0] == pytest.approx(0.0)
    assert state.mean[0] == pytest.approx(0.5 * 2.0 + 1.0)
    assert state.cov[0, 0] == pytest.approx(0.5 * 3.0 * 0.5 + 1.0)


def test_kalman_step_singular_innovation():
    with pytest.raises(FilterError):
        kalman_step(FilterState(np.array([0.0]), np.array([[0.0]])), scalar_matrices(Q=0.0, R=0.0), [1.0])


def test_run_filter_zero_data_zero_mean():
    spec = build_random_walk(10)
    trace = run_filter(spec, [1.0], np.zeros(11))
    assert np.allclose(trace.innov, 0.0)
    assert trace.innov_cov[0, 0, 0] == pytest.approx(1.0)  # C P0 C' + R with P0 = 0


def test_run_filter_deterministic_start_first_innovation_cov():
    # P0 = 0 makes S_0 = R regardless of the output gain
    spec = build_random_walk(10)
    for gain in (0.2, 1.0, 3.0):
        trace = run_filter(spec, [gain], np.zeros(11))
        assert trace.innov_cov[0, 0, 0] == pytest.approx(1.0)


def test_run_filter_covariances_independent_of_data(rng):
    spec = random_affine_spec(11)
    alpha = np.full(spec.n_alpha, 0.1)
    t1 = run_filter(spec, alpha, rng.normal(size=(spec.n_steps + 1, spec.n_y)))
    t2 = run_filter(spec, alpha, rng.normal(size=(spec.n_steps + 1, spec.n_y)))
    assert np.array_equal(t1.cov_pred, t2.cov_pred)
    assert np.array_equal(t1.innov_cov, t2.innov_cov)


def test_run_filter_causality(rng):
    spec = random_affine_spec(13, n_steps=15)
    alpha = np.full(spec.n_alpha, 0.15)
    ys = rng.normal(size=(16, spec.n_y))
    full = run_filter(spec, alpha, ys)
    k = 9
    short_spec = ModelSpec(
        n_x=spec.n_x, n_y=spec.n_y, n_alpha=spec.n_alpha, n_steps=k,
        A=spec.A, b=spec.b, C=spec.C, Q=spec.Q, R=spec.R,
        x0_mean=spec.x0_mean, x0_cov=spec.x0_cov, constraints=spec.constraints,
    )
    short = run_filter(short_spec, alpha, ys[: k + 1])
    assert np.array_equal(short.innov, full.innov[: k + 1])
    assert np.array_equal(short.x_pred, full.x_pred[: k + 1])


def test_scalar_fast_path_matches_generic(rng):
    spec = build_random_walk(60)
    ys = rng.normal(size=61)
    fast = run_filter(spec, [0.8], ys)
    slow = _run_filter_generic(spec, np.array([0.8]), ys[:, None], want_sens=False)
    for name in ("x_pred", "cov_pred", "innov", "innov_cov", "gain", "logdet"):
        assert np.allclose(getattr(fast, name), getattr(slow, name), rtol=1e-12, atol=1e-13)


def test_sensitivities_zero_for_absent_parameter(rng):
    # second parameter enters no family
    spec = build_random_walk(8)
    padded = ModelSpec(
        n_x=1, n_y=1, n_alpha=2, n_steps=8,
        A=AffineFamily.from_terms([[[1.0]], [[0.0]], [[0.0]]]),
        b=AffineFamily.from_terms([[[0.0]], [[0.0]], [[0.0]]]),
        C=AffineFamily.from_terms([[[0.0]], [[1.0]], [[0.0]]]),
        Q=AffineFamily.from_terms([[[1.0]], [[0.0]], [[0.0]]]),
        R=AffineFamily.from_terms([[[1.0]], [[0.0]], [[0.0]]]),
        x0_mean=spec.x0_mean, x0_cov=spec.x0_cov,
    )
    trace = run_filter_with_sensitivities(padded, [1.0, 0.3], rng.normal(size=9))
    assert np.all(trace.d_innov[:, 1] == 0.0)
    assert np.all(trace.d_innov_cov[:, 1] == 0.0)
    assert np.all(trace.d_x_pred[:, 1] == 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_sensitivities_match_finite_differences(seed, rng):
    spec = random_affine_spec(seed, n_steps=10, time_varying=seed % 2 == 0)
    alpha = np.full(spec.n_alpha, 0.2)
    ys = rng.normal(size=(spec.n_steps + 1, spec.n_y))
    trace = run_filter_with_sensitivities(spec, alpha, ys)
    h = 1e-5
    for i in range(spec.n_alpha):
        up, dn = alpha.copy(), alpha.copy()
        up[i] += h
        dn[i] -= h
        tu, td = run_filter(spec, up, ys), run_filter(spec, dn, ys)
        assert rel_err((tu.innov - td.innov) / (2 * h), trace.d_innov[:, i]) <= 1e-6
        assert rel_err((tu.innov_cov - td.innov_cov) / (2 * h), trace.d_innov_cov[:, i]) <= 1e-6
        assert rel_err((tu.cov_pred - td.cov_pred) / (2 * h), trace.d_cov_pred[:, i]) <= 1e-6


def test_sensitivity_constant_across_alpha_for_affine_family():
    # dM/dalpha of an affine family does not depend on alpha
    spec = build_random_walk(5)
    assert np.array_equal(
        spec.C.derivative(0, 0), spec.C.derivative(0, 0)
    )
    for alpha in ([0.5], [1.0], [2.0]):
        assert spec.C.evaluate(np.asarray(alpha), 0)[0, 0] == pytest.approx(alpha[0])


def test_stacked_log_likelihood_single_measurement():
    # horizon 0: reduces to one Gaussian evaluation
    spec = ModelSpec(
        n_x=1, n_y=1, n_alpha=0, n_steps=0,
        A=AffineFamily.constant([[1.0]], 0),
        b=AffineFamily.constant([[0.0]], 0),
        C=AffineFamily.constant([[2.0]], 0),
        Q=AffineFamily.constant([[1.0]], 0),
        R=AffineFamily.constant([[0.5]], 0),
        x0_mean=[1.0], x0_cov=[[0.25]],
    )
    y0 = 2.5
    got = stacked_log_likelihood(spec, [], [[y0]])
    var = 2.0 * 0.25 * 2.0 + 0.5
    expected = -0.5 * ((y0 - 2.0) ** 2 / var + np.log(2 * np.pi * var))
    assert got == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_filter_matches_stacked_density(seed, rng):
    spec = random_affine_spec(seed + 100, time_varying=seed % 2 == 0)
    alpha = np.full(spec.n_alpha, 0.15)
    ys = rng.normal(size=(spec.n_steps + 1, spec.n_y))
    dim = (spec.n_steps + 1) * spec.n_y
    from_filter = eval_objective(run_filter(spec, alpha, ys), "ml").value
    from_stack = -2.0 * stacked_log_likelihood(spec, alpha, ys) - dim * np.log(2 * np.pi)
    assert abs(from_filter - from_stack) <= 1e-8 * abs(from_stack)


def test_stacked_density_scaling_invariance(rng):
    # output gain and process variance trade off exactly along (c*g, v/c^2)
    spec = build_underdetermined(25)
    ys = rng.normal(size=26)
    base = stacked_log_likelihood(spec, [1.0, 1.0], ys)
    for c in (2.0, 0.5, 3.0):
        same = stacked_log_likelihood(spec, [c, 1.0 / c**2], ys)
        assert same == pytest.approx(base, abs=1e-8 * max(1, abs(base)))


def test_run_filter_propagates_singularity_index():
    # measurement variance scaled by the parameter: alpha = 0 is singular
    spec = ModelSpec(
        n_x=1, n_y=1, n_alpha=1, n_steps=10,
        A=AffineFamily.constant([[1.0]], 1),
        b=AffineFamily.constant([[0.0]], 1),
        C=AffineFamily.constant([[1.0]], 1),
        Q=AffineFamily.constant([[1.0]], 1),
        R=AffineFamily.from_terms([[[0.0]], [[1.0]]]),
        x0_mean=[0.0], x0_cov=[[0.0]],
    )
    with pytest.raises(FilterError) as exc:
        run_filter(spec, [0.0], np.zeros(11))
    assert exc.value.k == 0
    trace = run_filter(spec, [1.0], np.zeros(11))
    assert trace.innov_cov[0, 0, 0] == pytest.approx(1.0)


def test_filter_trace_accessors(rng):
    spec = build_random_walk(6)
    trace = run_filter(spec, [1.2], rng.normal(size=7))
    assert len(trace.steps) == 7
    assert len(trace.states) == 7
    assert trace.step(3).innov == pytest.approx(trace.innov[3])
    assert not trace.has_sensitivities
    with pytest.raises(ValueError):
        eval_objective(trace, "ml", gradient=True)
