import numpy as np
import pytest

import lingauss.bench as bench
from lingauss.bench import (
    BenchError,
    RateFit,
    expected_objective_argmin,
    fit_convergence_rate,
    fit_power_law,
    landscape_scan,
    resolve_workers,
    run_mse_experiment,
)
from lingauss.examples import build_random_walk
from lingauss.model import AffineFamily, ModelSpec
from lingauss.simulate import sample_trajectory
from lingauss.solver import EstimationResult


def test_fit_power_law_exact():
    ns = [50, 100, 200, 400]
    fit = fit_power_law(ns, [2.0 / n for n in ns])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.constant == pytest.approx(2.0, rel=1e-12)


def test_fit_power_law_flat():
    fit = fit_power_law([10, 100, 1000], [0.5, 0.5, 0.5])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert fit.constant == pytest.approx(0.5)


def test_fit_power_law_needs_three_points():
    with pytest.raises(ValueError):
        fit_power_law([10, 100], [1.0, 0.1])
    with pytest.raises(ValueError):
        fit_power_law([10, 100, 1000], [0.0, 0.0, 1.0])


def test_mock_estimator_gives_zero_mse(monkeypatch):
    def perfect(spec, series, cfg, alpha0):
        truth = np.asarray(series.meta["true_alpha"], dtype=float)
        return EstimationResult(truth, 0.0, [], "converged", {})

    monkeypatch.setattr(bench, "estimate", perfect)
    report = run_mse_experiment("random_walk", [30], 2, ("ml",), base_seed=1, workers=1)
    assert report.cell(30, "ml").mse == 0.0
    assert report.cell(30, "ml").n_failed == 0


def test_failed_trials_are_counted_not_dropped(monkeypatch):
    calls = {"n": 0}

    def flaky(spec, series, cfg, alpha0):
        calls["n"] += 1
        truth = np.asarray(series.meta["true_alpha"], dtype=float)
        if calls["n"] % 2 == 0:
            return EstimationResult(alpha0, np.inf, [], "qp_failure", {})
        return EstimationResult(truth, 0.0, [], "converged", {})

    monkeypatch.setattr(bench, "estimate", flaky)
    report = run_mse_experiment("random_walk", [30], 4, ("ml",), base_seed=1, workers=1)
    cell = report.cell(30, "ml")
    assert cell.n_failed == 2
    assert cell.mse == 0.0  # successful trials are exact
    assert cell.mse_all > 0.0  # worst-case variant keeps the failed iterates


def test_all_failures_raise(monkeypatch):
    def broken(spec, series, cfg, alpha0):
        return EstimationResult(alpha0, np.inf, [], "filter_failure", {})

    monkeypatch.setattr(bench, "estimate", broken)
    with pytest.raises(BenchError):
        run_mse_experiment("random_walk", [30], 2, ("ml",), base_seed=1, workers=1)


def test_experiment_determinism_across_worker_counts():
    kwargs = dict(ns=[40, 60], m=4, methods=("ml", "aml"), base_seed=9)
    serial = run_mse_experiment("random_walk", workers=1, **kwargs)
    parallel = run_mse_experiment("random_walk", workers=2, **kwargs)
    assert serial.to_dict()["cells"] == parallel.to_dict()["cells"]
    assert serial.to_dict()["trials"] == parallel.to_dict()["trials"]


def test_experiment_requires_trials():
    with pytest.raises(ValueError):
        run_mse_experiment("random_walk", [30], 1, ("ml",), base_seed=0)


def test_rate_fit_attached_for_three_horizons():
    report = run_mse_experiment(
        "random_walk", [30, 60, 120], 3, ("ml",), base_seed=3, workers=1
    )
    assert "ml" in report.rate_fits
    assert isinstance(report.rate_fits["ml"], RateFit)
    again = fit_convergence_rate(report)
    assert again["ml"].slope == pytest.approx(report.rate_fits["ml"].slope)


def test_report_csv_roundtrip(tmp_path):
    report = run_mse_experiment("random_walk", [30, 50], 2, ("ml",), base_seed=5, workers=1)
    path = tmp_path / "report.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("n,method,m,n_failed,mse")
    assert len(lines) == 3


def test_landscape_scan_normalization(rng):
    spec = build_random_walk(150)
    ys = sample_trajectory(spec, [1.0], seed=21)
    grid = np.arange(0.2, 3.0, 0.1)
    table = landscape_scan(spec, ys, 0, grid, np.array([1.0]), methods=("ml", "aml", "to"))
    for method in ("ml", "aml", "to"):
        norm = table.normalized[method]
        assert not table.degenerate[method]
        assert np.min(norm) == pytest.approx(0.0, abs=1e-15)
        assert np.max(norm) == pytest.approx(1.0, abs=1e-15)
    assert 0.4 <= table.argmin("ml") <= 1.6


def test_landscape_scan_degenerate_profile():
    # scanning a parameter that enters no family: flat profile, flagged
    spec = ModelSpec(
        n_x=1, n_y=1, n_alpha=2, n_steps=20,
        A=AffineFamily.constant([[1.0]], 2),
        b=AffineFamily.constant([[0.0]], 2),
        C=AffineFamily.from_terms([[[0.0]], [[1.0]], [[0.0]]]),
        Q=AffineFamily.constant([[1.0]], 2),
        R=AffineFamily.constant([[1.0]], 2),
        x0_mean=[0.0], x0_cov=[[0.0]],
    )
    ys = sample_trajectory(spec, [1.0, 0.0], seed=2)
    table = landscape_scan(spec, ys, 1, np.linspace(0, 1, 5), np.array([1.0, 0.0]), ("ml",))
    assert table.degenerate["ml"]
    assert table.normalized["ml"] is None
    assert np.all(np.isfinite(table.raw["ml"]))


def test_landscape_csv(tmp_path, rng):
    spec = build_random_walk(80)
    ys = sample_trajectory(spec, [1.0], seed=3)
    table = landscape_scan(spec, ys, 0, np.linspace(0.5, 1.5, 7), np.array([1.0]), ("ml", "to"))
    path = tmp_path / "scan.csv"
    table.write_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "alpha,ml_raw,ml_norm,to_raw,to_norm"


def test_landscape_rejects_unknown_method():
    spec = build_random_walk(10)
    with pytest.raises(ValueError):
        landscape_scan(spec, np.zeros(11), 0, [0.5], np.array([1.0]), ("nope",))


def test_landscape_fine_grid_long_series():
    # gain-1 data, long series: both estimation objectives dip near the
    # truth while the trajectory baseline keeps improving with the gain
    spec = build_random_walk(1000)
    ys = sample_trajectory(spec, [1.0], seed=2024)
    grid = np.round(np.arange(0.0, 5.0001, 0.01), 10)
    table = landscape_scan(spec, ys, 0, grid, np.array([1.0]), methods=("ml", "aml", "to"))
    assert abs(table.argmin("ml") - 1.0) <= 0.15
    assert abs(table.argmin("aml") - 1.0) <= 0.15
    to_raw = table.raw["to"]
    tail = to_raw[(grid >= 1.0) & np.isfinite(to_raw)]
    assert np.all(np.diff(tail) <= 1e-9 * np.abs(tail[:-1]))


def test_expected_objective_argmin_separates_far_point():
    table = expected_objective_argmin(
        "random_walk", [1.0], np.array([1.0, 5.0]), m=40, base_seed=13, n_steps=100
    )
    for method in ("ml", "aml"):
        values = table.mean_values[method]
        assert values[0] < values[1]
        assert table.argmin[method] == 1.0


def test_expected_objective_argmin_single_sample():
    table = expected_objective_argmin(
        "random_walk", [1.0], np.linspace(0.5, 1.5, 5), m=1, base_seed=3, n_steps=60
    )
    assert set(table.mean_values) == {"ml", "aml"}
    assert np.all(np.isfinite(table.mean_values["ml"]))


def test_resolve_workers_env(monkeypatch):
    monkeypatch.setenv("LINGAUSS_WORKERS", "3")
    assert resolve_workers() == 3
    assert resolve_workers(5) == 5
    monkeypatch.delenv("LINGAUSS_WORKERS")
    assert resolve_workers() >= 1
