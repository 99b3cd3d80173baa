"""Seeded data generation from the probabilistic model.

Every random draw comes from a stream keyed by ``(seed, role, k)`` through
``numpy``'s SeedSequence spawning, so the process noise, measurement noise,
initial state, parameter draws and input channels are independent streams,
and extending the horizon extends a series instead of reshuffling it.
Reproducibility is promised within this implementation only (the standard
normal generation method is numpy's); seeds are recorded in the metadata.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ModelSpec

__all__ = [
    "MeasurementSeries",
    "InputProfile",
    "SimulationError",
    "sample_trajectory",
    "gen_piecewise_inputs",
    "sample_true_params",
    "save_measurement_csv",
    "load_measurement_csv",
    "DEFAULT_BLOCK_LEN",
]

DEFAULT_BLOCK_LEN = 50

_ROLE_X0 = 0
_ROLE_PROCESS = 1
_ROLE_MEASUREMENT = 2
_ROLE_PARAMS = 3
_ROLE_INPUT_BASE = 16


class SimulationError(RuntimeError):
    """A covariance could not be factorized for sampling."""


@dataclass
class MeasurementSeries:
    """Measured outputs y_0..y_N plus optional provenance metadata."""

    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if not np.all(np.isfinite(y)):
            raise ValueError("measurements contain non-finite entries")
        self.y = y

    @property
    def n_steps(self) -> int:
        return self.y.shape[0] - 1

    @property
    def n_y(self) -> int:
        return self.y.shape[1]


@dataclass
class InputProfile:
    """Named per-step input channels, length n_steps each."""

    values: dict[str, np.ndarray]
    block_len: int = DEFAULT_BLOCK_LEN
    seed: Optional[int] = None

    def __post_init__(self):
        arrs = {name: np.asarray(v, dtype=float).ravel() for name, v in self.values.items()}
        sizes = {a.size for a in arrs.values()}
        if len(sizes) > 1:
            lengths = {name: a.size for name, a in arrs.items()}
            raise ValueError(f"input channels have differing lengths: {lengths}")
        self.values = arrs

    @property
    def n_steps(self) -> int:
        return next(iter(self.values.values())).size

    def channel(self, name: str) -> np.ndarray:
        if name not in self.values:
            raise KeyError(f"missing input channel {name!r}")
        return self.values[name]


def _rng(seed: int, role: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(role, k)))


def _psd_factor(m: np.ndarray, what: str) -> np.ndarray:
    """Lower-triangular L with m = L L'; tolerates PSD zero pivots.

    Plain Cholesky when PD; otherwise a pivot-free PSD factorization that
    zeroes exhausted directions in place, so zero-variance components map
    to zero factor columns and the noise-stream alignment survives state
    augmentation.  Raises SimulationError for indefinite input.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.any(m):
        return np.zeros_like(m)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    sym = 0.5 * (m + m.T)
    n = sym.shape[0]
    scale = max(float(np.max(np.abs(np.diag(sym)))), 1e-300)
    factor = np.zeros_like(sym)
    for j in range(n):
        pivot = sym[j, j] - factor[j, :j] @ factor[j, :j]
        if pivot > 1e-12 * scale:
            factor[j, j] = np.sqrt(pivot)
            if j + 1 < n:
                factor[j + 1 :, j] = (
                    sym[j + 1 :, j] - factor[j + 1 :, :j] @ factor[j, :j]
                ) / factor[j, j]
        elif pivot < -1e-8 * scale:
            raise SimulationError(f"{what} is not positive semidefinite")
    if not np.allclose(factor @ factor.T, sym, atol=1e-8 * scale):
        raise SimulationError(f"{what} is not positive semidefinite")
    return factor


def sample_trajectory(
    spec: ModelSpec,
    alpha,
    seed: int,
    *,
    measurement_seed: Optional[int] = None,
) -> MeasurementSeries:
    """Simulate one measurement series from the model at parameters alpha.

    x_0 ~ N(x0_mean, x0_cov); process and measurement noise are drawn
    independently per step from N(0, Q_k(alpha)) and N(0, R_k(alpha)).
    ``measurement_seed`` overrides the seed of the measurement-noise stream
    only, leaving the state trajectory untouched.
    """
    alpha = spec.check_alpha(alpha)
    N, n_x, n_y = spec.n_steps, spec.n_x, spec.n_y
    meas_seed = seed if measurement_seed is None else measurement_seed

    def family_factors(name, horizon):
        fam = spec.family(name)
        if not fam.time_varying:
            one = _psd_factor(fam.evaluate(alpha, 0), name)
            return lambda k: one
        factors = [_psd_factor(fam.evaluate(alpha, k), name) for k in range(horizon)]
        return lambda k: factors[k]

    q_factor = family_factors("Q", N)
    r_factor = family_factors("R", N + 1)
    x0_factor = _psd_factor(spec.x0_cov, "x0_cov")

    states = np.empty((N + 1, n_x))
    ys = np.empty((N + 1, n_y))
    x = spec.x0_mean + x0_factor @ _rng(seed, _ROLE_X0).standard_normal(n_x)
    for k in range(N + 1):
        states[k] = x
        v = r_factor(k) @ _rng(meas_seed, _ROLE_MEASUREMENT, k).standard_normal(n_y)
        ys[k] = spec.C.evaluate(alpha, k) @ x + v
        if k < N:
            w = q_factor(k) @ _rng(seed, _ROLE_PROCESS, k).standard_normal(n_x)
            x = spec.A.evaluate(alpha, k) @ x + spec.b.evaluate(alpha, k).ravel() + w

    meta = {"seed": int(seed), "true_alpha": alpha.copy(), "true_states": states}
    if measurement_seed is not None:
        meta["measurement_seed"] = int(measurement_seed)
    return MeasurementSeries(ys, meta)


def gen_piecewise_inputs(
    seed: int,
    n_steps: int,
    block_len: int = DEFAULT_BLOCK_LEN,
    ranges: Optional[dict[str, tuple[float, float]]] = None,
) -> InputProfile:
    """Piecewise-constant input channels: one uniform draw per block.

    Default channels are ``theta0 ~ U(0, 200)`` and ``q ~ U(0, 20)``, held
    constant over consecutive blocks of ``block_len`` steps (the last block
    may be partial).  Channel streams are keyed by sorted channel name.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if ranges is None:
        ranges = {"theta0": (0.0, 200.0), "q": (0.0, 20.0)}
    n_blocks = -(-n_steps // block_len)
    values = {}
    for idx, name in enumerate(sorted(ranges)):
        lo, hi = ranges[name]
        rng = _rng(seed, _ROLE_INPUT_BASE + idx)
        blocks = rng.uniform(lo, hi, size=n_blocks)
        values[name] = np.repeat(blocks, block_len)[:n_steps]
    return InputProfile(values, block_len=block_len, seed=int(seed))


def sample_true_params(seed: int, n_alpha: int, ranges) -> np.ndarray:
    """Independent uniform parameter draw; ``ranges`` is (lo, hi) per
    component or a single pair broadcast to all components."""
    ranges = np.asarray(ranges, dtype=float)
    if ranges.ndim == 1:
        ranges = np.tile(ranges, (n_alpha, 1))
    if ranges.shape != (n_alpha, 2):
        raise ValueError(f"ranges must be (lo, hi) or one pair per parameter, got {ranges.shape}")
    if np.any(ranges[:, 1] < ranges[:, 0]):
        raise ValueError("range upper bounds must be >= lower bounds")
    rng = _rng(seed, _ROLE_PARAMS)
    return rng.uniform(ranges[:, 0], ranges[:, 1])


def _format_value(x: float) -> str:
    return format(float(x), ".17g")


def measurement_csv_text(series) -> str:
    ys = np.asarray(getattr(series, "y", series), dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"y_{j + 1}" for j in range(ys.shape[1])])
    for k, row in enumerate(ys):
        writer.writerow([k] + [_format_value(v) for v in row])
    return buf.getvalue()


def save_measurement_csv(path, series) -> None:
    """Delimited measurement file: header ``t,y_1,...``, full precision."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(measurement_csv_text(series))


def load_measurement_csv(path) -> MeasurementSeries:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = [row for row in csv.reader(handle) if row and not row[0].startswith("#")]
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: expected a measurement CSV with header 't,y_1,...'")
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=float)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError(f"{path}: no measurement rows")
    return MeasurementSeries(data)


def save_input_csv(path, profile: InputProfile) -> None:
    names = sorted(profile.values)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["t"] + names)
        for k in range(profile.n_steps):
            writer.writerow([k] + [_format_value(profile.values[n][k]) for n in names])


def load_input_csv(path) -> InputProfile:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = [row for row in csv.reader(handle) if row and not row[0].startswith("#")]
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: expected an input CSV with header 't,<channel>,...'")
    names = rows[0][1:]
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=float)
    return InputProfile({name: data[:, j] for j, name in enumerate(names)})
