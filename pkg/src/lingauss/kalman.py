"""Kalman filter recursion, exact forward sensitivities, and a dense reference density.

The filter propagates the one-step-ahead state prediction ``(x_pred, cov_pred)``
and produces, per time index, the innovation ``e = y - C x_pred`` together with
its covariance ``S = C P C' + R`` (factorized once, inverse and log-determinant
reused downstream).  Sensitivities with respect to the model parameters are
obtained by forward-mode differentiation of the same recursion, using the exact
affine-family derivatives.

``stacked_log_likelihood`` evaluates the joint Gaussian density of the whole
measurement stack directly (dense, O(N^2) storage).  It is the ground-truth
reference for the filter-based likelihood decomposition and is intended for
test-scale horizons only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .model import ModelSpec, chol_pd

__all__ = [
    "FilterError",
    "FilterState",
    "StepRecord",
    "FilterTrace",
    "kalman_step",
    "run_filter",
    "run_filter_with_sensitivities",
    "stacked_log_likelihood",
]


class FilterError(RuntimeError):
    """Raised when the innovation covariance is numerically singular.

    Signals an invalid parameter point (noise scales too small) rather than
    a programming error; carries the offending time index ``k``.
    """

    def __init__(self, message: str, k: int = -1):
        super().__init__(message)
        self.k = k


@dataclass
class FilterState:
    """State prediction mean and covariance before seeing the measurement."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class StepRecord:
    """Per-step filter quantities: innovation, its covariance, gain."""

    innov: np.ndarray
    innov_cov: np.ndarray
    innov_cov_inv: np.ndarray
    gain: np.ndarray
    logdet: float


@dataclass
class FilterTrace:
    """Filter pass over k = 0..n_steps, stored as stacked arrays.

    ``d_*`` arrays hold forward sensitivities (leading axis = parameter
    index) and are None unless the trace was produced with sensitivities.
    """

    n_steps: int
    x_pred: np.ndarray
    cov_pred: np.ndarray
    innov: np.ndarray
    innov_cov: np.ndarray
    innov_cov_inv: np.ndarray
    gain: np.ndarray
    logdet: np.ndarray
    d_x_pred: Optional[np.ndarray] = None
    d_cov_pred: Optional[np.ndarray] = None
    d_innov: Optional[np.ndarray] = None
    d_innov_cov: Optional[np.ndarray] = None

    @property
    def has_sensitivities(self) -> bool:
        return self.d_innov is not None

    def state(self, k: int) -> FilterState:
        return FilterState(self.x_pred[k].copy(), self.cov_pred[k].copy())

    def step(self, k: int) -> StepRecord:
        return StepRecord(
            self.innov[k].copy(),
            self.innov_cov[k].copy(),
            self.innov_cov_inv[k].copy(),
            self.gain[k].copy(),
            float(self.logdet[k]),
        )

    @property
    def states(self) -> list[FilterState]:
        return [self.state(k) for k in range(self.n_steps + 1)]

    @property
    def steps(self) -> list[StepRecord]:
        return [self.step(k) for k in range(self.n_steps + 1)]


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _innovation(x, P, C, R, y, k):
    S = _sym(C @ P @ C.T + R)
    L = chol_pd(S)
    if L is None:
        raise FilterError(f"innovation covariance singular at k={k}", k)
    S_inv = cho_solve((L, True), np.eye(S.shape[0]))
    e = y - C @ x
    K = P @ C.T @ S_inv
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return e, S, S_inv, K, logdet


def kalman_step(state: FilterState, matrices: dict, y) -> tuple[FilterState, StepRecord]:
    """One full predict-update cycle.

    Updates are the exact conditional-mean recursions: with filter gain
    ``K = P C' S^-1``,

        x+ = A (x + K e) + b,     P+ = A (P - K C P) A' + Q.

    Raises FilterError when S is numerically singular.
    """
    x = np.asarray(state.mean, float).ravel()
    P = np.asarray(state.cov, float)
    A, C = np.asarray(matrices["A"], float), np.asarray(matrices["C"], float)
    Q, R = _sym(np.asarray(matrices["Q"], float)), _sym(np.asarray(matrices["R"], float))
    b = np.asarray(matrices.get("b", np.zeros(x.shape[0])), float).ravel()
    y = np.atleast_1d(np.asarray(y, float))

    e, S, S_inv, K, logdet = _innovation(x, P, C, R, y, k=-1)
    x_next = A @ (x + K @ e) + b
    P_next = _sym(A @ (P - K @ (C @ P)) @ A.T + Q)
    return FilterState(x_next, P_next), StepRecord(e, S, S_inv, K, logdet)


def _measurement_array(spec: ModelSpec, measurements) -> np.ndarray:
    ys = getattr(measurements, "y", measurements)
    ys = np.asarray(ys, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    if ys.shape != (spec.n_steps + 1, spec.n_y):
        raise ValueError(
            f"measurement array has shape {ys.shape}, expected {(spec.n_steps + 1, spec.n_y)}"
        )
    if not np.all(np.isfinite(ys)):
        raise ValueError("measurements contain non-finite entries")
    return ys


def run_filter(spec: ModelSpec, alpha, measurements) -> FilterTrace:
    """Filter pass over the full series; records for k = 0..n_steps.

    The record at k is a function of measurements up to k-1 only (plus y_k
    for the innovation itself); the covariance sequence does not depend on
    the data at all.
    """
    alpha = spec.check_alpha(alpha)
    ys = _measurement_array(spec, measurements)
    if spec.n_x == 1 and spec.n_y == 1:
        return _run_filter_scalar(spec, alpha, ys)
    return _run_filter_generic(spec, alpha, ys, want_sens=False)


def run_filter_with_sensitivities(spec: ModelSpec, alpha, measurements) -> FilterTrace:
    """Filter pass with forward-mode derivatives of every step quantity.

    Differentiates the recursion using the exact affine family derivatives;
    the initial condition (x0_mean, x0_cov) is parameter independent, so
    its sensitivities start at zero.
    """
    alpha = spec.check_alpha(alpha)
    ys = _measurement_array(spec, measurements)
    return _run_filter_generic(spec, alpha, ys, want_sens=True)


def _family_eval(spec, alpha, name, horizon, symmetric=False):
    """Evaluate a family over its horizon; returns (values, is_constant)."""
    fam = spec.family(name)
    if not fam.time_varying:
        val = fam.evaluate(alpha, 0)
        if symmetric:
            val = _sym(val)
        return val, True
    vals = fam.basis[:, 0] + np.tensordot(alpha, fam.basis[:, 1:], axes=(0, 1))
    if symmetric:
        vals = 0.5 * (vals + np.transpose(vals, (0, 2, 1)))
    return vals, False


def _family_dterms(spec, name, symmetric=False):
    fam = spec.family(name)
    d = fam.basis[:, 1:]
    if symmetric:
        d = 0.5 * (d + np.transpose(d, (0, 1, 3, 2)))
    return d, not fam.time_varying


def _run_filter_generic(spec, alpha, ys, want_sens):
    N, n_x, n_y, n_a = spec.n_steps, spec.n_x, spec.n_y, spec.n_alpha

    A_all, A_const = _family_eval(spec, alpha, "A", N)
    b_all, b_const = _family_eval(spec, alpha, "b", N)
    C_all, C_const = _family_eval(spec, alpha, "C", N + 1)
    Q_all, Q_const = _family_eval(spec, alpha, "Q", N, symmetric=True)
    R_all, R_const = _family_eval(spec, alpha, "R", N + 1, symmetric=True)

    x_pred = np.empty((N + 1, n_x))
    cov_pred = np.empty((N + 1, n_x, n_x))
    innov = np.empty((N + 1, n_y))
    innov_cov = np.empty((N + 1, n_y, n_y))
    innov_cov_inv = np.empty((N + 1, n_y, n_y))
    gain = np.empty((N + 1, n_x, n_y))
    logdet = np.empty(N + 1)

    if want_sens:
        dA_all, dA_const = _family_dterms(spec, "A")
        db_all, db_const = _family_dterms(spec, "b")
        dC_all, dC_const = _family_dterms(spec, "C")
        dQ_all, dQ_const = _family_dterms(spec, "Q", symmetric=True)
        dR_all, dR_const = _family_dterms(spec, "R", symmetric=True)
        d_x_pred = np.zeros((N + 1, n_a, n_x))
        d_cov_pred = np.zeros((N + 1, n_a, n_x, n_x))
        d_innov = np.zeros((N + 1, n_a, n_y))
        d_innov_cov = np.zeros((N + 1, n_a, n_y, n_y))
        dx = np.zeros((n_a, n_x))
        dP = np.zeros((n_a, n_x, n_x))

    x = spec.x0_mean.copy()
    P = spec.x0_cov.copy()
    eye_y = np.eye(n_y)

    for k in range(N + 1):
        C = C_all if C_const else C_all[k]
        R = R_all if R_const else R_all[k]
        y = ys[k]

        PCt = P @ C.T
        S = _sym(C @ PCt + R)
        L = chol_pd(S)
        if L is None:
            raise FilterError(f"innovation covariance singular at k={k}", k)
        S_inv = cho_solve((L, True), eye_y)
        e = y - C @ x
        K = PCt @ S_inv

        x_pred[k], cov_pred[k] = x, P
        innov[k], innov_cov[k], innov_cov_inv[k] = e, S, S_inv
        gain[k] = K
        logdet[k] = 2.0 * np.sum(np.log(np.diag(L)))

        if want_sens:
            dC = dC_all[0] if dC_const else dC_all[k]
            dR = dR_all[0] if dR_const else dR_all[k]
            # dS = dC P C' + C dP C' + C P dC' + dR
            t1 = dC @ PCt
            dS = t1 + np.transpose(t1, (0, 2, 1)) + (C @ dP) @ C.T + dR
            de = -(dC @ x) - dx @ C.T
            # dK = dP C' Sinv + P dC' Sinv - K dS Sinv
            dK = (dP @ C.T + P @ np.transpose(dC, (0, 2, 1)) - K @ dS) @ S_inv
            d_x_pred[k], d_cov_pred[k] = dx, dP
            d_innov[k], d_innov_cov[k] = de, dS

        if k < N:
            A = A_all if A_const else A_all[k]
            b = (b_all if b_const else b_all[k]).ravel()
            Q = Q_all if Q_const else Q_all[k]

            xf = x + K @ e
            Pf = _sym(P - K @ PCt.T)

            if want_sens:
                dA = dA_all[0] if dA_const else dA_all[k]
                db = (db_all[0] if db_const else db_all[k]).reshape(n_a, n_x)
                dQ = dQ_all[0] if dQ_const else dQ_all[k]
                dxf = dx + dK @ e + de @ K.T
                dPf = dP - dK @ PCt.T - K @ (dC @ P) - (K @ C) @ dP
                dPf = 0.5 * (dPf + np.transpose(dPf, (0, 2, 1)))
                t2 = dA @ (Pf @ A.T)
                dP = t2 + np.transpose(t2, (0, 2, 1)) + (A @ dPf) @ A.T + dQ
                dx = dA @ xf + dxf @ A.T + db

            x = A @ xf + b
            P = _sym(A @ Pf @ A.T + Q)

    return FilterTrace(
        n_steps=N,
        x_pred=x_pred,
        cov_pred=cov_pred,
        innov=innov,
        innov_cov=innov_cov,
        innov_cov_inv=innov_cov_inv,
        gain=gain,
        logdet=logdet,
        d_x_pred=d_x_pred if want_sens else None,
        d_cov_pred=d_cov_pred if want_sens else None,
        d_innov=d_innov if want_sens else None,
        d_innov_cov=d_innov_cov if want_sens else None,
    )


def _run_filter_scalar(spec, alpha, ys):
    """Float fast path for 1-state 1-output models; same recursion as the
    generic path, kept branch-free inside the loop for Monte-Carlo scale."""
    N = spec.n_steps

    def flat(name, horizon, symmetric=False):
        vals, const = _family_eval(spec, alpha, name, horizon, symmetric)
        return (float(vals.ravel()[0]), True) if const else (vals.reshape(-1), False)

    A_v, A_c = flat("A", N)
    b_v, b_c = flat("b", N)
    C_v, C_c = flat("C", N + 1)
    Q_v, Q_c = flat("Q", N)
    R_v, R_c = flat("R", N + 1)
    yf = ys.ravel()

    x = float(spec.x0_mean[0])
    P = float(spec.x0_cov[0, 0])
    xs = np.empty(N + 1)
    Ps = np.empty(N + 1)
    es = np.empty(N + 1)
    Ss = np.empty(N + 1)
    Ks = np.empty(N + 1)

    for k in range(N + 1):
        C = C_v if C_c else C_v[k]
        R = R_v if R_c else R_v[k]
        S = C * P * C + R
        if S <= 0.0 or not np.isfinite(S):
            raise FilterError(f"innovation covariance singular at k={k}", k)
        e = yf[k] - C * x
        K = P * C / S
        xs[k], Ps[k], es[k], Ss[k], Ks[k] = x, P, e, S, K
        if k < N:
            A = A_v if A_c else A_v[k]
            b = b_v if b_c else b_v[k]
            Q = Q_v if Q_c else Q_v[k]
            x = A * (x + K * e) + b
            P = A * (P - K * C * P) * A + Q

    return FilterTrace(
        n_steps=N,
        x_pred=xs[:, None],
        cov_pred=Ps[:, None, None],
        innov=es[:, None],
        innov_cov=Ss[:, None, None],
        innov_cov_inv=(1.0 / Ss)[:, None, None],
        gain=Ks[:, None, None],
        logdet=np.log(Ss),
    )


def stacked_log_likelihood(spec: ModelSpec, alpha, measurements) -> float:
    """Log density of the full measurement stack, evaluated directly.

    Builds the exact mean and covariance of ``(y_0, ..., y_N)`` by
    propagating the initial belief through the linear dynamics and
    accumulating the process and measurement noise contributions, then
    evaluates the multivariate Gaussian log density.  Dense in the stacked
    dimension: intended as a test-scale reference, never used by the solver.

    Raises np.linalg.LinAlgError when the stacked covariance is not PD.
    """
    alpha = spec.check_alpha(alpha)
    ys = _measurement_array(spec, measurements)
    N, n_x, n_y = spec.n_steps, spec.n_x, spec.n_y

    A_all, A_const = _family_eval(spec, alpha, "A", N)
    b_all, b_const = _family_eval(spec, alpha, "b", N)
    C_all, C_const = _family_eval(spec, alpha, "C", N + 1)
    Q_all, Q_const = _family_eval(spec, alpha, "Q", N, symmetric=True)
    R_all, R_const = _family_eval(spec, alpha, "R", N + 1, symmetric=True)

    # x_k = Phi[k] x0 + sum_{j<k} Psi[k][j] w_j + drift[k]
    Phi = [np.eye(n_x)]
    Psi: list[list[np.ndarray]] = [[]]
    drift = [np.zeros(n_x)]
    for k in range(N):
        A = A_all if A_const else A_all[k]
        b = (b_all if b_const else b_all[k]).ravel()
        Phi.append(A @ Phi[k])
        Psi.append([A @ m for m in Psi[k]] + [np.eye(n_x)])
        drift.append(A @ drift[k] + b)

    mean = np.empty((N + 1) * n_y)
    cov = np.empty(((N + 1) * n_y, (N + 1) * n_y))
    C_of = lambda k: C_all if C_const else C_all[k]
    Q_of = lambda k: Q_all if Q_const else Q_all[k]
    R_of = lambda k: R_all if R_const else R_all[k]
    for k in range(N + 1):
        mean[k * n_y : (k + 1) * n_y] = C_of(k) @ (Phi[k] @ spec.x0_mean + drift[k])
    for j in range(N + 1):
        for l in range(j, N + 1):
            block = Phi[j] @ spec.x0_cov @ Phi[l].T
            for i in range(min(j, l)):
                block = block + Psi[j][i] @ Q_of(i) @ Psi[l][i].T
            block = C_of(j) @ block @ C_of(l).T
            if j == l:
                block = block + R_of(j)
            cov[j * n_y : (j + 1) * n_y, l * n_y : (l + 1) * n_y] = block
            cov[l * n_y : (l + 1) * n_y, j * n_y : (j + 1) * n_y] = block.T

    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    resid = solve_triangular(L, ys.ravel() - mean, lower=True)
    dim = (N + 1) * n_y
    return float(
        -0.5 * (resid @ resid) - np.sum(np.log(np.diag(L))) - 0.5 * dim * np.log(2.0 * np.pi)
    )
