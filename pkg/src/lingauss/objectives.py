"""Estimation objectives and the trajectory-optimization baseline.

Two prediction-error objectives are evaluated from a filter trace:

* ``ML``  - sum_k e_k' S_k^-1 e_k + log|S_k|, the exact doubled negative
  log-likelihood of the measurements up to the additive constant
  ``(N+1) n_y log(2 pi)``, which is dropped.
* ``AML`` - sum_k ||e_k||^2, the plain prediction-error least squares
  approximation (identity innovation weights, no log-determinant).

``eval_to_inner`` evaluates the trajectory-optimization baseline: for fixed
noise weights it minimizes the weighted residual sum over the whole state
trajectory exactly, via a banded least-squares solve.  It exists to profile
that baseline, which provably fails to identify output-scaling parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solveh_banded

from .kalman import FilterTrace
from .model import ModelSpec, chol_pd

__all__ = [
    "ObjectiveKind",
    "ObjectiveEval",
    "TOEval",
    "TrajectoryFitError",
    "eval_objective",
    "eval_to_inner",
    "to_counterexample_bound",
]


class ObjectiveKind(enum.Enum):
    ML = "ml"
    AML = "aml"

    @classmethod
    def parse(cls, name) -> "ObjectiveKind":
        if isinstance(name, ObjectiveKind):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown objective kind {name!r}; expected 'ml' or 'aml'") from None


class TrajectoryFitError(RuntimeError):
    """Singular normal equations in the trajectory least-squares solve."""


@dataclass
class ObjectiveEval:
    value: float
    gradient: Optional[np.ndarray] = None
    per_step: Optional[np.ndarray] = None


@dataclass
class TOEval:
    value: float
    x_opt: np.ndarray


def eval_objective(trace: FilterTrace, kind, gradient: bool = False) -> ObjectiveEval:
    """Objective value (and gradient) from a completed filter trace.

    The gradient assembles the exact directional derivatives of the
    weighted quadratic term plus, for ML, the trace rule for the
    log-determinant.  Requires a trace with sensitivities when
    ``gradient=True``.
    """
    kind = ObjectiveKind.parse(kind)
    e = trace.innov
    if kind is ObjectiveKind.ML:
        u = np.einsum("kab,kb->ka", trace.innov_cov_inv, e)
        per_step = np.einsum("ka,ka->k", e, u) + trace.logdet
    else:
        u = e
        per_step = np.einsum("ka,ka->k", e, e)
    value = float(np.sum(per_step))

    grad = None
    if gradient:
        if not trace.has_sensitivities:
            raise ValueError("gradient requested but trace has no sensitivities")
        de, dS = trace.d_innov, trace.d_innov_cov
        if kind is ObjectiveKind.ML:
            grad = (
                2.0 * np.einsum("kia,ka->i", de, u)
                - np.einsum("kiab,ka,kb->i", dS, u, u)
                + np.einsum("kiab,kba->i", dS, trace.innov_cov_inv)
            )
        else:
            grad = 2.0 * np.einsum("kia,ka->i", de, e)
    return ObjectiveEval(value, grad, per_step)


def _inv_pd(m: np.ndarray, what: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    factor = chol_pd(0.5 * (m + m.T))
    if factor is None:
        raise ValueError(f"{what} must be positive definite")
    inv_factor = np.linalg.inv(factor)
    return inv_factor.T @ inv_factor


def eval_to_inner(
    spec: ModelSpec,
    alpha,
    measurements,
    Q_fixed,
    R_fixed,
    P0=None,
) -> TOEval:
    """Trajectory-optimization inner value: exact minimum over the state path.

    Minimizes, over the whole trajectory (x_0, ..., x_N),

        sum_k ||x_{k+1} - A_k x_k - b_k||^2_{Qf^-1}
        + sum_k ||C_k x_k - y_k||^2_{Rf^-1}  [+ ||x_0 - x0_mean||^2_{P0^-1}]

    with the noise weights held fixed.  ``P0`` selects the initial-state
    treatment: a PD matrix adds the quadratic prior, an all-zero matrix
    pins ``x_0 = x0_mean``, and None leaves ``x_0`` free with no penalty
    (the variant under which the known scaling bound for this baseline
    holds exactly).  Solved as a symmetric banded least-squares problem.
    """
    from .kalman import _measurement_array  # shared shape validation

    alpha = spec.check_alpha(alpha)
    ys = _measurement_array(spec, measurements)
    N, n_x = spec.n_steps, spec.n_x
    Qi = _inv_pd(Q_fixed, "Q_fixed")
    Ri = _inv_pd(R_fixed, "R_fixed")
    if Qi.shape != (n_x, n_x) or Ri.shape != (spec.n_y, spec.n_y):
        raise ValueError("fixed weight matrices have wrong dimensions")

    pinned = False
    P0i = None
    if P0 is not None:
        P0 = np.atleast_2d(np.asarray(P0, dtype=float))
        if P0.shape != (n_x, n_x):
            raise ValueError("P0 has wrong dimensions")
        if np.all(P0 == 0.0):
            pinned = True
        else:
            P0i = _inv_pd(P0, "P0")

    A = np.stack([spec.A.evaluate(alpha, k) for k in range(N)])
    b = np.stack([spec.b.evaluate(alpha, k).ravel() for k in range(N)])
    C = np.stack([spec.C.evaluate(alpha, k) for k in range(N + 1)])

    CtRiC = np.einsum("kai,ab,kbj->kij", C, Ri, C)
    CtRiy = np.einsum("kai,ab,kb->ki", C, Ri, ys)
    AtQiA = np.einsum("kai,ab,kbj->kij", A, Qi, A)
    AtQi = np.einsum("kai,ab->kib", A, Qi)
    AtQib = np.einsum("kib,kb->ki", AtQi, b)
    Qib = np.einsum("ab,kb->ka", Qi, b)

    first = 1 if pinned else 0
    n_blocks = N + 1 - first
    diag = np.zeros((n_blocks, n_x, n_x))
    upper = np.zeros((max(n_blocks - 1, 0), n_x, n_x))
    rhs = np.zeros((n_blocks, n_x))

    for t in range(first, N + 1):
        j = t - first
        diag[j] += CtRiC[t]
        rhs[j] += CtRiy[t]
        if t < N:
            diag[j] += AtQiA[t]
            rhs[j] -= AtQib[t]
        if t >= 1:
            diag[j] += Qi
            rhs[j] += Qib[t - 1]
    for t in range(first, N):
        upper[t - first] = -AtQi[t]
    if pinned:
        # dynamics residual from the fixed x_0 lands on the x_1 right side
        rhs[0] += Qi @ (A[0] @ spec.x0_mean)
    elif P0i is not None:
        diag[0] += P0i
        rhs[0] += P0i @ spec.x0_mean

    x_free = _solve_block_tridiag(diag, upper, rhs)
    if pinned:
        x_opt = np.vstack([spec.x0_mean[None, :], x_free])
    else:
        x_opt = x_free

    value = _to_value(x_opt, A, b, C, ys, Qi, Ri, P0i, spec.x0_mean)
    return TOEval(value, x_opt)


def _solve_block_tridiag(diag, upper, rhs):
    """Solve the symmetric block-tridiagonal normal equations (banded)."""
    n_blocks, n_x = rhs.shape
    dim = n_blocks * n_x
    u = 2 * n_x - 1
    ab = np.zeros((u + 1, dim))
    for ii in range(n_x):
        for jj in range(n_x):
            if ii <= jj:
                ab[u + ii - jj, jj::n_x] += diag[:, ii, jj]
            row = u + ii - jj - n_x
            if n_blocks > 1:
                ab[row, n_x + jj :: n_x] += upper[:, ii, jj]
    try:
        x = solveh_banded(ab, rhs.ravel(), lower=False)
    except np.linalg.LinAlgError as err:
        raise TrajectoryFitError(f"singular normal equations: {err}") from err
    return x.reshape(n_blocks, n_x)


def _to_value(x, A, b, C, ys, Qi, Ri, P0i, x0_mean) -> float:
    dyn = x[1:] - np.einsum("kij,kj->ki", A, x[:-1]) - b
    meas = np.einsum("kij,kj->ki", C, x) - ys
    value = float(np.einsum("ki,ij,kj->", dyn, Qi, dyn) + np.einsum("ki,ij,kj->", meas, Ri, meas))
    if P0i is not None:
        r0 = x[0] - x0_mean
        value += float(r0 @ P0i @ r0)
    return value


def _to_inner_dense(spec, alpha, measurements, Q_fixed, R_fixed, P0=None) -> TOEval:
    """Dense reference implementation of eval_to_inner (test use)."""
    from .kalman import _measurement_array

    alpha = spec.check_alpha(alpha)
    ys = _measurement_array(spec, measurements)
    N, n_x = spec.n_steps, spec.n_x
    Qi = _inv_pd(Q_fixed, "Q_fixed")
    Ri = _inv_pd(R_fixed, "R_fixed")
    pinned = P0 is not None and np.all(np.asarray(P0) == 0.0)
    P0i = None
    if P0 is not None and not pinned:
        P0i = _inv_pd(P0, "P0")

    A = np.stack([spec.A.evaluate(alpha, k) for k in range(N)])
    b = np.stack([spec.b.evaluate(alpha, k).ravel() for k in range(N)])
    C = np.stack([spec.C.evaluate(alpha, k) for k in range(N + 1)])

    first = 1 if pinned else 0
    n_blocks = N + 1 - first
    H = np.zeros((n_blocks * n_x, n_blocks * n_x))
    rhs = np.zeros(n_blocks * n_x)

    def sl(t):
        j = t - first
        return slice(j * n_x, (j + 1) * n_x)

    for t in range(first, N + 1):
        H[sl(t), sl(t)] += C[t].T @ Ri @ C[t]
        rhs[sl(t)] += C[t].T @ Ri @ ys[t]
    for t in range(N):
        r_prev = spec.x0_mean if (pinned and t == 0) else None
        if r_prev is None:
            H[sl(t), sl(t)] += A[t].T @ Qi @ A[t]
            H[sl(t + 1), sl(t + 1)] += Qi
            H[sl(t), sl(t + 1)] += -A[t].T @ Qi
            H[sl(t + 1), sl(t)] += -Qi @ A[t]
            rhs[sl(t)] += -A[t].T @ Qi @ b[t]
            rhs[sl(t + 1)] += Qi @ b[t]
        else:
            H[sl(1), sl(1)] += Qi
            rhs[sl(1)] += Qi @ (A[0] @ r_prev + b[0])
    if P0i is not None:
        H[sl(0), sl(0)] += P0i
        rhs[sl(0)] += P0i @ spec.x0_mean

    try:
        x = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError as err:
        raise TrajectoryFitError(f"singular normal equations: {err}") from err
    x = x.reshape(n_blocks, n_x)
    if pinned:
        x = np.vstack([spec.x0_mean[None, :], x])
    return TOEval(_to_value(x, A, b, C, ys, Qi, Ri, P0i, spec.x0_mean), x)


def to_counterexample_bound(measurements, eps: float) -> float:
    """Scaling bound for the trajectory baseline: eps^2 sum ||y_{k+1}-y_k||^2.

    At output scale 1/eps the trajectory objective admits the feasible path
    x_k = eps * y_k, whose cost is exactly this bound, so the inner minimum
    lies below it for every eps > 0.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    ys = np.asarray(getattr(measurements, "y", measurements), dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    diffs = np.diff(ys, axis=0)
    return float(eps**2 * np.sum(diffs**2))
