"""Parametric linear-Gaussian model with affine-in-parameter matrix families.

A model is a discrete-time system

    x[k+1] = A_k(alpha) x[k] + b_k(alpha) + w[k],   w[k] ~ N(0, Q_k(alpha))
    y[k]   = C_k(alpha) x[k] + v[k],                v[k] ~ N(0, R_k(alpha))
    x[0]   ~ N(x0_mean, x0_cov)

where every matrix family is affine in the parameter vector,

    M_k(alpha) = M_k[0] + sum_i alpha[i] * M_k[i+1],

so parameter derivatives are exact and available in closed form.  The
parameter set is a convex region described by box bounds, linear
inequalities and (optionally) general convex residual callables.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AffineFamily",
    "ConstraintSet",
    "ModelSpec",
    "ValidationReport",
    "evaluate_matrices",
    "matrix_derivative",
    "validate_parameters",
    "augment_with_disturbance",
    "eval_constraints",
    "noise_scale_indices",
    "apply_noise_floor",
    "NOISE_SCALE_FLOOR",
]

# Lower bound imposed on pure noise-scale parameters during optimization so
# the innovation covariance stays invertible even when the user box allows 0.
NOISE_SCALE_FLOOR = 1e-6

FAMILY_NAMES = ("A", "b", "C", "Q", "R")

ConvexResidual = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _as_matrix(m, rows: int, cols: int, what: str) -> np.ndarray:
    out = np.asarray(m, dtype=float)
    if out.shape != (rows, cols):
        raise ValueError(f"{what}: expected shape {(rows, cols)}, got {out.shape}")
    return out


@dataclass(frozen=True)
class AffineFamily:
    """One matrix family, affine in the parameters.

    ``basis`` has shape ``(n_times, n_alpha + 1, rows, cols)``; when the
    family is not time varying a single entry (``n_times == 1``) is stored
    and broadcast over k.  ``basis[k][0]`` is the constant term and
    ``basis[k][i + 1]`` the exact derivative with respect to parameter i.
    """

    rows: int
    cols: int
    basis: np.ndarray
    time_varying: bool

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 4 or basis.shape[2:] != (self.rows, self.cols):
            raise ValueError(
                f"basis must have shape (n_times, n_terms, {self.rows}, {self.cols}), "
                f"got {basis.shape}"
            )
        if self.time_varying and basis.shape[0] < 1:
            raise ValueError("time-varying family needs at least one time entry")
        if not self.time_varying and basis.shape[0] != 1:
            raise ValueError("non-time-varying family stores exactly one basis entry")
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)

    @property
    def n_alpha(self) -> int:
        return self.basis.shape[1] - 1

    @property
    def n_times(self) -> int:
        return self.basis.shape[0]

    def terms(self, k: int) -> np.ndarray:
        """Basis stack ``(n_alpha + 1, rows, cols)`` at time index k."""
        if self.time_varying:
            if not 0 <= k < self.n_times:
                raise IndexError(f"time index {k} out of range [0, {self.n_times})")
            return self.basis[k]
        if k < 0:
            raise IndexError(f"time index {k} out of range")
        return self.basis[0]

    def evaluate(self, alpha: np.ndarray, k: int) -> np.ndarray:
        terms = self.terms(k)
        if alpha.shape != (self.n_alpha,):
            raise ValueError(
                f"parameter vector has length {alpha.shape}, family expects {self.n_alpha}"
            )
        return terms[0] + np.tensordot(alpha, terms[1:], axes=1)

    def derivative(self, k: int, i: int) -> np.ndarray:
        """Exact d M_k / d alpha_i; independent of alpha (affine family)."""
        if not 0 <= i < self.n_alpha:
            raise IndexError(f"parameter index {i} out of range [0, {self.n_alpha})")
        return self.terms(k)[i + 1]

    @staticmethod
    def constant(value, n_alpha: int) -> "AffineFamily":
        """Family equal to ``value`` for all alpha and k."""
        value = np.atleast_2d(np.asarray(value, dtype=float))
        rows, cols = value.shape
        basis = np.zeros((1, n_alpha + 1, rows, cols))
        basis[0, 0] = value
        return AffineFamily(rows, cols, basis, time_varying=False)

    @staticmethod
    def from_terms(terms: Sequence) -> "AffineFamily":
        """Shared (time-invariant) family from ``[M0, M1, ..., Mn]``."""
        stack = np.stack([np.atleast_2d(np.asarray(t, dtype=float)) for t in terms])
        return AffineFamily(stack.shape[1], stack.shape[2], stack[None], time_varying=False)

    @staticmethod
    def from_time_varying_terms(per_step_terms: Sequence[Sequence]) -> "AffineFamily":
        """Time-varying family from a length-n_times sequence of term lists."""
        stack = np.stack(
            [
                np.stack([np.atleast_2d(np.asarray(t, dtype=float)) for t in terms])
                for terms in per_step_terms
            ]
        )
        return AffineFamily(stack.shape[2], stack.shape[3], stack, time_varying=True)


@dataclass(frozen=True)
class ConstraintSet:
    """Convex parameter region ``{alpha | h(alpha) <= 0, E alpha = e}``.

    Inequality residuals are ordered: finite lower bounds (``lo - alpha``),
    finite upper bounds (``alpha - up``), linear rows (``G alpha - g``),
    then any general convex residuals.  ``general`` entries are callables
    mapping alpha to ``(value, gradient)``; they are an in-process
    extension hook and do not round-trip through the file format.  The
    optional linear equality pin ``eq_G alpha = eq_g`` exists to remove
    scale freedom the parameterization leaves open (the prediction-error
    objective cannot see a common rescaling of the noise covariances).
    """

    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    linear_G: Optional[np.ndarray] = None
    linear_g: Optional[np.ndarray] = None
    general: tuple[ConvexResidual, ...] = ()
    eq_G: Optional[np.ndarray] = None
    eq_g: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("lower", "upper", "linear_G", "linear_g", "eq_G", "eq_g"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        for mat, vec in (("linear_G", "linear_g"), ("eq_G", "eq_g")):
            G, g = getattr(self, mat), getattr(self, vec)
            if (G is None) != (g is None):
                raise ValueError(f"{mat} and {vec} must be given together")
            if G is not None and G.shape[0] != g.shape[0]:
                raise ValueError(f"{mat} rows and {vec} length differ")

    @property
    def is_empty(self) -> bool:
        return (
            self.lower is None
            and self.upper is None
            and self.linear_G is None
            and not self.general
            and self.eq_G is None
        )


def eval_constraints(cs: ConstraintSet, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals h(alpha) and Jacobian; feasible iff all residuals <= 0."""
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.shape[0]
    res: list[float] = []
    jac: list[np.ndarray] = []
    if cs.lower is not None:
        if cs.lower.shape != (n,):
            raise ValueError("lower bound length mismatch")
        for i in range(n):
            if np.isfinite(cs.lower[i]):
                res.append(cs.lower[i] - alpha[i])
                row = np.zeros(n)
                row[i] = -1.0
                jac.append(row)
    if cs.upper is not None:
        if cs.upper.shape != (n,):
            raise ValueError("upper bound length mismatch")
        for i in range(n):
            if np.isfinite(cs.upper[i]):
                res.append(alpha[i] - cs.upper[i])
                row = np.zeros(n)
                row[i] = 1.0
                jac.append(row)
    if cs.linear_G is not None:
        if cs.linear_G.shape[1] != n:
            raise ValueError("linear constraint matrix column count mismatch")
        res.extend(cs.linear_G @ alpha - cs.linear_g)
        jac.extend(cs.linear_G)
    for fun in cs.general:
        value, grad = fun(alpha)
        res.append(float(value))
        jac.append(np.asarray(grad, dtype=float))
    if not res:
        return np.zeros(0), np.zeros((0, n))
    return np.array(res, dtype=float), np.vstack(jac)


def eval_equalities(cs: ConstraintSet, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Equality residuals ``eq_G alpha - eq_g`` and their (constant) Jacobian."""
    alpha = np.asarray(alpha, dtype=float)
    if cs.eq_G is None:
        return np.zeros(0), np.zeros((0, alpha.shape[0]))
    if cs.eq_G.shape[1] != alpha.shape[0]:
        raise ValueError("equality constraint matrix column count mismatch")
    return cs.eq_G @ alpha - cs.eq_g, np.array(cs.eq_G)


def is_feasible(cs: ConstraintSet, alpha: np.ndarray, tol: float = 0.0) -> bool:
    h, _ = eval_constraints(cs, alpha)
    r, _ = eval_equalities(cs, alpha)
    ineq_ok = h.size == 0 or np.max(h) <= tol
    eq_ok = r.size == 0 or np.max(np.abs(r)) <= tol
    return bool(ineq_ok and eq_ok)


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of one parametric model instance.

    Family time ranges: A, b, Q cover ``k = 0..n_steps - 1``; C, R cover
    ``k = 0..n_steps`` (the output side sees one more index).
    """

    n_x: int
    n_y: int
    n_alpha: int
    n_steps: int
    A: AffineFamily
    b: AffineFamily
    C: AffineFamily
    Q: AffineFamily
    R: AffineFamily
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1 or self.n_alpha < 0 or self.n_steps < 0:
            raise ValueError("state/output dimensions must be positive, horizon non-negative")
        shapes = {
            "A": (self.A, self.n_x, self.n_x, self.n_steps),
            "b": (self.b, self.n_x, 1, self.n_steps),
            "C": (self.C, self.n_y, self.n_x, self.n_steps + 1),
            "Q": (self.Q, self.n_x, self.n_x, self.n_steps),
            "R": (self.R, self.n_y, self.n_y, self.n_steps + 1),
        }
        for name, (fam, rows, cols, horizon) in shapes.items():
            if (fam.rows, fam.cols) != (rows, cols):
                raise ValueError(f"family {name}: expected {rows}x{cols}, got {fam.rows}x{fam.cols}")
            if fam.n_alpha != self.n_alpha:
                raise ValueError(f"family {name}: parameter count {fam.n_alpha} != {self.n_alpha}")
            if fam.time_varying and fam.n_times != horizon:
                raise ValueError(
                    f"family {name}: {fam.n_times} time entries, horizon needs {horizon}"
                )
        x0_mean = _as_matrix(np.asarray(self.x0_mean, float).reshape(-1, 1), self.n_x, 1, "x0_mean")
        x0_cov = _as_matrix(self.x0_cov, self.n_x, self.n_x, "x0_cov")
        if not np.allclose(x0_cov, x0_cov.T, atol=1e-12):
            raise ValueError("x0_cov must be symmetric")
        eigs = np.linalg.eigvalsh(x0_cov)
        if eigs.size and eigs[0] < -1e-10 * max(1.0, eigs[-1]):
            raise ValueError("x0_cov must be positive semidefinite")
        x0_mean = x0_mean.ravel()
        x0_mean.setflags(write=False)
        x0_cov = x0_cov.copy()
        x0_cov.setflags(write=False)
        object.__setattr__(self, "x0_mean", x0_mean)
        object.__setattr__(self, "x0_cov", x0_cov)

    def family(self, name: str) -> AffineFamily:
        if name not in FAMILY_NAMES:
            raise ValueError(f"unknown family {name!r}; expected one of {FAMILY_NAMES}")
        return getattr(self, name)

    def check_alpha(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.shape != (self.n_alpha,):
            raise ValueError(f"parameter vector length {alpha.size}, expected {self.n_alpha}")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("parameter vector contains non-finite entries")
        return alpha


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def evaluate_matrices(spec: ModelSpec, alpha, k: int) -> dict[str, np.ndarray]:
    """All five system matrices at time k; Q and R come back symmetrized.

    ``b`` is returned as a flat length-n_x vector.  A, b, Q are only
    defined for ``k < n_steps``; C and R also exist at ``k == n_steps``.
    """
    alpha = spec.check_alpha(alpha)
    if not 0 <= k < spec.n_steps:
        raise IndexError(f"time index {k} out of range [0, {spec.n_steps})")
    return {
        "A": spec.A.evaluate(alpha, k),
        "b": spec.b.evaluate(alpha, k).ravel(),
        "C": spec.C.evaluate(alpha, k),
        "Q": _symmetrize(spec.Q.evaluate(alpha, k)),
        "R": _symmetrize(spec.R.evaluate(alpha, k)),
    }


def matrix_derivative(spec: ModelSpec, k: int, family: str, i: int) -> np.ndarray:
    """Exact derivative of family ``family`` at time k w.r.t. parameter i."""
    return spec.family(family).derivative(k, i)


def chol_pd(m: np.ndarray, rel_tol: float = 1e-12) -> Optional[np.ndarray]:
    """Cholesky factor of m, or None when m fails the PD pivot test.

    The factorization must succeed and the smallest pivot must exceed
    ``rel_tol`` times the largest diagonal entry of m.
    """
    try:
        factor = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None
    pivots = np.diag(factor) ** 2
    if np.min(pivots) <= rel_tol * max(np.max(np.diag(m)), 0.0):
        return None
    return factor


@dataclass(frozen=True)
class ValidationReport:
    feasible: bool
    constraint_violation: float
    pd_ok: bool
    first_pd_failure: Optional[tuple[str, int]]

    @property
    def ok(self) -> bool:
        return self.feasible and self.pd_ok

    def message(self) -> str:
        parts = []
        if not self.feasible:
            parts.append(f"constraint violation {self.constraint_violation:.3g}")
        if not self.pd_ok:
            fam, k = self.first_pd_failure
            parts.append(f"{fam}_k not positive definite at k={k}")
        return "; ".join(parts) if parts else "ok"


def validate_parameters(spec: ModelSpec, alpha) -> ValidationReport:
    """Feasibility w.r.t. the constraint set plus PD checks on Q_k, R_k."""
    alpha = spec.check_alpha(alpha)
    h, _ = eval_constraints(spec.constraints, alpha)
    r, _ = eval_equalities(spec.constraints, alpha)
    violation = float(np.max(h)) if h.size else 0.0
    if r.size:
        violation = max(violation, float(np.max(np.abs(r))))
    feasible = violation <= 0.0
    first_failure = None
    for name, horizon in (("Q", spec.n_steps), ("R", spec.n_steps + 1)):
        fam = spec.family(name)
        n_checks = horizon if fam.time_varying else 1
        for k in range(n_checks):
            if chol_pd(_symmetrize(fam.evaluate(alpha, k))) is None:
                first_failure = (name, k)
                break
        if first_failure is not None:
            break
    return ValidationReport(feasible, violation, first_failure is None, first_failure)


def noise_scale_indices(spec: ModelSpec) -> list[int]:
    """Parameters that act only on the noise covariances Q and R."""
    indices = []
    for i in range(spec.n_alpha):
        in_noise = any(
            np.any(spec.family(name).basis[:, i + 1] != 0.0) for name in ("Q", "R")
        )
        in_dynamics = any(
            np.any(spec.family(name).basis[:, i + 1] != 0.0) for name in ("A", "b", "C")
        )
        if in_noise and not in_dynamics:
            indices.append(i)
    return indices


def apply_noise_floor(spec: ModelSpec, floor: float = NOISE_SCALE_FLOOR) -> ConstraintSet:
    """Constraint set with lower bounds on noise-scale parameters raised to ``floor``.

    Keeps the innovation covariance invertible along the optimization path
    when the user box allows a zero noise scale.
    """
    idx = noise_scale_indices(spec)
    cs = spec.constraints
    if not idx:
        return cs
    lower = (
        np.full(spec.n_alpha, -np.inf) if cs.lower is None else np.array(cs.lower, dtype=float)
    )
    lower[idx] = np.maximum(lower[idx], floor)
    return replace(cs, lower=lower)


def _blkdiag(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0] :, a.shape[1] :] = b
    return out


def augment_with_disturbance(
    spec: ModelSpec,
    process_cov_base: np.ndarray,
    disturbance_cov_base: np.ndarray,
    measurement_cov_base: np.ndarray,
) -> ModelSpec:
    """Augment a model with an integrated output disturbance.

    The state grows by n_y disturbance components following a random walk
    that feeds additively into the output.  Three new trailing parameters
    scale the block-diagonal process covariance
    ``diag(a1 * process_cov_base, a2 * disturbance_cov_base)`` and the
    measurement covariance ``a3 * measurement_cov_base``; the base Q and R
    families are replaced by this parameterization.  The input spec must
    not already carry a disturbance block.
    """
    n_x, n_y, n_a = spec.n_x, spec.n_y, spec.n_alpha
    q_x = _as_matrix(process_cov_base, n_x, n_x, "process_cov_base")
    q_d = _as_matrix(disturbance_cov_base, n_y, n_y, "disturbance_cov_base")
    r_b = _as_matrix(measurement_cov_base, n_y, n_y, "measurement_cov_base")
    n_x2 = n_x + n_y
    n_a2 = n_a + 3

    def pad_terms(fam: AffineFamily, build) -> AffineFamily:
        new_basis = np.zeros((fam.n_times, n_a2 + 1) + build(fam.basis[0, 0], 0).shape)
        for k in range(fam.n_times):
            for t in range(n_a + 1):
                new_basis[k, t] = build(fam.basis[k, t], t)
        return AffineFamily(
            new_basis.shape[2], new_basis.shape[3], new_basis, time_varying=fam.time_varying
        )

    def build_a(block, t):
        out = _blkdiag(block, np.eye(n_y) if t == 0 else np.zeros((n_y, n_y)))
        return out

    def build_b(block, t):
        return np.vstack([block, np.zeros((n_y, 1))])

    def build_c(block, t):
        return np.hstack([block, np.eye(n_y) if t == 0 else np.zeros((n_y, n_y))])

    new_q = np.zeros((1, n_a2 + 1, n_x2, n_x2))
    new_q[0, n_a + 1] = _blkdiag(q_x, np.zeros((n_y, n_y)))
    new_q[0, n_a + 2] = _blkdiag(np.zeros((n_x, n_x)), q_d)
    new_r = np.zeros((1, n_a2 + 1, n_y, n_y))
    new_r[0, n_a + 3] = r_b

    cs = spec.constraints
    lower = np.full(n_a2, -np.inf)
    upper = np.full(n_a2, np.inf)
    if cs.lower is not None:
        lower[:n_a] = cs.lower
    if cs.upper is not None:
        upper[:n_a] = cs.upper
    lower[n_a:] = NOISE_SCALE_FLOOR
    linear_G = None
    if cs.linear_G is not None:
        linear_G = np.hstack([cs.linear_G, np.zeros((cs.linear_G.shape[0], 3))])

    def wrap_general(fun: ConvexResidual) -> ConvexResidual:
        def wrapped(alpha):
            value, grad = fun(alpha[:n_a])
            return value, np.concatenate([np.asarray(grad, float), np.zeros(3)])

        return wrapped

    new_cs = ConstraintSet(
        lower=lower,
        upper=upper,
        linear_G=linear_G,
        linear_g=None if cs.linear_g is None else np.array(cs.linear_g),
        general=tuple(wrap_general(f) for f in cs.general),
    )
    return ModelSpec(
        n_x=n_x2,
        n_y=n_y,
        n_alpha=n_a2,
        n_steps=spec.n_steps,
        A=pad_terms(spec.A, build_a),
        b=pad_terms(spec.b, build_b),
        C=pad_terms(spec.C, build_c),
        Q=AffineFamily(n_x2, n_x2, new_q, time_varying=False),
        R=AffineFamily(n_y, n_y, new_r, time_varying=False),
        x0_mean=np.concatenate([spec.x0_mean, np.zeros(n_y)]),
        x0_cov=_blkdiag(spec.x0_cov, np.zeros((n_y, n_y))),
        constraints=new_cs,
    )
