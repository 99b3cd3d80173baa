"""Constrained generalized Gauss-Newton SQP for the estimation objectives.

Each iteration linearizes the filter recursion by single shooting (the
parameter step is the only QP variable), builds a convex quadratic model of
the objective, solves the inequality-constrained QP with a primal active-set
method, and globalizes with a backtracking line search on an l1 penalty
merit function.  For the plain prediction-error objective the QP reduces to
the classical Gauss-Newton system; for the likelihood objective the
quadratic model uses the exact positive-semidefinite second-order form of
the weighted term plus a linearized log-determinant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kalman import FilterError, FilterTrace, run_filter, run_filter_with_sensitivities
from .model import (
    NOISE_SCALE_FLOOR,
    ConstraintSet,
    ModelSpec,
    apply_noise_floor,
    chol_pd,
    eval_constraints,
    eval_equalities,
)
from .objectives import ObjectiveKind, eval_objective

__all__ = [
    "SolverConfig",
    "QPSubproblem",
    "QPSolution",
    "QPError",
    "SolverError",
    "EstimationResult",
    "IterateRecord",
    "LineSearchResult",
    "quad_approx_ml_term",
    "build_qp",
    "solve_dense_qp",
    "line_search_update",
    "estimate",
]


class QPError(RuntimeError):
    """Quadratic subproblem could not be solved (pivot limit, degeneracy)."""


class SolverError(RuntimeError):
    """Estimation loop failed outside the QP (bracketing, configuration)."""


@dataclass(frozen=True)
class SolverConfig:
    """Solver options.

    ``fixed_iterations=True`` disables the convergence test and always runs
    ``max_iter`` iterations (experiment-parity mode).  ``scalar_search``
    replaces the SQP loop by a golden-section search over the box for
    single-parameter problems.  The line-search, penalty and stopping
    values are implementation choices, surfaced here.
    """

    kind: ObjectiveKind = ObjectiveKind.ML
    max_iter: int = 30
    fixed_iterations: bool = False
    fd_check: bool = False
    ls_backtrack: float = 0.5
    ls_sufficient_decrease: float = 1e-4
    ls_max_backtracks: int = 30
    merit_penalty: float = 1e4
    stop_tol: float = 1e-8
    scalar_search: bool = False
    scalar_tol: float = 1e-5
    noise_floor: float = NOISE_SCALE_FLOOR

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.ls_backtrack < 1.0:
            raise ValueError("ls_backtrack must be in (0, 1)")
        object.__setattr__(self, "kind", ObjectiveKind.parse(self.kind))


@dataclass
class QPSubproblem:
    """min 0.5 d'Hd + g'd  s.t.  G d <= h  (and E d = e when pinned).

    H is PSD by construction of the Gauss-Newton model.  Equality rows come
    from an optional linear pin in the constraint set.
    """

    H: np.ndarray
    g: np.ndarray
    G: np.ndarray
    h: np.ndarray
    E: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None


@dataclass
class QPSolution:
    delta: np.ndarray
    multipliers: np.ndarray
    active: list[int]
    regularized: bool
    pivots: int
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class IterateRecord:
    alpha: np.ndarray
    objective: float
    step_norm: float
    merit: float
    step_scale: float
    kkt_residual: float


@dataclass
class EstimationResult:
    alpha_hat: np.ndarray
    objective: float
    iterates: list[IterateRecord]
    status: str
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LineSearchResult:
    alpha_new: np.ndarray
    step: float
    stalled: bool
    merit: float
    n_evals: int


@dataclass
class MLQuadTerm:
    """Quadratic model pieces of one weighted innovation term e'S^-1 e.

    ``fprime`` and ``fsecond`` are the exact first and second directional
    derivative forms in a direction (de, dS); the second form is PSD for
    every direction, which is what makes the Gauss-Newton Hessian convex.
    """

    value: float
    weight: np.ndarray
    weighted_innov: np.ndarray

    def fprime(self, de, dS) -> float:
        de = np.atleast_1d(np.asarray(de, float))
        dS = np.atleast_2d(np.asarray(dS, float))
        u = self.weighted_innov
        return float(2.0 * de @ u - u @ dS @ u)

    def fsecond(self, de, dS) -> float:
        de = np.atleast_1d(np.asarray(de, float))
        dS = np.atleast_2d(np.asarray(dS, float))
        r = de - dS @ self.weighted_innov
        return float(2.0 * r @ self.weight @ r)


def quad_approx_ml_term(e, S) -> MLQuadTerm:
    """Exact derivative forms of e'S^-1 e at (e, S); S must be PD."""
    e = np.atleast_1d(np.asarray(e, float))
    S = np.atleast_2d(np.asarray(S, float))
    factor = chol_pd(0.5 * (S + S.T))
    if factor is None:
        raise ValueError("S must be positive definite")
    inv_factor = np.linalg.inv(factor)
    weight = inv_factor.T @ inv_factor
    u = weight @ e
    return MLQuadTerm(float(e @ u), weight, u)


def build_qp(alpha, trace: FilterTrace, kind, cs: ConstraintSet) -> QPSubproblem:
    """Assemble the convex QP in the parameter step at the current iterate.

    Substitutes the forward sensitivities de_k = J_k d, dS_k = (dS/da) d
    into the per-step quadratic models.  For AML this is exactly the
    Gauss-Newton system H = 2 sum J'J, g = 2 sum J'e; for ML the PSD
    second-order form is used and the log-determinant enters the gradient
    linearly.  Constraints are linearized at alpha: G d <= -h(alpha).
    """
    kind = ObjectiveKind.parse(kind)
    if not trace.has_sensitivities:
        raise ValueError("build_qp needs a trace with sensitivities")
    alpha = np.asarray(alpha, dtype=float)
    e, de = trace.innov, trace.d_innov
    if kind is ObjectiveKind.AML:
        H = 2.0 * np.einsum("kia,kja->ij", de, de)
        g = 2.0 * np.einsum("kia,ka->i", de, e)
    else:
        S_inv, dS = trace.innov_cov_inv, trace.d_innov_cov
        u = np.einsum("kab,kb->ka", S_inv, e)
        D = de - np.einsum("kiab,kb->kia", dS, u)
        H = 2.0 * np.einsum("kia,kab,kjb->ij", D, S_inv, D)
        g = (
            2.0 * np.einsum("kia,ka->i", de, u)
            - np.einsum("kiab,ka,kb->i", dS, u, u)
            + np.einsum("kiab,kba->i", dS, S_inv)
        )
    h, J = eval_constraints(cs, alpha)
    r, Jeq = eval_equalities(cs, alpha)
    qp = QPSubproblem(0.5 * (H + H.T), g, J, -h)
    if r.size:
        qp.E, qp.e = Jeq, -r
    return qp


def solve_dense_qp(qp: QPSubproblem, max_pivots: Optional[int] = None) -> QPSolution:
    """Primal active-set solve of the convex QP, starting from d = 0.

    d = 0 is feasible by construction (the current iterate satisfies the
    constraints).  When H fails a strict PD test, a Tikhonov term 1e-10 I
    is added once, which also makes rank-deficient Gauss-Newton systems
    deterministic.  The returned point is checked to be a KKT point of the
    (possibly regularized) QP to a 1e-9 residual relative to the gradient
    scale.  Ties in pivot selection break toward the lowest row index.
    """
    H = 0.5 * (qp.H + qp.H.T)
    g = np.asarray(qp.g, dtype=float)
    G = np.asarray(qp.G, dtype=float).reshape(-1, g.shape[0])
    h = np.asarray(qp.h, dtype=float)
    n, m = g.shape[0], G.shape[0]
    E = np.zeros((0, n)) if qp.E is None else np.asarray(qp.E, dtype=float).reshape(-1, n)
    e = np.zeros(0) if qp.e is None else np.asarray(qp.e, dtype=float)
    n_eq = E.shape[0]
    if max_pivots is None:
        max_pivots = 20 * max(1, m) + 20

    regularized = False
    if chol_pd(H) is None:
        H = H + 1e-10 * np.eye(n)
        regularized = True
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError as err:
            raise QPError(f"Hessian not factorizable after regularization: {err}") from err

    x = np.zeros(n)
    active: list[int] = []
    lam_active = np.zeros(0)
    nu = np.zeros(n_eq)
    pivots = 0
    lam_tol = 1e-10 * max(1.0, float(np.max(np.abs(g), initial=0.0)))
    at_minimizer = False  # x is the exact minimizer of the current EQP

    while True:
        pivots += 1
        if pivots > max_pivots:
            raise QPError(f"active-set pivot limit {max_pivots} exceeded")
        Gw = G[active] if active else np.zeros((0, n))
        # equality rows stay in the working set for the whole solve
        work = np.vstack([E, Gw])
        n_work = work.shape[0]
        kkt = np.block([[H, work.T], [work, np.zeros((n_work, n_work))]])
        rhs = np.concatenate([-(g + H @ x), e - E @ x, np.zeros(len(active))])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError as err:
            raise QPError(f"degenerate active set {active}: {err}") from err
        p, nu, lam_active = sol[:n], sol[n : n + n_eq], sol[n + n_eq :]

        # a full unblocked step lands exactly on the EQP minimizer, so the
        # residual p of the next solve is pure roundoff; go by the flag, not
        # by a scale-blind norm test
        negligible = np.max(np.abs(p), initial=0.0) <= 1e-9 * max(
            1.0, np.max(np.abs(x), initial=0.0)
        )
        if at_minimizer or negligible:
            at_minimizer = False
            if not active or np.min(lam_active) >= -lam_tol:
                x = x + p  # roundoff-size correction from the final solve
                break
            drop = int(np.argmin(lam_active))
            active.pop(drop)
            continue

        # ratio test toward the nearest blocking constraint
        step, blocking = 1.0, -1
        for i in range(m):
            if i in active:
                continue
            gp = float(G[i] @ p)
            if gp <= 1e-14:
                continue
            ti = float(h[i] - G[i] @ x) / gp
            if ti < step - 1e-15:
                step, blocking = ti, i
        x = x + max(step, 0.0) * p
        if blocking >= 0:
            active.append(blocking)
            active.sort()
        else:
            at_minimizer = True

    multipliers = np.zeros(m)
    for idx, lam in zip(active, lam_active):
        multipliers[idx] = lam

    # stationarity, relative to the magnitudes a backward-stable solve cancels
    constraint_force = (G.T @ multipliers if m else np.zeros(n)) + (
        E.T @ nu if n_eq else np.zeros(n)
    )
    scale = (
        1.0
        + float(np.max(np.abs(H), initial=0.0)) * max(1.0, float(np.max(np.abs(x), initial=0.0)))
        + float(np.max(np.abs(g), initial=0.0))
        + float(np.max(np.abs(constraint_force), initial=0.0))
    )
    kkt_res = np.max(np.abs(H @ x + g + constraint_force), initial=0.0)
    if kkt_res > 1e-9 * scale:
        raise QPError(f"KKT residual {kkt_res:.3e} exceeds tolerance {1e-9 * scale:.3e}")
    feas_tol = 1e-8 * max(1.0, float(np.max(np.abs(h), initial=0.0)), float(np.max(np.abs(x), initial=0.0)))
    if m and np.max(G @ x - h) > feas_tol:
        raise QPError("returned point violates linearized constraints")
    if n_eq and np.max(np.abs(E @ x - e)) > feas_tol:
        raise QPError("returned point violates equality constraints")
    return QPSolution(x, multipliers, active, regularized, pivots, nu)


def line_search_update(
    alpha,
    delta,
    merit_fn: Callable[[np.ndarray], float],
    predicted_decrease: float,
    cfg: SolverConfig,
) -> LineSearchResult:
    """Backtracking line search on the merit function.

    Accepts the first t in {1, beta, beta^2, ...} with
    merit(alpha + t*delta) <= merit(alpha) - c1*t*predicted_decrease.
    Evaluation failures count as merit +inf (step rejected).  Returns the
    stall flag with t = 0 when no step achieves sufficient decrease.
    """
    alpha = np.asarray(alpha, dtype=float)
    delta = np.asarray(delta, dtype=float)
    merit_0 = float(merit_fn(alpha))
    if not np.isfinite(merit_0):
        raise ValueError("merit at the current point must be finite")
    if predicted_decrease <= 0.0:
        return LineSearchResult(alpha.copy(), 0.0, True, merit_0, 0)
    t = 1.0
    evals = 0
    for _ in range(cfg.ls_max_backtracks):
        trial = alpha + t * delta
        value = float(merit_fn(trial))
        evals += 1
        if np.isfinite(value) and value <= merit_0 - cfg.ls_sufficient_decrease * t * predicted_decrease:
            return LineSearchResult(trial, t, False, value, evals)
        t *= cfg.ls_backtrack
    return LineSearchResult(alpha.copy(), 0.0, True, merit_0, evals)


def _l1_violation(cs: ConstraintSet, alpha) -> float:
    h, _ = eval_constraints(cs, alpha)
    r, _ = eval_equalities(cs, alpha)
    total = float(np.sum(np.clip(h, 0.0, None))) if h.size else 0.0
    if r.size:
        total += float(np.sum(np.abs(r)))
    return total


def _fd_gradient_error(value_fn, alpha, gradient, step=1e-5) -> float:
    fd = np.zeros_like(alpha)
    for i in range(alpha.size):
        up, dn = alpha.copy(), alpha.copy()
        up[i] += step
        dn[i] -= step
        fd[i] = (value_fn(up) - value_fn(dn)) / (2 * step)
    denom = max(1.0, float(np.max(np.abs(gradient), initial=0.0)))
    return float(np.max(np.abs(fd - gradient), initial=0.0)) / denom


def estimate(spec: ModelSpec, measurements, cfg: SolverConfig, alpha0) -> EstimationResult:
    """Run the SQP loop from a feasible start and return the best iterate.

    Iterates {sensitivity filter -> QP -> line search} until the step norm
    and KKT residual drop below ``stop_tol`` or ``max_iter`` is reached.
    Noise-scale parameters receive an implicit lower bound so the filter
    stays well posed along the path.  With ``scalar_search`` set (single
    parameter only), the loop is replaced by a golden-section search over
    the box.
    """
    alpha = spec.check_alpha(alpha0)
    cs = apply_noise_floor(spec, cfg.noise_floor)
    h0, _ = eval_constraints(cs, alpha)
    r0, _ = eval_equalities(cs, alpha)
    start_violation = max(
        float(np.max(h0)) if h0.size else 0.0,
        float(np.max(np.abs(r0))) if r0.size else 0.0,
    )
    if start_violation > 1e-9:
        raise ValueError(f"initial point infeasible (max residual {start_violation:.3g})")

    def objective_value(a) -> float:
        try:
            return eval_objective(run_filter(spec, a, measurements), cfg.kind).value
        except FilterError:
            return np.inf

    if cfg.scalar_search:
        if spec.n_alpha != 1:
            raise SolverError("scalar_search requires exactly one parameter")
        return _estimate_scalar(spec, cfg, alpha, cs, objective_value)

    penalty = cfg.merit_penalty
    iterates: list[IterateRecord] = []
    diagnostics: dict = {"qp_regularized": 0}
    best_alpha, best_value = alpha.copy(), np.inf
    status = "max_iter"
    pending_eval = True

    for _ in range(cfg.max_iter):
        try:
            trace = run_filter_with_sensitivities(spec, alpha, measurements)
        except FilterError as err:
            status = "filter_failure"
            diagnostics["filter_error"] = str(err)
            break
        ev = eval_objective(trace, cfg.kind, gradient=True)
        pending_eval = False
        if cfg.fd_check and "fd_rel_err" not in diagnostics:
            diagnostics["fd_rel_err"] = _fd_gradient_error(objective_value, alpha, ev.gradient)
        violation = _l1_violation(cs, alpha)
        merit_now = ev.value + penalty * violation
        if ev.value < best_value:
            best_alpha, best_value = alpha.copy(), ev.value

        qp = build_qp(alpha, trace, cfg.kind, cs)
        try:
            sol = solve_dense_qp(qp)
        except QPError as err:
            status = "qp_failure"
            diagnostics["qp_error"] = str(err)
            break
        diagnostics["qp_regularized"] += int(sol.regularized)

        step_norm = float(np.max(np.abs(sol.delta), initial=0.0))
        kkt_vec = ev.gradient + (qp.G.T @ sol.multipliers if qp.G.size else 0.0)
        if sol.eq_multipliers.size:
            kkt_vec = kkt_vec + qp.E.T @ sol.eq_multipliers
        kkt_res = float(np.max(np.abs(kkt_vec), initial=0.0))
        record = IterateRecord(alpha.copy(), ev.value, step_norm, merit_now, np.nan, kkt_res)
        iterates.append(record)

        if not cfg.fixed_iterations and max(step_norm, kkt_res) <= cfg.stop_tol:
            status = "converged"
            break

        all_mults = np.concatenate([sol.multipliers, np.abs(sol.eq_multipliers)])
        while all_mults.size and np.max(np.abs(all_mults)) > penalty:
            penalty *= 2.0

        predicted = -(qp.g @ sol.delta + 0.5 * sol.delta @ qp.H @ sol.delta) + penalty * violation

        def merit_fn(a, _penalty=penalty):
            value = objective_value(a)
            if not np.isfinite(value):
                return np.inf
            return value + _penalty * _l1_violation(cs, a)

        ls = line_search_update(alpha, sol.delta, merit_fn, predicted, cfg)
        record.step_scale = ls.step
        if ls.stalled:
            status = "converged" if max(step_norm, kkt_res) <= cfg.stop_tol else "max_iter"
            break
        alpha = ls.alpha_new
        pending_eval = True

    if pending_eval and status in ("max_iter", "converged"):
        final_value = objective_value(alpha)
        if np.isfinite(final_value):
            iterates.append(
                IterateRecord(alpha.copy(), final_value, np.nan, final_value, np.nan, np.nan)
            )
            if final_value < best_value:
                best_alpha, best_value = alpha.copy(), final_value

    return EstimationResult(best_alpha, best_value, iterates, status, diagnostics)


def _expand_bound(phi, anchor: float, direction: float, max_doublings: int = 60) -> float:
    """Walk away from ``anchor`` in ``direction`` until the objective turns uphill."""
    width = 1.0
    prev = phi(anchor + direction * width)
    for _ in range(max_doublings):
        width *= 2.0
        value = phi(anchor + direction * width)
        if value > prev:
            return anchor + direction * width
        prev = value
    raise SolverError("could not bracket a minimum: objective decreasing without bound")


def _estimate_scalar(spec, cfg, alpha0, cs, objective_value) -> EstimationResult:
    def phi(a_scalar: float) -> float:
        return objective_value(np.array([a_scalar]))

    lo = -np.inf if cs.lower is None else float(cs.lower[0])
    hi = np.inf if cs.upper is None else float(cs.upper[0])
    if not np.isfinite(lo):
        lo = _expand_bound(phi, float(alpha0[0]), direction=-1.0)
    if not np.isfinite(hi):
        hi = _expand_bound(phi, max(float(alpha0[0]), lo), direction=1.0)

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = phi(c), phi(d)
    iterates = [IterateRecord(np.array([c]), fc, b - a, fc, 1.0, np.nan)]
    best_alpha, best_value = (c, fc) if fc <= fd else (d, fd)
    while b - a > cfg.scalar_tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = phi(c)
            probe, value = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = phi(d)
            probe, value = d, fd
        if value < best_value:
            best_alpha, best_value = probe, value
        iterates.append(IterateRecord(np.array([probe]), value, b - a, value, 1.0, np.nan))
    return EstimationResult(
        np.array([best_alpha]),
        best_value,
        iterates,
        "converged",
        {"mode": "scalar_search", "interval": (a, b)},
    )
