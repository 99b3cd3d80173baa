"""Built-in model instances used by the experiments and the CLI.

Three builders:

* ``random_walk``     - scalar random walk observed through an unknown output
  gain; the one-parameter benchmark on which the trajectory-optimization
  baseline provably fails.
* ``underdetermined`` - scalar random walk with unknown output gain and
  unknown process-noise variance; the measurement distribution depends only
  on ``gain * sqrt(process_var)``, so the pair is not identifiable.
* ``heat_transfer``   - five-state fluid temperature model (conduction, mass
  transport, convective exchange with a noisy external temperature), driven
  by piecewise-constant inlet temperature and flow inputs, with two measured
  temperatures and two unknown noise scales.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .model import AffineFamily, ConstraintSet, ModelSpec, NOISE_SCALE_FLOOR
from .simulate import DEFAULT_BLOCK_LEN, InputProfile, gen_piecewise_inputs

__all__ = [
    "build_random_walk",
    "build_underdetermined",
    "build_heat_transfer",
    "build_example",
    "BUILDER_NAMES",
    "default_param_ranges",
]

BUILDER_NAMES = ("random_walk", "underdetermined", "heat_transfer")

# parameter ranges used when drawing true parameters for each example
_PARAM_RANGES = {
    "random_walk": np.array([[0.0, 2.0]]),
    "underdetermined": np.array([[0.0, 2.0], [0.25, 2.0]]),
    "heat_transfer": np.tile([0.0, 1.0], (5, 1)),
}


def build_random_walk(n_steps: int) -> ModelSpec:
    """Scalar random walk with unknown output gain.

    x[k+1] = x[k] + w,  y[k] = gain * x[k] + v,  w, v ~ N(0, 1), x[0] = 0,
    constrained to gain >= 0.  One parameter: the gain.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return ModelSpec(
        n_x=1,
        n_y=1,
        n_alpha=1,
        n_steps=n_steps,
        A=AffineFamily.constant([[1.0]], 1),
        b=AffineFamily.constant([[0.0]], 1),
        C=AffineFamily.from_terms([[[0.0]], [[1.0]]]),
        Q=AffineFamily.constant([[1.0]], 1),
        R=AffineFamily.constant([[1.0]], 1),
        x0_mean=[0.0],
        x0_cov=[[0.0]],
        constraints=ConstraintSet(lower=np.array([0.0])),
    )


def build_underdetermined(n_steps: int, var_floor: float = NOISE_SCALE_FLOOR) -> ModelSpec:
    """Random walk with unknown output gain and process-noise variance.

    x[k+1] = x[k] + w with w ~ N(0, var), y[k] = gain * x[k] + v with
    v ~ N(0, 1), x[0] = 0.  Rescaling the state shows the data distribution
    depends on gain * sqrt(var) only, so (gain, var) is underdetermined:
    the likelihood is constant along (c * gain, var / c^2).  The variance
    is kept above ``var_floor``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not var_floor > 0:
        raise ValueError("var_floor must be positive")
    return ModelSpec(
        n_x=1,
        n_y=1,
        n_alpha=2,
        n_steps=n_steps,
        A=AffineFamily.constant([[1.0]], 2),
        b=AffineFamily.constant([[0.0]], 2),
        C=AffineFamily.from_terms([[[0.0]], [[1.0]], [[0.0]]]),
        Q=AffineFamily.from_terms([[[0.0]], [[0.0]], [[1.0]]]),
        R=AffineFamily.constant([[1.0]], 2),
        x0_mean=[0.0],
        x0_cov=[[0.0]],
        constraints=ConstraintSet(lower=np.array([-np.inf, var_floor])),
    )


# sparsity patterns of the heat-transfer transition matrix derivatives
_HEAT_SCALE = 0.05
_HEAT_DA = np.array(
    [
        [-2.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, -2.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, -2.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)
_HEAT_DB = np.array(
    [
        [-1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, -1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)
_HEAT_DC = np.array(
    [
        [-1.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, -1.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, -1.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)


def build_heat_transfer(
    inputs: InputProfile,
    x0_mean=None,
    x0_cov=None,
    noise_floor: float = NOISE_SCALE_FLOOR,
) -> ModelSpec:
    """Five-state heat-transfer model driven by inlet temperature and flow.

    State: four fluid temperatures along the flow axis plus the external
    temperature.  Parameters (conduction, mass transfer, convective
    exchange, process-noise scale, external-noise scale) all live in
    [0, 1]; the two noise scales are floored at ``noise_floor``.  With
    conduction a, mass transfer b, convection c and flow q_k, the coupling
    coefficients are a~ = a + b q_k and 1 - a~ - c on the diagonal; the
    transition matrix carries an overall 0.05 scaling, its last row is
    zero (the external temperature is redrawn every step rather than
    integrated), and the inlet temperature enters through the drift.

    The default initial belief (zero mean, covariance 100 I) is a
    documented choice, overridable via ``x0_mean`` / ``x0_cov``.
    """
    theta0 = inputs.channel("theta0")
    q = inputs.channel("q")
    n_steps = inputs.n_steps
    if n_steps < 1:
        raise ValueError("inputs must cover at least one step")

    a_basis = np.zeros((n_steps, 6, 5, 5))
    a_basis[:, 0] = _HEAT_SCALE * np.diag([1.0, 1.0, 1.0, 1.0, 0.0])
    a_basis[:, 1] = _HEAT_SCALE * _HEAT_DA
    a_basis[:, 2] = _HEAT_SCALE * q[:, None, None] * _HEAT_DB
    a_basis[:, 3] = _HEAT_SCALE * _HEAT_DC

    b_basis = np.zeros((n_steps, 6, 5, 1))
    b_basis[:, 1, 0, 0] = _HEAT_SCALE * theta0
    b_basis[:, 2, 0, 0] = _HEAT_SCALE * q * theta0

    q_basis = np.zeros((1, 6, 5, 5))
    q_basis[0, 4] = np.diag([0.1, 0.1, 0.1, 0.1, 0.0])
    q_basis[0, 5] = np.diag([0.0, 0.0, 0.0, 0.0, 4.0])

    c_matrix = np.array(
        [
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0],
        ]
    )

    lower = np.array([0.0, 0.0, 0.0, noise_floor, noise_floor])
    return ModelSpec(
        n_x=5,
        n_y=2,
        n_alpha=5,
        n_steps=n_steps,
        A=AffineFamily(5, 5, a_basis, time_varying=True),
        b=AffineFamily(5, 1, b_basis, time_varying=True),
        C=AffineFamily.constant(c_matrix, 5),
        Q=AffineFamily(5, 5, q_basis, time_varying=False),
        R=AffineFamily.constant(np.eye(2), 5),
        x0_mean=np.zeros(5) if x0_mean is None else x0_mean,
        x0_cov=100.0 * np.eye(5) if x0_cov is None else x0_cov,
        constraints=ConstraintSet(lower=lower, upper=np.ones(5)),
    )


def default_param_ranges(name: str) -> np.ndarray:
    """Uniform ranges from which true parameters are drawn per example."""
    if name not in _PARAM_RANGES:
        raise ValueError(f"unknown example {name!r}; expected one of {BUILDER_NAMES}")
    return _PARAM_RANGES[name].copy()


def build_example(
    name: str,
    n_steps: int,
    inputs: Optional[InputProfile] = None,
    inputs_seed: Optional[int] = None,
    block_len: int = DEFAULT_BLOCK_LEN,
) -> ModelSpec:
    """Uniform entry point for the named builders (CLI and benchmarks).

    ``heat_transfer`` needs its input profile: pass one explicitly or give
    ``inputs_seed`` to generate the standard piecewise-constant channels.
    """
    if name == "random_walk":
        return build_random_walk(n_steps)
    if name == "underdetermined":
        return build_underdetermined(n_steps)
    if name == "heat_transfer":
        if inputs is None:
            if inputs_seed is None:
                raise ValueError("heat_transfer requires inputs or inputs_seed")
            inputs = gen_piecewise_inputs(inputs_seed, n_steps, block_len=block_len)
        if inputs.n_steps != n_steps:
            raise ValueError(
                f"input profile covers {inputs.n_steps} steps, model needs {n_steps}"
            )
        return build_heat_transfer(inputs)
    raise ValueError(f"unknown example {name!r}; expected one of {BUILDER_NAMES}")
