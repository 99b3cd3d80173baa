import numpy as np
import pytest

from lingauss.model import AffineFamily, ConstraintSet, ModelSpec


def random_affine_spec(seed, n_x=None, n_y=None, n_steps=None, n_alpha=2, time_varying=False):
    """Random small spec with PD noise in a neighborhood of alpha = 0.

    Dynamics are scaled to be stable-ish; Q and R have a PD constant term
    so every alpha with |alpha| <= ~1 stays valid.
    """
    r = np.random.default_rng(seed)
    n_x = n_x or int(r.integers(1, 4))
    n_y = n_y or int(r.integers(1, 3))
    n_steps = n_steps or int(r.integers(3, 21))

    def fam(rows, cols, scale, horizon, stabilize=False):
        def one_term(t):
            m = r.normal(size=(rows, cols)) * scale
            if stabilize and t == 0 and rows == cols:
                m = 0.3 * m + 0.5 * np.eye(rows)
            return m

        if time_varying:
            return AffineFamily.from_time_varying_terms(
                [[one_term(t) for t in range(n_alpha + 1)] for _ in range(horizon)]
            )
        return AffineFamily.from_terms([one_term(t) for t in range(n_alpha + 1)])

    def psd_fam(nn, horizon):
        def one_step():
            terms = []
            for t in range(n_alpha + 1):
                m = r.normal(size=(nn, nn)) * 0.05
                terms.append(m @ m.T + (np.eye(nn) if t == 0 else 0.02 * np.eye(nn)))
            return terms

        if time_varying:
            return AffineFamily.from_time_varying_terms([one_step() for _ in range(horizon)])
        return AffineFamily.from_terms(one_step())

    return ModelSpec(
        n_x=n_x,
        n_y=n_y,
        n_alpha=n_alpha,
        n_steps=n_steps,
        A=fam(n_x, n_x, 0.25, n_steps, stabilize=True),
        b=fam(n_x, 1, 0.2, n_steps),
        C=fam(n_y, n_x, 0.5, n_steps + 1),
        Q=psd_fam(n_x, n_steps),
        R=psd_fam(n_y, n_steps + 1),
        x0_mean=r.normal(size=n_x),
        x0_cov=0.5 * np.eye(n_x),
        constraints=ConstraintSet(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(approx, exact, floor=1.0):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    denom = max(float(np.max(np.abs(exact), initial=0.0)), floor)
    return float(np.max(np.abs(approx - exact), initial=0.0)) / denom
