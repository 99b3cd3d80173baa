"""Model-spec file format: JSON schema plus named-builder dispatch.

A model file either spells out the affine families,

    {"n_x": 1, "n_y": 1, "n_alpha": 1, "N": 100,
     "A": {"time_varying": false, "basis": [[[1.0]], [[0.0]]]},
     ..., "x0_mean": [0.0], "x0_cov": [[0.0]],
     "constraints": {"lower": [0.0], "upper": null, "linear": null}}

where a non-time-varying basis is ``[term][row][col]`` and a time-varying
one ``[step][term][row][col]``, or names a builder in place of families:

    {"builder": "heat_transfer", "N": 500, "inputs_seed": 3}

Box bounds serialize infinities as null entries.  General convex residual
callables are in-process only and do not round-trip.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .examples import BUILDER_NAMES, build_example
from .model import AffineFamily, ConstraintSet, ModelSpec
from .simulate import InputProfile

__all__ = ["model_spec_to_dict", "save_model_spec", "load_model_spec", "resolve_model"]


def _bounds_to_json(bounds: Optional[np.ndarray]):
    if bounds is None:
        return None
    return [None if not np.isfinite(v) else float(v) for v in bounds]


def _bounds_from_json(data, side: str) -> Optional[np.ndarray]:
    if data is None:
        return None
    fill = -np.inf if side == "lower" else np.inf
    return np.array([fill if v is None else float(v) for v in data])


def _family_to_json(fam: AffineFamily) -> dict:
    basis = fam.basis if fam.time_varying else fam.basis[0]
    return {"time_varying": fam.time_varying, "basis": basis.tolist()}


def _family_from_json(data: dict, name: str) -> AffineFamily:
    basis = np.asarray(data["basis"], dtype=float)
    time_varying = bool(data.get("time_varying", False))
    if not time_varying:
        if basis.ndim != 3:
            raise ValueError(f"family {name}: non-time-varying basis must be [term][row][col]")
        basis = basis[None]
    elif basis.ndim != 4:
        raise ValueError(f"family {name}: time-varying basis must be [step][term][row][col]")
    return AffineFamily(basis.shape[2], basis.shape[3], basis, time_varying=time_varying)


def model_spec_to_dict(spec: ModelSpec) -> dict:
    cs = spec.constraints
    linear = None
    if cs.linear_G is not None:
        linear = {"G": cs.linear_G.tolist(), "g": cs.linear_g.tolist()}
    return {
        "n_x": spec.n_x,
        "n_y": spec.n_y,
        "n_alpha": spec.n_alpha,
        "N": spec.n_steps,
        "A": _family_to_json(spec.A),
        "b": _family_to_json(spec.b),
        "C": _family_to_json(spec.C),
        "Q": _family_to_json(spec.Q),
        "R": _family_to_json(spec.R),
        "x0_mean": spec.x0_mean.tolist(),
        "x0_cov": spec.x0_cov.tolist(),
        "constraints": {
            "lower": _bounds_to_json(cs.lower),
            "upper": _bounds_to_json(cs.upper),
            "linear": linear,
        },
    }


def save_model_spec(spec: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(model_spec_to_dict(spec), handle, indent=1)
        handle.write("\n")


def _spec_from_dict(
    data: dict,
    n_steps: Optional[int] = None,
    inputs: Optional[InputProfile] = None,
    inputs_seed: Optional[int] = None,
) -> ModelSpec:
    if "builder" in data:
        name = data["builder"]
        n = data.get("N", n_steps)
        if n is None:
            raise ValueError(f"builder {name!r} needs a horizon N")
        seed = data.get("inputs_seed", inputs_seed)
        return build_example(name, int(n), inputs=inputs, inputs_seed=seed)
    missing = [k for k in ("n_x", "n_y", "n_alpha", "N", "A", "b", "C", "Q", "R") if k not in data]
    if missing:
        raise ValueError(f"model file missing fields: {missing}")
    cs_data = data.get("constraints") or {}
    linear = cs_data.get("linear")
    constraints = ConstraintSet(
        lower=_bounds_from_json(cs_data.get("lower"), "lower"),
        upper=_bounds_from_json(cs_data.get("upper"), "upper"),
        linear_G=None if not linear else np.asarray(linear["G"], dtype=float),
        linear_g=None if not linear else np.asarray(linear["g"], dtype=float),
    )
    return ModelSpec(
        n_x=int(data["n_x"]),
        n_y=int(data["n_y"]),
        n_alpha=int(data["n_alpha"]),
        n_steps=int(data["N"]),
        A=_family_from_json(data["A"], "A"),
        b=_family_from_json(data["b"], "b"),
        C=_family_from_json(data["C"], "C"),
        Q=_family_from_json(data["Q"], "Q"),
        R=_family_from_json(data["R"], "R"),
        x0_mean=np.asarray(data["x0_mean"], dtype=float),
        x0_cov=np.asarray(data["x0_cov"], dtype=float),
        constraints=constraints,
    )


def load_model_spec(source, **kwargs) -> ModelSpec:
    """Load a ModelSpec from a path, an already-parsed dict, or a builder name."""
    if isinstance(source, dict):
        return _spec_from_dict(source, **kwargs)
    if isinstance(source, (str, Path)) and str(source) in BUILDER_NAMES:
        return _spec_from_dict({"builder": str(source)}, **kwargs)
    with open(source, "r", encoding="utf-8") as handle:
        return _spec_from_dict(json.load(handle), **kwargs)


def resolve_model(
    model: Union[str, Path],
    n_steps: Optional[int] = None,
    inputs: Optional[InputProfile] = None,
    inputs_seed: Optional[int] = None,
) -> ModelSpec:
    """CLI entry: ``model`` is a builder name or a model-file path."""
    return load_model_spec(model, n_steps=n_steps, inputs=inputs, inputs_seed=inputs_seed)
