"""Command-line front end.

Subcommands: ``simulate``, ``estimate``, ``benchmark``, ``landscape`` and
``check-derivatives``.  Every output file embeds or is accompanied by a run
manifest (command, resolved options, input paths, seeds, version, wall-clock
duration).  Exit codes: 0 on success, 2 on bad arguments, 3 on numerical
failure; failures also emit a machine-readable JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bench import (
    BenchError,
    landscape_scan,
    resolve_workers,
    run_mse_experiment,
)
from .kalman import (
    FilterError,
    run_filter,
    run_filter_with_sensitivities,
)
from .model import matrix_derivative
from .objectives import ObjectiveKind, TrajectoryFitError, eval_objective
from .simulate import (
    SimulationError,
    load_input_csv,
    load_measurement_csv,
    sample_trajectory,
    sample_true_params,
    save_measurement_csv,
)
from .solver import QPError, SolverConfig, SolverError, estimate
from .specio import resolve_model
from .examples import BUILDER_NAMES, default_param_ranges

__all__ = ["run_cli", "main", "RunManifest"]


@dataclass
class RunManifest:
    """Provenance record emitted with every run."""

    command: str
    options: dict
    inputs: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0


class CliError(ValueError):
    """Bad argument combinations detected past argparse."""


def _emit_error(kind: str, err: Exception) -> None:
    payload = {"error": {"type": kind, "class": type(err).__name__, "message": str(err)}}
    print(json.dumps(payload), file=sys.stderr)


def _parse_alpha(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v != ""])
    except ValueError as err:
        raise CliError(f"could not parse parameter vector {text!r}: {err}") from None


def _parse_range(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError(f"range must be start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise CliError(f"empty range {text!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as err:
        raise CliError(f"could not parse integer list {text!r}: {err}") from None


def _load_model(args, require_n_for_builder=True):
    inputs = None
    if getattr(args, "inputs", None):
        inputs = load_input_csv(args.inputs)
    n = getattr(args, "n", None)
    if str(args.model) in BUILDER_NAMES and n is None and inputs is None and require_n_for_builder:
        raise CliError(f"builder {args.model!r} needs --n")
    if inputs is not None and n is None:
        n = inputs.n_steps
    return resolve_model(
        args.model, n_steps=n, inputs=inputs, inputs_seed=getattr(args, "inputs_seed", None)
    )


def _model_inputs(args) -> list:
    paths = []
    if Path(str(args.model)).is_file():
        paths.append(str(args.model))
    if getattr(args, "inputs", None):
        paths.append(str(args.inputs))
    if getattr(args, "data", None):
        paths.append(str(args.data))
    return paths


def _default_alpha0(spec) -> np.ndarray:
    cs = spec.constraints
    lower = cs.lower if cs.lower is not None else np.full(spec.n_alpha, -np.inf)
    upper = cs.upper if cs.upper is not None else np.full(spec.n_alpha, np.inf)
    alpha0 = np.empty(spec.n_alpha)
    for i in range(spec.n_alpha):
        lo, hi = lower[i], upper[i]
        if np.isfinite(lo) and np.isfinite(hi):
            alpha0[i] = 0.5 * (lo + hi)
        elif np.isfinite(lo):
            alpha0[i] = lo + 0.5
        elif np.isfinite(hi):
            alpha0[i] = hi - 0.5
        else:
            alpha0[i] = 0.5
    return alpha0


def _manifest(command: str, args, seeds: dict, inputs: list, t0: float) -> RunManifest:
    options = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func" and v is not None
    }
    return RunManifest(
        command=command,
        options=options,
        inputs=inputs,
        seeds={k: int(v) for k, v in seeds.items() if v is not None},
        duration_s=round(time.perf_counter() - t0, 6),
    )


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=1)
        handle.write("\n")


def _write_manifest_sidecar(out_path, manifest: RunManifest, extra: Optional[dict] = None) -> None:
    payload = dict(extra or {})
    payload["manifest"] = asdict(manifest)
    _write_json(str(out_path) + ".manifest.json", payload)


def _cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if (args.alpha is None) == (args.alpha_seed is None):
        raise CliError("give exactly one of --alpha or --alpha-seed")
    spec = _load_model(args)
    if args.alpha is not None:
        alpha = _parse_alpha(args.alpha)
    else:
        if str(args.model) in BUILDER_NAMES:
            ranges = default_param_ranges(str(args.model))
        else:
            ranges = (0.0, 1.0)
        alpha = sample_true_params(args.alpha_seed, spec.n_alpha, ranges)
    series = sample_trajectory(spec, alpha, args.seed)
    save_measurement_csv(args.out, series)
    manifest = _manifest(
        "simulate",
        args,
        {"seed": args.seed, "alpha_seed": args.alpha_seed, "inputs_seed": args.inputs_seed},
        _model_inputs(args),
        t0,
    )
    _write_manifest_sidecar(
        args.out,
        manifest,
        {"true_alpha": [float(v) for v in alpha], "n": spec.n_steps, "model": str(args.model)},
    )
    print(f"wrote {args.out} ({spec.n_steps + 1} rows, {spec.n_y} output(s))")
    return 0


def _cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    spec = _load_model(args)
    series = load_measurement_csv(args.data)
    if series.n_steps != spec.n_steps:
        raise CliError(
            f"data horizon {series.n_steps} does not match model horizon {spec.n_steps}"
        )
    alpha0 = _parse_alpha(args.alpha0) if args.alpha0 else _default_alpha0(spec)
    cfg = SolverConfig(
        kind=ObjectiveKind.parse(args.method),
        max_iter=args.max_iter,
        fixed_iterations=args.fixed_iterations,
        scalar_search=args.grid,
        fd_check=args.fd_check,
    )
    result = estimate(spec, series, cfg, alpha0)
    if args.trace_out:
        trace = run_filter(spec, result.alpha_hat, series)
        _write_json(
            args.trace_out,
            {
                "alpha": [float(v) for v in result.alpha_hat],
                "x_pred": trace.x_pred.tolist(),
                "innov": trace.innov.tolist(),
                "innov_cov": trace.innov_cov.tolist(),
                "gain": trace.gain.tolist(),
                "logdet": trace.logdet.tolist(),
            },
        )
    manifest = _manifest("estimate", args, {}, _model_inputs(args), t0)
    payload = {
        "alpha_hat": [float(v) for v in result.alpha_hat],
        "objective": float(result.objective),
        "status": result.status,
        "method": ObjectiveKind.parse(args.method).value,
        "n_iterations": len(result.iterates),
        "diagnostics": {k: v for k, v in result.diagnostics.items() if _jsonable(v)},
        "iterates": [
            {
                "alpha": [float(v) for v in rec.alpha],
                "objective": _json_float(rec.objective),
                "step_norm": _json_float(rec.step_norm),
                "merit": _json_float(rec.merit),
                "step_scale": _json_float(rec.step_scale),
                "kkt_residual": _json_float(rec.kkt_residual),
            }
            for rec in result.iterates
        ],
        "manifest": asdict(manifest),
    }
    _write_json(args.out, payload)
    print(f"status={result.status} objective={result.objective:.6g} alpha_hat="
          f"{np.array2string(result.alpha_hat, precision=6)}")
    return 0 if result.status in ("converged", "max_iter") else 3


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool))


def _json_float(v) -> Optional[float]:
    v = float(v)
    return None if not np.isfinite(v) else v


def _cmd_benchmark(args) -> int:
    t0 = time.perf_counter()
    if args.example not in ("random_walk", "heat_transfer"):
        raise CliError("benchmark supports examples: random_walk, heat_transfer")
    ns = _parse_int_list(args.ns)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = run_mse_experiment(
        args.example,
        ns,
        args.m,
        methods=methods,
        base_seed=args.seed,
        max_iter=args.max_iter,
        workers=args.workers,
    )
    manifest = _manifest("benchmark", args, {"seed": args.seed}, [], t0)
    payload = report.to_dict()
    payload["workers"] = resolve_workers(args.workers)
    payload["manifest"] = asdict(manifest)
    _write_json(args.out, payload)
    csv_path = Path(args.out).with_suffix(".csv")
    report.write_csv(csv_path)
    _write_manifest_sidecar(csv_path, manifest)
    written = [str(args.out), str(csv_path)]
    if args.plot:
        from .plots import plot_mse_report

        png_path = Path(args.out).with_suffix(".png")
        plot_mse_report(report, png_path)
        written.append(str(png_path))
    for n in ns:
        for method in report.methods:
            cell = report.cell(n, method)
            print(f"n={n:6d} method={method:3s} mse={cell.mse:.6g} failed={cell.n_failed}")
    for method, fit in report.rate_fits.items():
        print(f"rate fit {method}: slope={fit.slope:.3f} constant={fit.constant:.4g}")
    print("wrote " + ", ".join(written))
    return 0


def _cmd_landscape(args) -> int:
    t0 = time.perf_counter()
    spec = _load_model(args)
    series = load_measurement_csv(args.data)
    if series.n_steps != spec.n_steps:
        raise CliError(
            f"data horizon {series.n_steps} does not match model horizon {spec.n_steps}"
        )
    grid = _parse_range(args.range)
    base_alpha = _parse_alpha(args.alpha) if args.alpha else _default_alpha0(spec)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    table = landscape_scan(spec, series, args.param, grid, base_alpha, methods=methods)
    table.write_csv(args.out)
    manifest = _manifest("landscape", args, {}, _model_inputs(args), t0)
    _write_manifest_sidecar(args.out, manifest, {"n_failures": table.n_failures})
    written = [str(args.out)]
    if args.plot:
        from .plots import plot_landscape

        png_path = Path(args.out).with_suffix(".png")
        plot_landscape(table, png_path)
        written.append(str(png_path))
    for method in methods:
        if not table.degenerate[method]:
            print(f"method={method:3s} argmin={table.argmin(method):.4g}")
        else:
            print(f"method={method:3s} degenerate normalization (flat profile)")
    print("wrote " + ", ".join(written))
    return 0


def _cmd_check_derivatives(args) -> int:
    spec = _load_model(args)
    alpha = _parse_alpha(args.alpha)
    series = sample_trajectory(spec, alpha, args.seed)
    step, tol = args.step, args.tol
    lines = []
    worst_ok = True

    def report_line(name, err, bound):
        nonlocal worst_ok
        ok = err <= bound
        worst_ok = worst_ok and ok
        lines.append(f"{name:34s} max_rel_err={err:.3e} tol={bound:.0e} {'PASS' if ok else 'FAIL'}")

    # affine family derivatives against central differences (exact family)
    fam_err = 0.0
    for name in ("A", "b", "C", "Q", "R"):
        fam = spec.family(name)
        for i in range(spec.n_alpha):
            up, dn = alpha.copy(), alpha.copy()
            up[i] += step
            dn[i] -= step
            fd = (fam.evaluate(up, 0) - fam.evaluate(dn, 0)) / (2 * step)
            exact = matrix_derivative(spec, 0, name, i)
            scale = max(1.0, float(np.max(np.abs(exact))))
            fam_err = max(fam_err, float(np.max(np.abs(fd - exact))) / scale)
    report_line("family derivatives", fam_err, 1e-10)

    trace = run_filter_with_sensitivities(spec, alpha, series)
    e_err = s_err = 0.0
    for i in range(spec.n_alpha):
        up, dn = alpha.copy(), alpha.copy()
        up[i] += step
        dn[i] -= step
        tr_up = run_filter(spec, up, series)
        tr_dn = run_filter(spec, dn, series)
        fd_e = (tr_up.innov - tr_dn.innov) / (2 * step)
        fd_s = (tr_up.innov_cov - tr_dn.innov_cov) / (2 * step)
        scale_e = max(1.0, float(np.max(np.abs(trace.d_innov[:, i]))))
        scale_s = max(1.0, float(np.max(np.abs(trace.d_innov_cov[:, i]))))
        e_err = max(e_err, float(np.max(np.abs(fd_e - trace.d_innov[:, i]))) / scale_e)
        s_err = max(s_err, float(np.max(np.abs(fd_s - trace.d_innov_cov[:, i]))) / scale_s)
    report_line("innovation sensitivities", e_err, tol)
    report_line("innovation-cov sensitivities", s_err, tol)

    for kind in ("ml", "aml"):
        ev = eval_objective(trace, kind, gradient=True)
        fd = np.zeros(spec.n_alpha)
        for i in range(spec.n_alpha):
            up, dn = alpha.copy(), alpha.copy()
            up[i] += step
            dn[i] -= step
            fd[i] = (
                eval_objective(run_filter(spec, up, series), kind).value
                - eval_objective(run_filter(spec, dn, series), kind).value
            ) / (2 * step)
        scale = max(1.0, float(np.max(np.abs(ev.gradient))))
        report_line(f"{kind} objective gradient", float(np.max(np.abs(fd - ev.gradient))) / scale, tol)

    for line in lines:
        print(line)
    if not worst_ok:
        raise FilterError("derivative check failed beyond tolerance")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lingauss",
        description="Parameter estimation for linear Gaussian state-space models",
    )
    parser.add_argument("--version", action="version", version=f"lingauss {__version__}")
    sub = parser.add_subparsers(dest="command")

    def add_model_args(p, with_data=False):
        p.add_argument("--model", required=True,
                       help="model file path or builder name "
                            f"({', '.join(BUILDER_NAMES)})")
        p.add_argument("--n", type=int, default=None, help="horizon for builder models")
        p.add_argument("--inputs", default=None, help="input-profile CSV (heat_transfer)")
        p.add_argument("--inputs-seed", type=int, default=None,
                       help="generate the input profile from this seed (heat_transfer)")
        if with_data:
            p.add_argument("--data", required=True, help="measurement CSV")

    p_sim = sub.add_parser("simulate", help="simulate a measurement series")
    add_model_args(p_sim)
    p_sim.add_argument("--alpha", default=None, help="comma-separated true parameters")
    p_sim.add_argument("--alpha-seed", type=int, default=None,
                       help="draw the true parameters from this seed instead")
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=_cmd_simulate)

    p_est = sub.add_parser("estimate", help="fit parameters to a measurement series")
    add_model_args(p_est, with_data=True)
    p_est.add_argument("--method", default="ml", choices=["ml", "aml"])
    p_est.add_argument("--alpha0", default=None, help="comma-separated initial point")
    p_est.add_argument("--max-iter", type=int, default=30)
    p_est.add_argument("--fixed-iterations", action="store_true",
                       help="always run max-iter iterations (no early stopping)")
    p_est.add_argument("--grid", action="store_true",
                       help="single-parameter line-search mode instead of SQP")
    p_est.add_argument("--fd-check", action="store_true",
                       help="record a finite-difference gradient check at the start")
    p_est.add_argument("--out", required=True)
    p_est.add_argument("--trace-out", default=None,
                       help="also dump the filter trace at the estimate (JSON)")
    p_est.set_defaults(func=_cmd_estimate)

    p_bench = sub.add_parser("benchmark", help="Monte-Carlo MSE experiment")
    p_bench.add_argument("--example", required=True, choices=["random_walk", "heat_transfer"])
    p_bench.add_argument("--ns", required=True, help="comma-separated horizon lengths")
    p_bench.add_argument("--m", type=int, default=200, help="trials per horizon")
    p_bench.add_argument("--methods", default="ml,aml")
    p_bench.add_argument("--seed", type=int, required=True)
    p_bench.add_argument("--max-iter", type=int, default=30)
    p_bench.add_argument("--workers", type=int, default=None,
                         help="trial parallelism (default: $LINGAUSS_WORKERS or CPU count)")
    p_bench.add_argument("--out", required=True, help="report JSON path (CSV/PNG land next to it)")
    p_bench.add_argument("--no-plot", dest="plot", action="store_false",
                         help="skip rendering the report figure")
    p_bench.set_defaults(func=_cmd_benchmark)

    p_land = sub.add_parser("landscape", help="objective profiles along one parameter")
    add_model_args(p_land, with_data=True)
    p_land.add_argument("--param", type=int, required=True, help="parameter index (0-based)")
    p_land.add_argument("--range", required=True, help="start:stop:step")
    p_land.add_argument("--methods", default="ml,aml")
    p_land.add_argument("--alpha", default=None,
                        help="base parameter vector for the non-scanned components")
    p_land.add_argument("--out", required=True)
    p_land.add_argument("--no-plot", dest="plot", action="store_false")
    p_land.set_defaults(func=_cmd_landscape)

    p_chk = sub.add_parser("check-derivatives",
                           help="finite-difference report for sensitivities and gradients")
    add_model_args(p_chk)
    p_chk.add_argument("--alpha", required=True)
    p_chk.add_argument("--seed", type=int, required=True)
    p_chk.add_argument("--step", type=float, default=1e-5)
    p_chk.add_argument("--tol", type=float, default=1e-6)
    p_chk.set_defaults(func=_cmd_check_derivatives)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return int(args.func(args) or 0)
    except CliError as err:
        _emit_error("invalid_arguments", err)
        return 2
    except (
        FilterError,
        QPError,
        SolverError,
        SimulationError,
        TrajectoryFitError,
        BenchError,
        np.linalg.LinAlgError,
    ) as err:
        _emit_error("numerical_failure", err)
        return 3
    except (ValueError, KeyError, IndexError, FileNotFoundError) as err:
        _emit_error("invalid_arguments", err)
        return 2


def main() -> None:
    sys.exit(run_cli())
