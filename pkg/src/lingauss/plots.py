"""Figure rendering for the report-producing CLI paths.

Renders the benchmark and landscape tables to PNG files next to their
delimited outputs.  Imported lazily by the CLI so library users never pay
the matplotlib import; uses the Agg backend (no display needed).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import ExperimentReport, LandscapeTable

__all__ = ["plot_mse_report", "plot_landscape"]

_METHOD_STYLE = {
    "ml": {"color": "tab:blue", "marker": "o"},
    "aml": {"color": "tab:orange", "marker": "s"},
    "to": {"color": "tab:green", "marker": "^"},
}


def _style(method: str) -> dict:
    return _METHOD_STYLE.get(method, {"marker": "."})


def plot_mse_report(report: ExperimentReport, path) -> None:
    """Log-log MSE against horizon length, one curve per method.

    For reports with a model/noise split (heat transfer), two extra panels
    show the split MSEs.
    """
    has_split = any(c.mse_model is not None for c in report.cells)
    n_panels = 3 if has_split else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(4.2 * n_panels, 3.4), squeeze=False)
    panels = [("mse", "total MSE")]
    if has_split:
        panels += [("mse_model", "model-parameter MSE"), ("mse_noise", "noise-parameter MSE")]
    for ax, (attr, title) in zip(axes[0], panels):
        for method in report.methods:
            cells = sorted(
                (c for c in report.cells if c.method == method), key=lambda c: c.n_steps
            )
            values = [getattr(c, attr) for c in cells]
            ax.loglog([c.n_steps for c in cells], values, label=method.upper(), **_style(method))
        fit = report.rate_fits.get("ml") or next(iter(report.rate_fits.values()), None)
        if attr == "mse" and fit is not None:
            ns = np.array(sorted({c.n_steps for c in report.cells}), dtype=float)
            ax.loglog(ns, fit.constant * ns**fit.slope, "k:", lw=1, label=f"~N^{fit.slope:.2f}")
        ax.set_xlabel("N")
        ax.set_ylabel(title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
    fig.suptitle(f"{report.example}: m={report.m}, seed={report.base_seed}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_landscape(table: LandscapeTable, path) -> None:
    """Normalized objective profiles along the scanned parameter."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method in sorted(table.raw):
        values = table.normalized[method]
        label = method.upper()
        if values is None:
            values = table.raw[method]
            label += " (raw, degenerate scale)"
        ax.plot(table.grid, values, label=label, lw=1.5,
                color=_style(method).get("color"))
    ax.set_xlabel(f"parameter {table.param_index}")
    ax.set_ylabel("objective (affinely rescaled to [0, 1])")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
