"""Figures rendered from the CSV files of a finished run.

Plotting reads only the written CSVs, so it can be re-run on old results and
never feeds back into the numbers. Figures land next to the CSVs as PNG.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_csv  # noqa: E402

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.dpi": 150,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def figure(width: float = 4.5):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    return fig, ax


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _acw(folder: Path) -> list[Path]:
    d = read_csv(folder / "acw.csv")
    fig, ax = figure()
    ax.errorbar(d["K"], d["lambda_mc"], yerr=1.96 * d["stderr"], fmt="o", label="Monte Carlo")
    ax.plot(d["K"], d["lambda_quadrature"], "s", mfc="none", label="quadrature")
    ax.set_xlabel("K")
    ax.set_ylabel("top exponent")
    ax.legend()
    return [_save(fig, folder / "acw.png")]


def _mixing(folder: Path) -> list[Path]:
    d = read_csv(folder / "mixing.csv")
    fig, ax = figure()
    for c in d:
        if c.startswith("log_hm1_sq_K"):
            ax.plot(d["t"], d[c] / np.log(10), label=c.replace("log_hm1_sq_", ""))
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\log_{10} E\|u_t\|^2_{H^{-1}}$")
    ax.legend()
    return [_save(fig, folder / "mixing.png")]


def _lyapunov(folder: Path) -> list[Path]:
    d = read_csv(folder / "lyapunov.csv")
    fig, ax = figure()
    ax.errorbar(d["K"], d["lambda"], yerr=1.96 * d["stderr"], fmt="o", label="measured")
    ok = np.isfinite(d["bound"])
    ax.plot(d["K"][ok], d["bound"][ok], "v", label="upper bound")
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("K")
    ax.set_ylabel("top exponent")
    ax.legend()
    return [_save(fig, folder / "lyapunov.png")]


def _ergodicity(folder: Path) -> list[Path]:
    d = read_csv(folder / "ergodicity.csv")
    fig, ax = figure()
    for c in d:
        if c.startswith("hm1_"):
            y = np.maximum(d[c], 1e-300)
            ax.semilogy(d["t"], y, color="C0" if "K0Kc" not in c else "C3", alpha=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\|\rho_t - 1\|_{H^{-1}}$")
    return [_save(fig, folder / "ergodicity.png")]


def _steady(folder: Path) -> list[Path]:
    d = read_csv(folder / "steady_single_mode.csv")
    fig, ax = figure()
    ax.plot(d["nu"], d["order_parameter"], "o-")
    ax.set_xlabel(r"$\nu$")
    ax.set_ylabel("order parameter")
    out = [_save(fig, folder / "steady_single_mode.png")]
    d2 = read_csv(folder / "steady_two_mode.csv")
    fig, ax = figure()
    ax.plot(d2["nu"], d2["free_energy"], "o-", label="nonuniform")
    ax.plot(d2["nu"], d2["free_energy_uniform"], "--", label="uniform")
    ax.set_xlabel(r"$\nu$")
    ax.set_ylabel("free energy")
    ax.legend()
    out.append(_save(fig, folder / "steady_two_mode.png"))
    return out


def _particles(folder: Path) -> list[Path]:
    d = read_csv(folder / "particles.csv")
    fig, ax = figure()
    ax.loglog(d["N"], d["max_error"], "o-", label="max mode error")
    ax.loglog(d["N"], 3 / np.sqrt(d["N"]), "--", color="0.5", label=r"$3/\sqrt{N}$")
    ax.set_xlabel("N")
    ax.set_ylabel("error")
    ax.legend()
    return [_save(fig, folder / "particles.png")]


def _convergence(folder: Path) -> list[Path]:
    out = []
    d = read_csv(folder / "scheme_gap.csv")
    fig, ax = figure()
    ax.loglog(d["dt"], d["rms_gap"], "o-", label="pathwise")
    ax.loglog(d["dt"], d["mean_field_gap"], "s-", label="ensemble mean")
    ax.loglog(d["dt"], d["rms_gap"][0] * d["dt"] / d["dt"][0], ":", color="0.5", label="slope 1")
    ax.set_xlabel("dt")
    ax.set_ylabel(r"$L^2$ gap")
    ax.legend()
    out.append(_save(fig, folder / "scheme_gap.png"))
    w = read_csv(folder / "wong_zakai_gap.csv")
    fig, ax = figure()
    ax.semilogy(w["m"], w["sup_gap"], "o-")
    ax.set_xlabel("dyadic level m")
    ax.set_ylabel("sup gap")
    out.append(_save(fig, folder / "wong_zakai_gap.png"))
    return out


PLOTTERS = {
    "acw": _acw,
    "mixing": _mixing,
    "lyapunov": _lyapunov,
    "ergodicity": _ergodicity,
    "steady": _steady,
    "particles": _particles,
    "convergence": _convergence,
}


def plot_experiment(folder: str | Path) -> list[Path]:
    """Render the figures for the run stored in ``folder``; returns the PNG paths."""
    folder = Path(folder)
    with open(folder / "manifest.json") as fh:
        experiment = json.load(fh)["experiment"]
    with plt.rc_context(STYLE):
        return PLOTTERS[experiment](folder)
