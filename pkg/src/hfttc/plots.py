"""Deterministic SVG figures for risk distributions.

Rendering is pinned to the Agg backend with a fixed hash salt and no date
metadata, so identical inputs produce byte-identical files.
"""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .safety import PairRisk, SafetyThresholds, cdf_series  # noqa: E402

_SVG_OPTS = {"format": "svg", "metadata": {"Date": None}}


def _setup():
    plt.rcParams["svg.hashsalt"] = "hfttc"


def render_pair_risk(risk: PairRisk, thr: SafetyThresholds, path,
                     show_traditional: bool = False) -> None:
    """Two panels: collision-time PMF/CDF and its inverse-rate twin."""
    _setup()
    fig, (ax_ttc, ax_ittc) = plt.subplots(1, 2, figsize=(9, 3.5))
    times, cdf = cdf_series(risk.ttc, thr)

    if risk.ttc.atoms:
        ts, ps = zip(*risk.ttc.atoms)
        ax_ttc.stem(ts, ps, linefmt="C0-", markerfmt="C0o", basefmt=" ",
                    label="PMF")
    ax_ttc.step(times, cdf, where="post", color="C1", linestyle="--", label="CDF")
    if show_traditional and risk.traditional is not None:
        ax_ttc.step([0, risk.traditional, thr.horizon], [0, 1, 1], where="post",
                    color="C3", alpha=0.7, label="traditional")
    ax_ttc.set_xlim(0, thr.horizon)
    ax_ttc.set_ylim(0, 1.05)
    ax_ttc.set_xlabel("time to collision [s]")
    ax_ttc.set_title(f"{risk.host_id} vs {risk.ambient_id} ({risk.behavior})")
    ax_ttc.legend(loc="upper left", fontsize=8)

    if risk.ittc.atoms:
        vs, ps = zip(*risk.ittc.atoms)
        ax_ittc.stem(vs, ps, linefmt="C0-", markerfmt="C0o", basefmt=" ", label="PMF")
        upper = max(vs) * 1.2
    else:
        upper = 1.0
    grid = [i * upper / 200 for i in range(201)]
    ax_ittc.step(grid, [risk.ittc.cdf(v) for v in grid], where="post",
                 color="C1", linestyle="--", label="CDF")
    ax_ittc.set_xlim(0, upper)
    ax_ittc.set_ylim(0, 1.05)
    ax_ittc.set_xlabel("inverse TTC [1/s]")
    ax_ittc.legend(loc="upper left", fontsize=8)

    fig.tight_layout()
    fig.savefig(path, **_SVG_OPTS)
    plt.close(fig)


def write_cdf_csv(risk: PairRisk, thr: SafetyThresholds, path) -> None:
    """CDF samples on the search grid; columns t, F(t)."""
    times, cdf = cdf_series(risk.ttc, thr)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cdf"])
        for t, f in zip(times, cdf):
            writer.writerow([repr(round(float(t), 6)), repr(float(f))])
