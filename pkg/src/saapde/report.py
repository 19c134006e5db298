"""Figure rendering for stored sweep bundles.

Renders the consistency trend (median distance to the reference set per
sample size, with the interquartile band) next to the re-rendered summary
table.  Uses the Agg backend so report generation works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def consistency_figure(stats, kind: str, out_path, quad: bool = False):
    """Median distance trend with IQR band; log-log for Monte Carlo sweeps."""
    sizes = np.asarray(stats.sizes, dtype=float)
    med = np.asarray(stats.medians)
    q25 = np.asarray(stats.q25)
    q75 = np.asarray(stats.q75)

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.fill_between(sizes, q25, q75, alpha=0.25, color="C0", label="IQR")
    ax.plot(sizes, med, "o-", color="C0", label="median")
    if quad:
        ax.set_xlabel("scenario count (tensor level)")
        ax.set_xscale("log")
        positive = med > 0
        if positive.any():
            ax.set_yscale("log")
    else:
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sample size N")
        if np.isfinite(stats.slope_loglog):
            ref = med[0] * (sizes / sizes[0]) ** -0.5
            ax.plot(sizes, ref, "--", color="gray", label=r"$N^{-1/2}$")
    ax.set_ylabel("distance to reference set")
    ax.set_title(f"{kind}: consistency trend (slope {stats.slope_loglog:+.2f})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def residual_figure(records, kind: str, out_path):
    """Solver residual vs sample size, against the eps_N tolerance line."""
    sizes = sorted({r["N"] for r in records})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xs = [r["N"] for r in records]
    ys = [r["residual"] for r in records]
    ax.scatter(xs, ys, s=12, alpha=0.6, label="solver residual")
    ref = [max(r["ref_residual"] for r in records if r["N"] == N) for N in sizes]
    ax.plot(sizes, ref, "s--", color="C3", ms=4, label="residual under reference")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sample size N")
    ax.set_ylabel("stationarity residual")
    ax.set_title(f"{kind}: residuals")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
