"""Deterministic SVG figures: sample scatters and ablation trade-off curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed element ids and no timestamp make the output byte-stable
_RC = {"svg.hashsalt": "uotlab", "svg.fonttype": "path"}
_META = {"Date": None, "Creator": None}


def _save(fig, path):
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def emit_scatter_plot(samples, spec, path, forget_index=None, title=None, k_sigma=3.0,
                      max_points=5000):
    """Scatter of 2-D samples with mode centers and their ``k_sigma`` circles.

    The forget mode, when given, is drawn in red. At most ``max_points``
    samples are drawn (the first ones, so the output is deterministic).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)[:max_points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if len(samples):
        ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.4, color="tab:blue",
                   linewidths=0, rasterized=False)
    theta = np.linspace(0, 2 * np.pi, 120)
    for k, (c, s) in enumerate(zip(spec.center_array, spec.sigma_array)):
        color = "tab:red" if k == forget_index else "black"
        ax.plot(c[0] + k_sigma * s * np.cos(theta), c[1] + k_sigma * s * np.sin(theta),
                color=color, lw=1)
        ax.plot([c[0]], [c[1]], marker="x", color=color, ms=6)
    ax.set_xlim(-2, 2)
    ax.set_ylim(-1.5, 2)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    _save(fig, path)


def emit_tradeoff_plot(xs, pul, frechet, path, xlabel):
    """PUL and retain Frechet distance against a swept hyperparameter."""
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(xs, pul, marker="o", color="tab:blue")
    ax1.set_xlabel(xlabel)
    ax1.set_ylabel("PUL (%)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, frechet, marker="s", color="tab:orange")
    ax2.set_ylabel("retain Frechet", color="tab:orange")
    fig.tight_layout()
    _save(fig, path)
