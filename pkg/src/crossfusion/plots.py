"""Figure rendering for reports. Headless, byte-deterministic output.

Figures are drawn with matplotlib's Agg backend; SVG output gets a fixed hash
salt and no date metadata so identical inputs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "crossfusion"

import matplotlib.pyplot as plt
import numpy as np

from .survival import KMCurve

_SAVE_KW = {"dpi": 120, "metadata": {"Date": None}}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kw = dict(_SAVE_KW)
    if path.suffix.lower() == ".png":
        kw["metadata"] = {}  # PNG writer rejects the Date key
    fig.savefig(path, **kw)
    plt.close(fig)


def _steps(curve: KMCurve) -> tuple[np.ndarray, np.ndarray]:
    times = np.concatenate([[0.0], curve.times])
    surv = np.concatenate([[1.0], curve.survival])
    return times, surv


def km_figure(km_high: KMCurve, km_low: KMCurve, p_value: float | None, path) -> None:
    """Two-group survival step plot: high risk in red, low risk in blue."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for curve, color, label in ((km_high, "red", "high risk"), (km_low, "blue", "low risk")):
        t, s = _steps(curve)
        ax.step(t, s, where="post", color=color, label=label)
    ax.set_xlabel("time (days)")
    ax.set_ylabel("survival probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower left")
    if p_value is not None:
        ax.set_title(f"log-rank p = {p_value:.2e}")
    fig.tight_layout()
    _save(fig, path)


def heatmap_figure(coords: np.ndarray, scores: np.ndarray, layer: str, path) -> None:
    """Patch-grid attention scores rendered on the slide's coordinate layout."""
    fig, ax = plt.subplots(figsize=(5, 4))
    sc = ax.scatter(
        coords[:, 0], coords[:, 1], c=scores, cmap="viridis", marker="s", s=140,
        vmin=0.0, vmax=1.0,
    )
    ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.set_xlabel("grid x")
    ax.set_ylabel("grid y")
    ax.set_title(layer)
    fig.colorbar(sc, ax=ax, label="attention score")
    fig.tight_layout()
    _save(fig, path)


def loss_curves_figure(epoch_losses: dict[int, list[float]], path) -> None:
    """Per-fold mean training loss by epoch."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for fold, losses in sorted(epoch_losses.items()):
        ax.plot(range(len(losses)), losses, label=f"fold {fold}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
