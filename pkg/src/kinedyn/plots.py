"""Static figure export: trajectory overlays, gain heatmaps, loss curves.

All functions render to files through the Agg backend with fixed dpi and
stripped metadata so repeated runs of a seeded pipeline produce
byte-identical images.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 110
_SAVE_KW = {"dpi": DPI, "metadata": {"Software": ""}}


def _finish(fig, path):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_trajectories(path, series, coords=None, labels=None, dt=1.0):
    """Overlay named state trajectories.

    series: dict name -> (T, d) array. coords: which columns to draw
    (default: first three). One subplot per coordinate; a single-frame
    series degenerates to markers.
    """
    series = {k: np.atleast_2d(np.asarray(v, dtype=np.float64))
              for k, v in series.items()}
    dims = {v.shape[1] for v in series.values()}
    if len(dims) != 1:
        raise ValueError("series disagree on coordinate count")
    d = dims.pop()
    if coords is None:
        coords = list(range(min(3, d)))
    for c in coords:
        if not 0 <= c < d:
            raise ValueError(f"coordinate {c} out of range for dim {d}")
    fig, axes = plt.subplots(len(coords), 1, figsize=(8, 2.2 * len(coords)),
                             sharex=True, squeeze=False)
    for row, c in enumerate(coords):
        ax = axes[row, 0]
        for name, arr in series.items():
            t = np.arange(arr.shape[0]) * dt
            style = "o" if arr.shape[0] == 1 else "-"
            ax.plot(t, arr[:, c], style, label=name, linewidth=1.0,
                    markersize=4)
        ax.set_ylabel((labels or {}).get(c, f"coord {c}"))
        ax.grid(True, alpha=0.3)
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time [s]" if dt != 1.0 else "frame")
    fig.tight_layout()
    return _finish(fig, path)


def plot_gain_heatmap(path, gain, title="Kalman gain"):
    """(6+3N)^2 cell heatmap of a gain matrix."""
    gain = np.asarray(gain, dtype=np.float64)
    if gain.ndim != 2 or gain.shape[0] != gain.shape[1]:
        raise ValueError("gain must be a square matrix")
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    im = ax.imshow(gain, cmap="RdBu_r", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(f"{title} ({gain.shape[0]}x{gain.shape[1]})")
    ax.set_xlabel("state index")
    ax.set_ylabel("state index")
    fig.tight_layout()
    return _finish(fig, path)


def plot_loss_curves(path, history):
    """Per-epoch total loss plus any component columns in the history."""
    if not history:
        raise ValueError("empty history")
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [h["loss"] for h in history], "-o", markersize=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean window loss")
    ax1.set_yscale("log")
    ax1.grid(True, alpha=0.3)
    comp_keys = sorted(k for k in history[0]
                       if k not in ("epoch", "lr", "loss", "aborted_windows"))
    for k in comp_keys:
        ax2.plot(epochs, [h.get(k, np.nan) for h in history],
                 "-", linewidth=1.0, label=k)
    if comp_keys:
        ax2.legend(fontsize=7)
        ax2.set_yscale("log")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("component value")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    return _finish(fig, path)


def plot_gain_diag_bars(path, gain_diags, group_bounds=(3, 6),
                        title="per-frame gain diagonal"):
    """Mean gain-diagonal magnitude per frame, root groups highlighted.

    gain_diags: (T, nq) per-frame diagonals from the diagnostics stream.
    """
    g = np.asarray(gain_diags, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("expected (frames, nq) diagonals")
    a, b = group_bounds
    fig, ax = plt.subplots(figsize=(8, 3))
    t = np.arange(g.shape[0])
    ax.plot(t, g[:, :a].mean(axis=1), label="root translation")
    ax.plot(t, g[:, a:b].mean(axis=1), label="root rotation")
    ax.plot(t, g[:, b:].mean(axis=1), label="joints")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean diagonal gain")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _finish(fig, path)
