"""Report figures.  Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import sta  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}
# keep saved files reproducible
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def direction_rgb(y) -> np.ndarray:
    """``|principal direction|`` as RGB, scaled by ``|y|`` relative to its maximum."""
    d, mag = sta.principal_directions(y.data.reshape(-1, 5))
    top = mag.max() if mag.size and mag.max() > 0 else 1.0
    rgb = np.abs(d) * (mag / top)[:, None]
    return np.clip(rgb, 0, 1).reshape(y.grid.dims + (3,))


def plot_field_slices(y, path, title: str = "", label=None):
    """Central slices of ``|y|`` and the direction-colored map (optionally the label too)."""
    rows = [("prediction", y)] + ([("label", label)] if label is not None else [])
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2 * len(rows), 3, figsize=(7.5, 2.6 * 2 * len(rows)))
        axes = np.atleast_2d(axes)
        for r, (name, f) in enumerate(rows):
            mag = f.magnitude()
            rgb = direction_rgb(f)
            c = [d // 2 for d in f.grid.dims]
            for ax_i, (sl, plane) in enumerate(
                [((c[0], slice(None), slice(None)), "sagittal"), ((slice(None), c[1], slice(None)), "coronal"), ((slice(None), slice(None), c[2]), "axial")]
            ):
                a = axes[2 * r, ax_i]
                im = a.imshow(mag[sl].T, origin="lower", cmap="magma")
                a.set_title(f"{name} |y|, {plane}")
                a.set_xticks([])
                a.set_yticks([])
                fig.colorbar(im, ax=a, fraction=0.046)
                b = axes[2 * r + 1, ax_i]
                b.imshow(np.transpose(rgb[sl], (1, 0, 2)), origin="lower")
                b.set_title(f"{name} direction, {plane}")
                b.set_xticks([])
                b.set_yticks([])
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_training(rows, path):
    """Per-scale residuals and feature counts from training report rows."""
    scales = [r["scale"] for r in rows]
    with plt.rc_context(RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 2.8), layout="constrained")
        x = np.arange(len(rows))
        a.bar(x, [r["residual"] for r in rows], color="0.4")
        a.set_xticks(x, [str(s) for s in scales])
        a.set_xlabel("scale s")
        a.set_ylabel("relative residual")
        b.bar(x - 0.2, [r["N"] for r in rows], 0.4, label="N (quadratic)")
        b.bar(x + 0.2, [r["N_s"] for r in rows], 0.4, label="N_s (link)")
        b.set_xticks(x, [str(s) for s in scales])
        b.set_xlabel("scale s")
        b.set_ylabel("feature count")
        b.legend(frameon=False)
        _save(fig, path)


def plot_retest(x1, x2, path, names=None, icc_value=None):
    """Scatter of session 1 against session 2 with the identity line."""
    x1 = np.asarray(x1, float)
    x2 = np.asarray(x2, float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        ax.scatter(x1, x2, s=14, color="k")
        if names is not None:
            for n, u, v in zip(names, x1, x2):
                ax.annotate(str(n), (u, v), fontsize=6, xytext=(2, 2), textcoords="offset points")
        lo = min(x1.min(), x2.min()) if len(x1) else 0.0
        hi = max(x1.max(), x2.max()) if len(x1) else 1.0
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
        ax.set_xlabel("apparent volume, session 1")
        ax.set_ylabel("apparent volume, session 2")
        if icc_value is not None:
            ax.set_title(f"ICC = {icc_value:.3f}")
        _save(fig, path)


def plot_streamlines(lines, path, grid=None, max_lines: int = 2000):
    """Streamlines projected onto the three coordinate planes."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
        for ax, (i, j, name) in zip(axes, [(1, 2, "y-z"), (0, 2, "x-z"), (0, 1, "x-y")]):
            for p in lines[:max_lines]:
                ax.plot(p[:, i], p[:, j], lw=0.3, color="C0", alpha=0.5)
            if grid is not None:
                lo = grid.index_to_world(np.zeros(3))
                hi = grid.index_to_world(np.asarray(grid.dims) - 1)
                ax.set_xlim(lo[i], hi[i])
                ax.set_ylim(lo[j], hi[j])
            ax.set_aspect("equal")
            ax.set_title(name)
        _save(fig, path)
