"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
ARM_COLORS = {"real": "#4d4d4d", "pix2pixhd": "#1f77b4", "spade": "#d62728"}
# PNG metadata pinned so reruns are byte-identical.
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_pr_curves(curves_by_arm: dict[str, list], path, iou_label: str = "0.50") -> Path:
    """Precision-recall sweep per arm at one IoU threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for arm, points in curves_by_arm.items():
            if not points:
                continue
            r, p = np.array(points).T
            ax.step(np.concatenate([[0.0], r]), np.concatenate([[p[0]], p]), where="post",
                    label=arm, color=ARM_COLORS.get(arm))
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"PR sweep at IoU {iou_label}")
        ax.legend(loc="lower left")
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_comparison(rows: list[tuple[str, dict[str, float | None]]], path) -> Path:
    """One panel per metric, one bar per arm. ``rows`` is ``[(metric, {arm: value})]``."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(rows), figsize=(2.2 * len(rows), 3.0))
        for ax, (metric, values) in zip(np.atleast_1d(axes), rows):
            arms = list(values)
            heights = [np.nan if values[a] is None else values[a] for a in arms]
            ax.bar(range(len(arms)), heights, color=[ARM_COLORS.get(a, "#888888") for a in arms])
            ax.set_xticks(range(len(arms)))
            ax.set_xticklabels(arms, rotation=30, ha="right")
            ax.set_title(metric)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_history(history: list[dict], path, title: str = "") -> Path:
    steps = [h["step"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.0))
        ax0.plot(steps, [h["gan_d"] for h in history], lw=0.8, label="D adversarial")
        ax0.plot(steps, [h["gan_g"] for h in history], lw=0.8, label="G adversarial")
        ax0.plot(steps, [h["fm"] for h in history], lw=0.8, label="feature matching")
        ax0.legend(loc="upper right")
        ax0.set_ylabel("loss")
        ax1.plot(steps, [h["pixel_std"] for h in history], lw=0.8, color="k")
        flagged = [h["step"] for h in history if h["collapse_flag"]]
        if flagged:
            ax1.plot(flagged, [0.0] * len(flagged), "rx", label="collapse flag")
            ax1.legend(loc="upper right")
        ax1.set_ylabel("output pixel std")
        ax1.set_xlabel("step")
        if title:
            ax0.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_sample_grid(masks: list[np.ndarray], images: list[np.ndarray], path, ncols: int = 4) -> Path:
    """Label maps on the top row of each pair, generated tiles beneath."""
    n = min(len(masks), len(images), ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, max(n, 1), figsize=(2.0 * max(n, 1), 4.0), squeeze=False)
        for j in range(max(n, 1)):
            for ax in axes[:, j]:
                ax.axis("off")
            if j < n:
                axes[0, j].imshow(masks[j], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                axes[1, j].imshow(images[j], interpolation="nearest")
        fig.tight_layout()
        return _save(fig, path)
