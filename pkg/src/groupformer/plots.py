"""Report figures rendered to image files next to the CSV outputs."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import DomainConfig  # noqa: E402
from .infer import extract_trajectories  # noqa: E402


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curve(steps: Sequence[int], losses: Sequence[float], path: str, title: str = "training loss") -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE")
    ax.set_title(title)
    return _save(fig, path)


def trajectories(
    boxes: np.ndarray,
    present: np.ndarray,
    marks: np.ndarray,
    cfg: DomainConfig,
    path: str,
    origin: Tuple[float, float] = (0.0, 0.0),
    split_mark: Optional[int] = None,
) -> str:
    """Longitudinal position against time, one line per slot segment.

    Frames at or after ``split_mark`` are drawn dashed (model output).
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for slot, segs in extract_trajectories(boxes, present, marks, cfg, origin).items():
        color = colors[slot % len(colors)]
        for seg in segs:
            t = seg.marks * cfg.dt
            if split_mark is None:
                ax.plot(t, seg.x, color=color, lw=1)
                continue
            hist = seg.marks < split_mark
            ax.plot(t[hist], seg.x[hist], color=color, lw=1)
            # overlap one point so the dashed part joins the solid part
            fut = seg.marks >= split_mark - 1
            ax.plot(t[fut], seg.x[fut], color=color, lw=1, ls="--")
    if split_mark is not None:
        ax.axvline(split_mark * cfg.dt, color="0.5", lw=0.6)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("x (m)")
    return _save(fig, path)


def speed_deviation_hist(deviations: Sequence[float], path: str, p95: Optional[float] = None) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(np.asarray(deviations, dtype=float), bins=50)
    if p95 is not None:
        ax.axvline(p95, color="k", ls="--", lw=0.8, label=f"p95 = {p95:.3g} m/s")
        ax.legend()
    ax.set_xlabel("|speed deviation| (m/s)")
    ax.set_ylabel("pairs")
    return _save(fig, path)
