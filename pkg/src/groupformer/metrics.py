"""Evaluation metrics: position RMSE, box IoU, overlap rate, vehicle-count delta, speed deviation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import DomainConfig, NoiseConfig, PresenceRule, rng_stream
from .infer import presence_flags, speed_table
from .ingest import NormBox, Sample, dataset_hash, tile_origin


def _box(b) -> Tuple[float, float, float, float]:
    return b.as_tuple() if isinstance(b, NormBox) else tuple(float(v) for v in b)


def rmse_eq2(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None, scale=None) -> float:
    """``(1/n) * sqrt(sum of squared x, y, w, h differences)`` over the n valid boxes.

    Note the 1/n sits outside the square root; see :func:`rmse_conventional`
    for the usual sqrt-of-mean.
    """
    total, n = _sq_sum(pred, gt, valid, scale)
    if n == 0:
        raise ValueError("no scored boxes (n = 0)")
    return math.sqrt(total) / n


def rmse_conventional(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None, scale=None) -> float:
    """``sqrt(sum / n)``; equals ``rmse_eq2 * sqrt(n)``."""
    total, n = _sq_sum(pred, gt, valid, scale)
    if n == 0:
        raise ValueError("no scored boxes (n = 0)")
    return math.sqrt(total / n)


def _sq_sum(pred, gt, valid, scale) -> Tuple[float, int]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    if scale is not None:
        diff = diff * np.asarray(scale, dtype=np.float64)
    per_box = (diff ** 2).sum(-1)
    if valid is not None:
        per_box = per_box[np.asarray(valid, dtype=bool)]
    per_box = np.ravel(per_box)
    return math.fsum(per_box.tolist()), per_box.size


def iou(a, b) -> float:
    """IoU of two center-format (x, y, w, h) boxes; 0 for an empty union."""
    ax, ay, aw, ah = _box(a)
    bx, by, bw, bh = _box(b)
    ax0, ax1 = ax - max(aw, 0.0) / 2, ax + max(aw, 0.0) / 2
    ay0, ay1 = ay - max(ah, 0.0) / 2, ay + max(ah, 0.0) / 2
    bx0, bx1 = bx - max(bw, 0.0) / 2, bx + max(bw, 0.0) / 2
    by0, by1 = by - max(bh, 0.0) / 2, by + max(bh, 0.0) / 2
    # areas from the same corners as the intersection, so iou(a, a) is exactly 1
    inter = max(min(ax1, bx1) - max(ax0, bx0), 0.0) * max(min(ay1, by1) - max(ay0, by0), 0.0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _intersects(a, b) -> bool:
    ix = min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2)
    iy = min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2)
    return ix > 0 and iy > 0


def overlap_counts(boxes: np.ndarray, present: np.ndarray) -> Tuple[int, int]:
    """(vehicles intersecting another present box in their frame, present vehicles)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, *np.shape(boxes)[-2:])
    present = np.asarray(present, dtype=bool).reshape(boxes.shape[:2])
    n_overlap = n_all = 0
    for frame, flags in zip(boxes, present):
        idx = np.flatnonzero(flags)
        n_all += idx.size
        hit = np.zeros(idx.size, dtype=bool)
        for i in range(idx.size):
            for j in range(i + 1, idx.size):
                if _intersects(frame[idx[i]], frame[idx[j]]):
                    hit[i] = hit[j] = True
        n_overlap += int(hit.sum())
    return n_overlap, n_all


def overlap_rate(boxes: np.ndarray, present: np.ndarray) -> float:
    n_overlap, n_all = overlap_counts(boxes, present)
    if n_all == 0:
        raise ValueError("no present vehicles")
    return n_overlap / n_all


def dcn(pred_counts: Sequence[int], gt_counts: Sequence[int]) -> int:
    """Total absolute difference between predicted and true vehicle counts."""
    if len(pred_counts) != len(gt_counts):
        raise ValueError(f"length mismatch {len(pred_counts)} vs {len(gt_counts)}")
    return int(sum(abs(int(p) - int(g)) for p, g in zip(pred_counts, gt_counts)))


def nearest_rank(values: Sequence[float], q: float) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no values")
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def speed_dev_stats(pred_speeds, gt_speeds) -> Tuple[float, float]:
    """Mean and nearest-rank 95th percentile of |pred - gt| over pairs where both are defined."""
    p = np.asarray(pred_speeds, dtype=np.float64).ravel()
    g = np.asarray(gt_speeds, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError("speed arrays differ in shape")
    ok = np.isfinite(p) & np.isfinite(g)
    dev = np.abs(p[ok] - g[ok]).tolist()
    if not dev:
        raise ValueError("no valid speed pairs")
    return math.fsum(dev) / len(dev), nearest_rank(dev, 0.95)


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    n_scored: int
    rmse_eq2: float
    rmse_conventional: float
    rmse_eq2_m: float
    rmse_conventional_m: float
    overlap_rate: Optional[float]
    count_overlap: int
    count_all: int
    mean_iou: float
    dcn: int
    n_count_frames: int
    speed_dev_mean: Optional[float]
    speed_dev_p95: Optional[float]
    n_speed_pairs: int
    eps_w: float
    eps_h: float
    dt: float
    checkpoint_id: str = ""
    dataset_hash: str = ""
    config: dict = field(default_factory=dict)
    deviations: List[float] = field(default_factory=list, repr=False, compare=False)

    def as_dict(self) -> dict:
        out = asdict(self)
        del out["deviations"]
        return out

    def summary_lines(self) -> List[str]:
        def f(v):
            return "n/a" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))

        return [
            f"task: {self.task}",
            f"samples: {self.n_samples}  n = {self.n_scored} scored (sample, frame, slot) triples with gt present",
            f"RMSE, 1/n outside root (normalized): {f(self.rmse_eq2)}",
            f"RMSE, sqrt of mean (normalized): {f(self.rmse_conventional)}",
            f"RMSE, 1/n outside root (m): {f(self.rmse_eq2_m)}",
            f"RMSE, sqrt of mean (m): {f(self.rmse_conventional_m)}",
            f"overlap rate: {f(self.overlap_rate)} ({self.count_overlap}/{self.count_all})",
            f"mean IoU: {f(self.mean_iou)}",
            f"DCN: {self.dcn} over {self.n_count_frames} frames",
            f"speed deviation mean / p95 (m/s): {f(self.speed_dev_mean)} / {f(self.speed_dev_p95)} ({self.n_speed_pairs} pairs)",
            f"presence thresholds: eps_w={self.eps_w} eps_h={self.eps_h}  dt={self.dt}",
            f"checkpoint: {self.checkpoint_id}  dataset: {self.dataset_hash}",
        ]

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.as_dict().items() if k != "config"]
        lines += [f"config.{k} = {_fmt(v)}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["metric,value"]
        rows += [f"{k},{_fmt(v)}" for k, v in self.as_dict().items() if k != "config"]
        return "\n".join(rows) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


Predictor = Callable[[Sequence[Sample]], np.ndarray]
GapFiller = Callable[[Sample, Tuple[int, int]], np.ndarray]


class _Accumulator:
    def __init__(self, cfg: DomainConfig):
        self.scale = np.array([cfg.L, cfg.Wd, cfg.len_cap, cfg.wid_cap])
        self.sq: List[float] = []
        self.sq_m: List[float] = []
        self.ious: List[float] = []
        self.n_overlap = 0
        self.n_all = 0
        self.count_deltas: List[int] = []
        self.speed_dev: List[float] = []

    def add(self, pred, gt, gt_present, pred_full, gt_full, pred_present_full, gt_present_full, marks_full, scored_rows, cfg, origin, rule):
        pred_present = presence_flags(pred, rule)
        diff = pred - gt
        self.sq.extend(((diff ** 2).sum(-1))[gt_present].tolist())
        self.sq_m.extend((((diff * self.scale) ** 2).sum(-1))[gt_present].tolist())
        for f, s in np.argwhere(gt_present):
            self.ious.append(iou(pred[f, s], gt[f, s]))
        o, a = overlap_counts(pred, pred_present)
        self.n_overlap += o
        self.n_all += a
        self.count_deltas.extend(np.abs(pred_present.sum(-1) - gt_present.sum(-1)).tolist())
        sp = speed_table(pred_full, pred_present_full, marks_full, cfg, origin)[scored_rows]
        sg = speed_table(gt_full, gt_present_full, marks_full, cfg, origin)[scored_rows]
        ok = np.isfinite(sp) & np.isfinite(sg)
        self.speed_dev.extend(np.abs(sp[ok] - sg[ok]).tolist())

    def report(self, task, n_samples, cfg, rule, **extra) -> MetricsReport:
        n = len(self.sq)
        if n == 0:
            raise ValueError("no scored boxes (n = 0)")
        total, total_m = math.fsum(self.sq), math.fsum(self.sq_m)
        sdev = self.speed_dev
        return MetricsReport(
            task=task,
            n_samples=n_samples,
            n_scored=n,
            rmse_eq2=math.sqrt(total) / n,
            rmse_conventional=math.sqrt(total / n),
            rmse_eq2_m=math.sqrt(total_m) / n,
            rmse_conventional_m=math.sqrt(total_m / n),
            overlap_rate=(self.n_overlap / self.n_all) if self.n_all else None,
            count_overlap=self.n_overlap,
            count_all=self.n_all,
            mean_iou=math.fsum(self.ious) / len(self.ious),
            dcn=int(sum(self.count_deltas)),
            n_count_frames=len(self.count_deltas),
            speed_dev_mean=(math.fsum(sdev) / len(sdev)) if sdev else None,
            speed_dev_p95=nearest_rank(sdev, 0.95) if sdev else None,
            n_speed_pairs=len(sdev),
            eps_w=rule.eps_w,
            eps_h=rule.eps_h,
            dt=cfg.dt,
            deviations=list(sdev),
            **extra,
        )


def evaluate(
    predictor: Predictor,
    samples: Sequence[Sample],
    cfg: DomainConfig,
    rule: PresenceRule = PresenceRule(),
    batch_size: int = 256,
    checkpoint_id: str = "",
    config: Optional[dict] = None,
) -> MetricsReport:
    """Score next-``pred_len``-frame predictions from clean histories."""
    if not samples:
        raise ValueError("empty test set")
    H, P = cfg.hist_len, cfg.pred_len
    acc = _Accumulator(cfg)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds = np.asarray(predictor(chunk), dtype=np.float64)
        for s, pred in zip(chunk, preds):
            gt = s.boxes[H:H + P]
            gt_present = s.present[H:H + P]
            pred_full = np.concatenate([s.boxes[:H], pred])
            present_full = np.concatenate([s.present[:H], presence_flags(pred, rule)])
            acc.add(
                pred, gt, gt_present,
                pred_full, s.boxes[:H + P], present_full, s.present[:H + P], s.marks[:H + P],
                slice(H, H + P), cfg, tile_origin(s.meta), rule,
            )
    return acc.report(
        "prediction", len(samples), cfg, rule,
        checkpoint_id=checkpoint_id, dataset_hash=dataset_hash(samples), config=dict(config or {}),
    )


def eval_gaps(samples: Sequence[Sample], ncfg: NoiseConfig, max_len: int, seed: int) -> List[Tuple[int, int]]:
    """Deterministic per-sample compensation gaps for a test split."""
    from .noise import plan_gap

    rng = rng_stream(seed, "eval-gap")
    return [plan_gap(s.n_frames, ncfg, rng, max_len=max_len) for s in samples]


def evaluate_compensation(
    filler: GapFiller,
    samples: Sequence[Sample],
    gaps: Sequence[Tuple[int, int]],
    cfg: DomainConfig,
    rule: PresenceRule = PresenceRule(),
    checkpoint_id: str = "",
    config: Optional[dict] = None,
) -> MetricsReport:
    """Score gap reconstructions against the hidden frames."""
    if not samples:
        raise ValueError("empty test set")
    acc = _Accumulator(cfg)
    for s, (start, length) in zip(samples, gaps):
        pred = np.asarray(filler(s, (start, length)), dtype=np.float64)
        rows = slice(start, start + length)
        pred_full = s.boxes.copy()
        pred_full[rows] = pred
        present_full = s.present.copy()
        present_full[rows] = presence_flags(pred, rule)
        acc.add(
            pred, s.boxes[rows], s.present[rows],
            pred_full, s.boxes, present_full, s.present, s.marks,
            rows, cfg, tile_origin(s.meta), rule,
        )
    return acc.report(
        "compensation", len(samples), cfg, rule,
        checkpoint_id=checkpoint_id, dataset_hash=dataset_hash(samples), config=dict(config or {}),
    )
