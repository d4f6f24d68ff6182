"""Prediction, continuous rollout, presence detection and trajectory extraction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import DomainConfig, NumericAbort, PresenceRule
from .ingest import Sample, denormalize_array
from .net import FrameTransformer

PREDICTION_HEADER = ("loop", "frame_mark", "slot", "x_m", "y_m", "len_m", "wid_m", "present", "speed_mps")


@dataclass
class Prediction:
    boxes: np.ndarray  # (F, max_slots, 4) normalized, unclamped
    present: np.ndarray  # (F, max_slots)
    marks: np.ndarray  # (F,)
    loops: np.ndarray  # (F,) 1-based loop index
    provenance: dict = field(default_factory=dict)
    final_window: Optional[np.ndarray] = None  # (hist_len, max_slots, 4) model input after the last loop
    final_mark: int = 0  # mark of the last window frame

    @property
    def n_frames(self) -> int:
        return self.boxes.shape[0]


def presence(frame: np.ndarray, rule: PresenceRule = PresenceRule()) -> Tuple[np.ndarray, int]:
    """Slot flags (w > eps_w and h > eps_h) and their count for one frame (max_slots, 4)."""
    frame = np.asarray(frame)
    flags = (frame[..., 2] > rule.eps_w) & (frame[..., 3] > rule.eps_h)
    return flags, int(flags.sum())


def presence_flags(boxes: np.ndarray, rule: PresenceRule = PresenceRule()) -> np.ndarray:
    boxes = np.asarray(boxes)
    return (boxes[..., 2] > rule.eps_w) & (boxes[..., 3] > rule.eps_h)


def _as_history(history: Union[Sample, np.ndarray], hist_len: int) -> np.ndarray:
    boxes = history.boxes if isinstance(history, Sample) else np.asarray(history, dtype=np.float64)
    if boxes.shape[0] != hist_len:
        raise ValueError(f"history has {boxes.shape[0]} frames, expected {hist_len}")
    return boxes


@torch.no_grad()
def predict_windows(model: FrameTransformer, windows: np.ndarray) -> np.ndarray:
    """Autoregressive prediction for a batch of history windows.

    Args:
        windows: (B, hist_len, max_slots, 4). Marks are taken as 0..hist_len-1.

    Returns:
        (B, pred_len, max_slots, 4) float64.
    """
    cfg = model.cfg
    B, H = windows.shape[:2]
    flat = torch.as_tensor(windows.reshape(B, H, -1), dtype=model.dtype)
    marks = torch.arange(H).expand(B, H)
    masked = torch.zeros(B, H, dtype=torch.bool)
    out = model.generate(flat, marks, masked, flat[:, -1], torch.full((B,), H - 1), cfg.pred_len)
    return out.double().numpy().reshape(B, cfg.pred_len, cfg.max_slots, 4)


def predict_batch(model: FrameTransformer, samples: Sequence[Sample]) -> np.ndarray:
    """Predictions for the future frames of full samples from their clean histories."""
    H = model.cfg.hist_len
    return predict_windows(model, np.stack([s.boxes[:H] for s in samples]))


def predict(model: FrameTransformer, history: Union[Sample, np.ndarray], rule: PresenceRule = PresenceRule(), first_mark: Optional[int] = None) -> Prediction:
    cfg = model.cfg
    boxes = _as_history(history, cfg.hist_len)
    out = predict_windows(model, boxes[None])[0]
    start = cfg.hist_len if first_mark is None else first_mark
    return Prediction(
        out,
        presence_flags(out, rule),
        np.arange(start, start + cfg.pred_len),
        np.ones(cfg.pred_len, dtype=np.int64),
    )


def clean_for_feedback(frames: np.ndarray, rule: PresenceRule) -> np.ndarray:
    """Zero the slots the presence rule counts as empty."""
    out = frames.copy()
    out[~presence_flags(frames, rule)] = 0.0
    return out


def rollout(
    model: FrameTransformer,
    history: Union[Sample, np.ndarray],
    loops: int,
    rule: PresenceRule = PresenceRule(),
    first_mark: Optional[int] = None,
    first_loop: int = 1,
) -> Prediction:
    """Continuous prediction: predict, append to the window, slide, repeat.

    After each loop the window keeps its last ``hist_len`` frames, so from the
    third loop on (with pred_len = hist_len / 2) the input is entirely model
    output. Slots judged empty are zeroed before being fed back.
    """
    if loops < 1:
        raise ValueError("loops must be >= 1")
    cfg = model.cfg
    window = _as_history(history, cfg.hist_len).astype(np.float64)
    mark = cfg.hist_len if first_mark is None else first_mark
    frames, marks, loop_idx = [], [], []
    for k in range(loops):
        out = predict_windows(model, window[None])[0]
        if not np.isfinite(out).all():
            raise NumericAbort(f"non-finite prediction in rollout loop {first_loop + k}")
        frames.append(out)
        marks.append(np.arange(mark, mark + cfg.pred_len))
        loop_idx.append(np.full(cfg.pred_len, first_loop + k))
        mark += cfg.pred_len
        window = np.concatenate([window, clean_for_feedback(out, rule)])[-cfg.hist_len:]
    boxes = np.concatenate(frames)
    return Prediction(
        boxes,
        presence_flags(boxes, rule),
        np.concatenate(marks),
        np.concatenate(loop_idx),
        final_window=window,
        final_mark=mark - 1,
    )


def continue_rollout(model: FrameTransformer, previous: Prediction, loops: int, rule: PresenceRule = PresenceRule()) -> Prediction:
    return rollout(model, previous.final_window, loops, rule, first_mark=previous.final_mark + 1, first_loop=int(previous.loops[-1]) + 1)


@dataclass
class Segment:
    slot: int
    marks: np.ndarray
    x: np.ndarray
    y: np.ndarray
    length: np.ndarray
    width: np.ndarray
    speed: np.ndarray  # m/s; NaN at the first point of a segment


def extract_trajectories(
    boxes: np.ndarray,
    present: np.ndarray,
    marks: np.ndarray,
    cfg: DomainConfig,
    origin: Tuple[float, float] = (0.0, 0.0),
) -> Dict[int, List[Segment]]:
    """Per-slot runs of consecutive present frames in meters, with speeds."""
    meters = denormalize_array(boxes, cfg, origin)
    out: Dict[int, List[Segment]] = {}
    n_frames, n_slots = present.shape
    for slot in range(n_slots):
        segs = []
        f = 0
        while f < n_frames:
            if not present[f, slot]:
                f += 1
                continue
            start = f
            while f + 1 < n_frames and present[f + 1, slot] and marks[f + 1] == marks[f] + 1:
                f += 1
            sel = meters[start:f + 1, slot]
            speed = np.full(sel.shape[0], np.nan)
            if sel.shape[0] > 1:
                speed[1:] = np.hypot(np.diff(sel[:, 0]), np.diff(sel[:, 1])) / cfg.dt
            segs.append(Segment(slot, np.asarray(marks[start:f + 1]), sel[:, 0], sel[:, 1], sel[:, 2], sel[:, 3], speed))
            f += 1
        if segs:
            out[slot] = segs
    return out


def speed_table(boxes, present, marks, cfg: DomainConfig, origin=(0.0, 0.0)) -> np.ndarray:
    """(F, max_slots) speeds, NaN where undefined."""
    table = np.full(present.shape, np.nan)
    index = {int(m): i for i, m in enumerate(marks)}
    for slot, segs in extract_trajectories(boxes, present, marks, cfg, origin).items():
        for seg in segs:
            for m, v in zip(seg.marks, seg.speed):
                table[index[int(m)], slot] = v
    return table


def prediction_csv(
    history: Optional[Sample],
    pred: Optional[Prediction],
    cfg: DomainConfig,
    origin: Tuple[float, float] = (0.0, 0.0),
    rule: PresenceRule = PresenceRule(),
) -> str:
    """Rows for every slot of every frame; history frames (if given) carry loop 0."""
    parts_boxes, parts_present, parts_marks, parts_loops = [], [], [], []
    if history is not None:
        parts_boxes.append(history.boxes)
        parts_present.append(history.present)
        parts_marks.append(history.marks)
        parts_loops.append(np.zeros(history.n_frames, dtype=np.int64))
    if pred is not None:
        parts_boxes.append(pred.boxes)
        parts_present.append(pred.present)
        parts_marks.append(pred.marks)
        parts_loops.append(pred.loops)
    boxes = np.concatenate(parts_boxes)
    present = np.concatenate(parts_present)
    marks = np.concatenate(parts_marks)
    loops = np.concatenate(parts_loops)
    speeds = speed_table(boxes, present, marks, cfg, origin)
    meters = denormalize_array(boxes, cfg, origin)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for f in range(boxes.shape[0]):
        for s in range(boxes.shape[1]):
            x, y, ln, wd = (f"{v:.9g}" for v in meters[f, s])
            sp = "" if math.isnan(speeds[f, s]) else f"{speeds[f, s]:.9g}"
            w.writerow([int(loops[f]), int(marks[f]), s, x, y, ln, wd, int(present[f, s]), sp])
    return buf.getvalue()
