"""Pretraining corruptions: Poisson-span frame masking and frame swapping.

Only history frames (the first ``hist_len``) are ever corrupted; the target
frames stay clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import NoiseConfig
from .ingest import Sample

Span = Tuple[int, int]  # (start, length)


@dataclass
class NoisePlan:
    mask_spans: List[Span] = field(default_factory=list)
    swap: Optional[Tuple[int, int]] = None

    @property
    def n_masked(self) -> int:
        return sum(length for _, length in self.mask_spans)

    def to_dict(self) -> dict:
        return {"mask_spans": [list(s) for s in self.mask_spans], "swap": list(self.swap) if self.swap else None}

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePlan":
        swap = d.get("swap")
        return cls([tuple(s) for s in d.get("mask_spans", [])], tuple(swap) if swap else None)


def mask_total(hist_len: int, mask_rate: float) -> int:
    """Number of frames to mask; halves round up."""
    return int(np.floor(mask_rate * hist_len + 0.5))


def draw_span_lengths(total: int, lam: float, rng: np.random.Generator) -> List[int]:
    """Poisson span lengths summing to ``total``; zero draws are rejected, the last draw truncated."""
    lengths = []
    remaining = total
    while remaining > 0:
        n = int(rng.poisson(lam))
        if n == 0:
            continue
        n = min(n, remaining)
        lengths.append(n)
        remaining -= n
    return lengths


def place_spans(lengths: List[int], n: int, rng: np.random.Generator, offset: int = 0) -> List[Span]:
    """Uniformly random non-overlapping placement of spans inside ``[offset, offset + n)``."""
    if not lengths:
        return []
    lengths = [lengths[i] for i in rng.permutation(len(lengths))]
    free = n - sum(lengths)
    if free < 0:
        raise ValueError(f"spans of total length {sum(lengths)} do not fit in {n} frames")
    k = len(lengths)
    # Choose k slots among free + k "gap or span" positions (stars and bars).
    picks = np.sort(rng.choice(free + k, size=k, replace=False))
    spans = []
    used = 0
    for i, (pick, length) in enumerate(zip(picks, lengths)):
        start = int(pick) - i + used
        spans.append((offset + start, length))
        used += length
    return spans


def plan_mask(hist_len: int, cfg: NoiseConfig, rng: np.random.Generator) -> List[Span]:
    if hist_len < 1:
        raise ValueError("hist_len must be >= 1")
    total = mask_total(hist_len, cfg.mask_rate)
    lengths = draw_span_lengths(total, cfg.span_lambda, rng)
    return place_spans(lengths, hist_len, rng)


def _check_spans(spans, limit: int) -> None:
    covered = set()
    for start, length in spans:
        if length < 1 or start < 0 or start + length > limit:
            raise ValueError(f"span ({start}, {length}) outside [0, {limit})")
        frames = set(range(start, start + length))
        if frames & covered:
            raise ValueError(f"span ({start}, {length}) overlaps another span")
        covered |= frames


def apply_mask(s: Sample, spans: List[Span], limit: Optional[int] = None) -> Sample:
    """Flag the frames covered by ``spans`` as masked; content and marks are kept."""
    if not spans:
        return s
    _check_spans(spans, s.n_frames if limit is None else limit)
    out = s.copy()
    for start, length in spans:
        out.masked[start:start + length] = True
    return out


def apply_swap(s: Sample, i: int, j: int, hist_len: Optional[int] = None) -> Sample:
    """Exchange the whole (slots, present, masked, mark) bundles at positions i and j."""
    limit = s.n_frames if hist_len is None else hist_len
    if i == j:
        raise ValueError("swap positions must differ")
    if not (0 <= i < limit and 0 <= j < limit):
        raise ValueError(f"swap ({i}, {j}) outside [0, {limit})")
    out = s.copy()
    for arr in (out.boxes, out.present, out.marks, out.masked):
        arr[[i, j]] = arr[[j, i]]
    return out


def corrupt(s: Sample, cfg: NoiseConfig, rng: np.random.Generator, hist_len: int) -> Tuple[Sample, NoisePlan]:
    """Randomly apply masking and/or one swap to the history part of ``s``."""
    if s.n_frames < hist_len:
        raise ValueError(f"sample has {s.n_frames} frames, need at least {hist_len}")
    plan = NoisePlan()
    do_mask = rng.random() < cfg.p_mask
    do_swap = rng.random() < cfg.p_swap
    out = s
    if do_mask:
        plan.mask_spans = plan_mask(hist_len, cfg, rng)
        out = apply_mask(out, plan.mask_spans, limit=hist_len)
    if do_swap and hist_len >= 2:
        i, j = (int(v) for v in rng.choice(hist_len, size=2, replace=False))
        plan.swap = (i, j)
        out = apply_swap(out, i, j, hist_len)
    return out, plan


def plan_gap(n_frames: int, cfg: NoiseConfig, rng: np.random.Generator, max_len: Optional[int] = None) -> Span:
    """One contiguous interior gap for the compensation task.

    The length is a zero-rejected Poisson draw truncated to ``max_len``
    (default: the masking budget for ``n_frames``); the gap never covers the
    first or last frame.
    """
    if n_frames < 3:
        raise ValueError("compensation needs at least 3 frames")
    if max_len is None:
        max_len = max(1, mask_total(n_frames, cfg.mask_rate))
    max_len = min(max_len, n_frames - 2)
    while True:
        length = draw_span_lengths(max_len, cfg.span_lambda, rng)[0]
        start = int(rng.integers(1, n_frames - length))
        if gap_valid((start, length), n_frames):
            return start, length


def gap_valid(gap: Span, n_frames: int) -> bool:
    start, length = gap
    return length >= 1 and start >= 1 and start + length <= n_frames - 1
