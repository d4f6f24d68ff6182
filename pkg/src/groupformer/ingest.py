"""Raw tracks -> normalized fixed-slot samples.

Space is tiled into ``L x Wd`` rectangles and time into windows of
``(hist_len + pred_len) * stride`` raw frames. Each (tile, window) pair that
passes the capacity check becomes one :class:`Sample`: ``hist_len + pred_len``
frames, each with ``max_slots`` center-format boxes normalized to [0, 1].
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import DataError, DomainConfig

logger = logging.getLogger(__name__)

TRACK_HEADER = ("vehicle_id", "t", "x", "y", "len", "wid")


@dataclass(frozen=True)
class TrackPoint:
    vehicle_id: str
    t: float
    x: float
    y: float
    len: float
    wid: float


@dataclass(frozen=True)
class NormBox:
    x: float
    y: float
    w: float
    h: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Frame:
    """Read-only view of one time slice of a :class:`Sample`."""

    mark: int
    slots: np.ndarray  # (max_slots, 4)
    present: np.ndarray  # (max_slots,) bool
    masked: bool = False

    @property
    def count(self) -> int:
        return int(self.present.sum())


@dataclass
class Sample:
    """One effective-domain window in array form.

    ``boxes[f, s]`` holds the normalized (x, y, w, h) of slot ``s`` at sequence
    position ``f``. ``vehicles[s]`` is the vehicle bound to slot ``s`` (None when
    the slot is never used).
    """

    boxes: np.ndarray  # (n_frames, max_slots, 4) float64
    present: np.ndarray  # (n_frames, max_slots) bool
    marks: np.ndarray  # (n_frames,) int64
    masked: np.ndarray  # (n_frames,) bool
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.boxes.shape[0]

    @property
    def max_slots(self) -> int:
        return self.boxes.shape[1]

    def frame(self, i: int) -> Frame:
        return Frame(int(self.marks[i]), self.boxes[i], self.present[i], bool(self.masked[i]))

    @property
    def frames(self) -> List[Frame]:
        return [self.frame(i) for i in range(self.n_frames)]

    def copy(self) -> "Sample":
        return Sample(
            self.boxes.copy(), self.present.copy(), self.marks.copy(), self.masked.copy(), json.loads(json.dumps(self.meta))
        )

    def slice(self, start: int, stop: int) -> "Sample":
        return Sample(
            self.boxes[start:stop].copy(),
            self.present[start:stop].copy(),
            self.marks[start:stop].copy(),
            self.masked[start:stop].copy(),
            dict(self.meta),
        )

    def key(self) -> str:
        m = self.meta
        return f"{m.get('site', '')}:{m.get('tile_x', 0)}:{m.get('tile_y', 0)}:{m.get('t0', 0)}"

    def equals(self, other: "Sample") -> bool:
        """Bitwise equality of the array content."""
        return (
            np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.marks, other.marks)
            and np.array_equal(self.masked, other.masked)
        )


@dataclass
class RawWindow:
    """Points of one (tile, time window) pair, grouped by vehicle."""

    tile_x: int
    tile_y: int
    window: int
    first_raw: int  # raw frame index of the window's first frame
    n_raw: int
    tracks: Dict[str, List[Tuple[int, TrackPoint]]]  # vehicle -> [(raw_idx, point)], raw_idx ascending

    def origin(self, cfg: DomainConfig) -> Tuple[float, float]:
        return self.tile_x * cfg.L, self.tile_y * cfg.Wd

    def peak_count(self) -> int:
        counts: Dict[int, int] = defaultdict(int)
        for pts in self.tracks.values():
            for k, _ in pts:
                counts[k] += 1
        return max(counts.values(), default=0)


def _cell(v: float, size: float) -> int:
    # Division can round across a boundary (e.g. tiny negatives underflow to -0.0);
    # nudge so that cell * size <= v < (cell + 1) * size holds exactly.
    c = math.floor(v / size)
    if v < c * size:
        c -= 1
    elif v >= (c + 1) * size:
        c += 1
    return c


def tile_of(x: float, y: float, cfg: DomainConfig) -> Tuple[int, int]:
    return _cell(x, cfg.L), _cell(y, cfg.Wd)


def normalize(p: TrackPoint, cfg: DomainConfig, origin: Tuple[float, float] = (0.0, 0.0)) -> NormBox:
    if not 0 < p.len <= cfg.len_cap:
        raise DataError(f"len={p.len} outside (0, {cfg.len_cap}] for vehicle {p.vehicle_id}")
    if not 0 < p.wid <= cfg.wid_cap:
        raise DataError(f"wid={p.wid} outside (0, {cfg.wid_cap}] for vehicle {p.vehicle_id}")
    return NormBox(
        (p.x - origin[0]) / cfg.L,
        (p.y - origin[1]) / cfg.Wd,
        p.len / cfg.len_cap,
        p.wid / cfg.wid_cap,
    )


def denormalize(b, cfg: DomainConfig, origin: Tuple[float, float] = (0.0, 0.0)) -> Tuple[float, float, float, float]:
    """Return (x, y, len, wid) in meters. Accepts a NormBox or any 4-sequence."""
    x, y, w, h = b.as_tuple() if isinstance(b, NormBox) else b
    return (x * cfg.L + origin[0], y * cfg.Wd + origin[1], w * cfg.len_cap, h * cfg.wid_cap)


def denormalize_array(boxes: np.ndarray, cfg: DomainConfig, origin=(0.0, 0.0)) -> np.ndarray:
    scale = np.array([cfg.L, cfg.Wd, cfg.len_cap, cfg.wid_cap])
    shift = np.array([origin[0], origin[1], 0.0, 0.0])
    return np.asarray(boxes, dtype=np.float64) * scale + shift


def _raw_index(t: float, raw_dt: float) -> int:
    return int(round(t / raw_dt))


def validate_tracks(tracks: Iterable[TrackPoint]) -> Dict[str, List[TrackPoint]]:
    """Group points by vehicle, rejecting vehicles whose times are not strictly increasing."""
    by_vehicle: Dict[str, List[TrackPoint]] = defaultdict(list)
    for p in tracks:
        by_vehicle[p.vehicle_id].append(p)
    good = {}
    for vid, pts in by_vehicle.items():
        if any(b.t <= a.t for a, b in zip(pts, pts[1:])):
            logger.warning("rejecting vehicle %s: times not strictly increasing", vid)
            continue
        good[vid] = pts
    return good


def partition(tracks: Sequence[TrackPoint], cfg: DomainConfig) -> List[RawWindow]:
    """Tile tracks into (space tile, time window) groups.

    Windows only cover time fully inside the observed raw-frame range. Within a
    window each vehicle keeps its first temporally continuous run. Windows whose
    peak simultaneous count exceeds ``max_slots`` are dropped.
    """
    if not tracks:
        return []
    by_vehicle = validate_tracks(tracks)
    if not by_vehicle:
        return []
    raw_dt = cfg.raw_dt
    span = cfg.window_raw_frames
    all_idx = [_raw_index(p.t, raw_dt) for pts in by_vehicle.values() for p in pts]
    k_min, k_max = min(all_idx), max(all_idx)
    w_first = -(-k_min // span)  # ceil division
    w_last = (k_max + 1) // span - 1

    cells: Dict[Tuple[int, int, int], Dict[str, List[Tuple[int, TrackPoint]]]] = defaultdict(lambda: defaultdict(list))
    for vid in sorted(by_vehicle):
        for p in by_vehicle[vid]:
            k = _raw_index(p.t, raw_dt)
            w = k // span
            if w < w_first or w > w_last:
                continue
            tx, ty = tile_of(p.x, p.y, cfg)
            cells[(tx, ty, w)][vid].append((k, p))

    windows = []
    for (tx, ty, w) in sorted(cells):
        tracks_in = {}
        for vid, pts in cells[(tx, ty, w)].items():
            run = [pts[0]]
            for item in pts[1:]:
                if item[0] != run[-1][0] + 1:
                    break
                run.append(item)
            tracks_in[vid] = run
        win = RawWindow(tx, ty, w, w * span, span, tracks_in)
        peak = win.peak_count()
        if peak > cfg.max_slots:
            logger.debug("dropping window %s: %d simultaneous vehicles", (tx, ty, w), peak)
            continue
        windows.append(win)
    return windows


def assemble(window: RawWindow, cfg: DomainConfig, site: str = "synthetic") -> Optional[Sample]:
    """Build a fixed-slot Sample from a partitioned window, or None if it cannot be assembled."""
    n = cfg.n_frames
    if window.n_raw < cfg.window_raw_frames:
        logger.warning("skipping window %s: fewer than %d selectable frames", (window.tile_x, window.window), n)
        return None
    selected = {window.first_raw + i * cfg.stride: i for i in range(n)}
    origin = window.origin(cfg)

    first_seen: Dict[str, int] = {}
    for vid, pts in window.tracks.items():
        for k, _ in pts:
            if k in selected:
                first_seen[vid] = min(first_seen.get(vid, n), selected[k])
    order = sorted(first_seen, key=lambda v: (first_seen[v], v))
    if len(order) > cfg.max_slots:
        logger.info(
            "skipping window %s: %d distinct vehicles need more than %d slots",
            (window.tile_x, window.tile_y, window.window), len(order), cfg.max_slots,
        )
        return None

    boxes = np.zeros((n, cfg.max_slots, 4))
    present = np.zeros((n, cfg.max_slots), dtype=bool)
    for slot, vid in enumerate(order):
        for k, p in window.tracks[vid]:
            f = selected.get(k)
            if f is None:
                continue
            boxes[f, slot] = normalize(p, cfg, origin).as_tuple()
            present[f, slot] = True
    meta = {
        "site": site,
        "tile_x": window.tile_x,
        "tile_y": window.tile_y,
        "t0": round(window.first_raw * cfg.raw_dt, 9),
        "cfg": domain_to_dict(cfg),
        "vehicles": order + [None] * (cfg.max_slots - len(order)),
    }
    return Sample(boxes, present, np.arange(n, dtype=np.int64), np.zeros(n, dtype=bool), meta)


def build_samples(tracks: Sequence[TrackPoint], cfg: DomainConfig, site: str = "synthetic") -> List[Sample]:
    out = []
    for win in partition(tracks, cfg):
        s = assemble(win, cfg, site)
        if s is not None:
            out.append(s)
    return out


def domain_to_dict(cfg: DomainConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def domain_from_meta(meta: dict) -> DomainConfig:
    return DomainConfig(**meta["cfg"])


def tile_origin(meta: dict) -> Tuple[float, float]:
    cfg = meta["cfg"]
    return meta.get("tile_x", 0) * cfg["L"], meta.get("tile_y", 0) * cfg["Wd"]


# --- raw track CSV ---------------------------------------------------------


def write_tracks(tracks: Iterable[TrackPoint], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACK_HEADER)
    for p in tracks:
        w.writerow([p.vehicle_id, repr(p.t), repr(p.x), repr(p.y), repr(p.len), repr(p.wid)])


def read_tracks(fh) -> List[TrackPoint]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TRACK_HEADER:
        raise DataError(f"raw track header must be {','.join(TRACK_HEADER)}, got {header}")
    out = []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != 6:
            raise DataError(f"line {lineno}: expected 6 fields, got {len(row)}")
        try:
            out.append(TrackPoint(row[0], *(float(v) for v in row[1:])))
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return out


# --- dataset file (one JSON record per line) --------------------------------


def sample_to_record(s: Sample) -> dict:
    return {
        "meta": s.meta,
        "frames": [
            {
                "mark": int(s.marks[i]),
                "masked": bool(s.masked[i]),
                "slots": [[float(v) for v in box] for box in s.boxes[i]],
                "present": [bool(v) for v in s.present[i]],
            }
            for i in range(s.n_frames)
        ],
    }


def sample_from_record(rec: dict) -> Sample:
    try:
        frames = rec["frames"]
        boxes = np.array([f["slots"] for f in frames], dtype=np.float64)
        present = np.array([f["present"] for f in frames], dtype=bool)
        marks = np.array([f["mark"] for f in frames], dtype=np.int64)
        masked = np.array([f["masked"] for f in frames], dtype=bool)
        meta = rec["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed sample record: {exc}") from None
    if boxes.ndim != 3 or boxes.shape[2] != 4 or present.shape != boxes.shape[:2]:
        raise DataError(f"sample arrays have inconsistent shapes {boxes.shape} / {present.shape}")
    return Sample(boxes, present, marks, masked, meta)


def dumps_samples(samples: Iterable[Sample]) -> str:
    # json emits shortest round-trip reprs: every float is reproduced exactly.
    buf = io.StringIO()
    for s in samples:
        buf.write(json.dumps(sample_to_record(s), separators=(",", ":")))
        buf.write("\n")
    return buf.getvalue()


def loads_samples(text: str) -> List[Sample]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"dataset line {lineno}: {exc}") from None
        out.append(sample_from_record(rec))
    return out


def read_samples(path: str) -> List[Sample]:
    with open(path, encoding="utf-8") as fh:
        return loads_samples(fh.read())


def dataset_hash(samples: Sequence[Sample]) -> str:
    """Content hash of a sample set, independent of sample order."""
    lines = sorted(dumps_samples(samples).splitlines())
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def split_samples(samples: Sequence[Sample], test_frac: float, rng: np.random.Generator):
    """Deterministic disjoint train/test split."""
    idx = rng.permutation(len(samples))
    n_test = int(round(test_frac * len(samples)))
    test_idx = sorted(idx[:n_test].tolist())
    train_idx = sorted(idx[n_test:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
