"""Deterministic multi-lane car-following corpus.

Followers obey a Newell-style bound: a follower may advance no further than
its leader's position one reaction time earlier, minus the jam spacing
(``min_gap`` plus half of both lengths). Because leaders never move backward
this keeps every same-lane gap at or above ``min_gap``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, SynConfig
from .ingest import TrackPoint

LANE_CHANGE_DURATION = 1.5


@dataclass
class Vehicle:
    vid: str
    lane: int
    x: float
    v: float
    v_des: float
    length: float
    width: float
    history: List[float] = field(default_factory=list)  # x at past raw steps
    y_from: float = 0.0
    lc_elapsed: Optional[float] = None

    @property
    def rear(self) -> float:
        return self.x - self.length / 2

    @property
    def front(self) -> float:
        return self.x + self.length / 2


class Simulator:
    """Raw-step simulation of one road; vehicles can be added by hand."""

    def __init__(self, cfg: SynConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.vehicles: List[Vehicle] = []
        self.step_index = 0
        self.delay_steps = max(1, int(round(cfg.reaction / cfg.dt_raw)))
        self.points: List[TrackPoint] = []

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.cfg.lane_width

    def y_of(self, veh: Vehicle) -> float:
        target = self.lane_center(veh.lane)
        if veh.lc_elapsed is None:
            return target
        frac = min(1.0, veh.lc_elapsed / LANE_CHANGE_DURATION)
        return veh.y_from + frac * (target - veh.y_from)

    def add_vehicle(self, vid: str, lane: int, x: float, v: float, v_des: float, length: float = 4.5, width: float = 1.8) -> Vehicle:
        veh = Vehicle(vid, lane, x, v, v_des, length, width, history=[x])
        veh.y_from = self.lane_center(lane)
        self.vehicles.append(veh)
        return veh

    def lane_order(self, lane: int) -> List[Vehicle]:
        """Vehicles in ``lane`` sorted front to back."""
        return sorted((v for v in self.vehicles if v.lane == lane), key=lambda v: -v.x)

    def _delayed_x(self, veh: Vehicle) -> float:
        h = veh.history
        return h[max(0, len(h) - 1 - self.delay_steps)]

    def record(self) -> None:
        t = round(self.step_index * self.cfg.dt_raw, 9)
        for veh in sorted(self.vehicles, key=lambda v: v.vid):
            self.points.append(TrackPoint(veh.vid, t, veh.x, self.y_of(veh), veh.length, veh.width))

    def step(self) -> None:
        cfg = self.cfg
        dt = cfg.dt_raw
        new_x: Dict[str, float] = {}
        for lane in range(cfg.lanes):
            leader = None
            for veh in self.lane_order(lane):
                free = veh.x + veh.v_des * dt
                target = free
                if leader is not None:
                    spacing = cfg.min_gap + (leader.length + veh.length) / 2
                    # Newell bound against the leader's delayed position, and
                    # against its updated position so the gap never shrinks below min_gap.
                    bound = min(self._delayed_x(leader), new_x[leader.vid]) - spacing
                    target = min(target, bound)
                new_x[veh.vid] = max(veh.x, target)
                leader = veh
        for veh in self.vehicles:
            veh.v = (new_x[veh.vid] - veh.x) / dt
            veh.x = new_x[veh.vid]
            veh.history.append(veh.x)
            if len(veh.history) > self.delay_steps + 2:
                del veh.history[0]
            if veh.lc_elapsed is not None:
                veh.lc_elapsed += dt
                if veh.lc_elapsed >= LANE_CHANGE_DURATION:
                    veh.lc_elapsed = None
        self.step_index += 1

    def gaps_ok(self, veh: Vehicle, lane: int, headway: float = 0.0) -> bool:
        """True when ``veh`` fits into ``lane`` with at least min_gap to both neighbours.

        ``headway`` (s) adds the trailing vehicle's speed times headway to the
        required gap on each side.
        """
        gap = self.cfg.min_gap
        for other in self.vehicles:
            if other is veh or other.lane != lane:
                continue
            if other.x >= veh.x:
                if other.rear - veh.front < gap + veh.v * headway:
                    return False
            elif veh.rear - other.front < gap + other.v * headway:
                return False
        return True

    def try_lane_changes(self) -> None:
        cfg = self.cfg
        if cfg.lanes < 2 or cfg.lane_change_prob == 0:
            return
        for veh in sorted(self.vehicles, key=lambda v: v.vid):
            if veh.lc_elapsed is not None or veh.v >= 0.95 * veh.v_des:
                continue
            if self.rng.random() >= cfg.lane_change_prob:
                continue
            options = [l for l in (veh.lane - 1, veh.lane + 1) if 0 <= l < cfg.lanes]
            target = options[int(self.rng.integers(len(options)))]
            if self.gaps_ok(veh, target, headway=self.cfg.reaction):
                veh.y_from = self.y_of(veh)
                veh.lane = target
                veh.lc_elapsed = 0.0

    def remove_exited(self) -> None:
        self.vehicles = [v for v in self.vehicles if v.x <= self.cfg.road_len]


def check_feasible(cfg: SynConfig) -> None:
    # Steady free-flow density per lane is spawn_rate / v_slowest; each vehicle
    # needs at least min_gap plus a car length of road.
    v_slow = cfg.v_free * (1.0 - cfg.speed_spread)
    density = cfg.spawn_rate / v_slow
    if density * (cfg.min_gap + 5.0) > 1.0:
        raise ConfigError(
            f"infeasible corpus: spawn_rate {cfg.spawn_rate}/s at {v_slow:.1f} m/s "
            f"needs more than the lane length with min_gap {cfg.min_gap} m"
        )


def _draw_dimensions(rng: np.random.Generator):
    if rng.random() < 0.1:
        return float(rng.uniform(9.0, 14.0)), float(rng.uniform(2.3, 2.6))
    return float(rng.uniform(4.0, 5.5)), float(rng.uniform(1.7, 2.0))


def gen_corpus(cfg: SynConfig, duration: float) -> List[TrackPoint]:
    """Simulate ``duration`` seconds and return every vehicle's raw track points."""
    if not duration > 0:
        raise ConfigError("duration must be positive")
    check_feasible(cfg)
    if cfg.spawn_rate == 0:
        return []
    rng = np.random.default_rng(cfg.seed)
    sim = Simulator(cfg, rng)
    n_steps = int(round(duration / cfg.dt_raw))
    p_spawn = 1.0 - np.exp(-cfg.spawn_rate * cfg.dt_raw)
    pending = [0] * cfg.lanes
    counter = 0
    for k in range(n_steps + 1):
        for lane in range(cfg.lanes):
            if rng.random() < p_spawn:
                pending[lane] += 1
            if not pending[lane]:
                continue
            length, width = _draw_dimensions(rng)
            v_des = cfg.v_free * (1.0 - cfg.speed_spread * rng.random())
            order = sim.lane_order(lane)
            last = order[-1] if order else None
            x0 = length / 2
            if last is not None and last.rear - (x0 + length / 2) < cfg.min_gap + 10.0:
                continue  # entry blocked; the arrival waits
            v0 = v_des if last is None else min(v_des, last.v)
            sim.add_vehicle(f"v{counter:06d}", lane, x0, v0, v_des, length, width)
            counter += 1
            pending[lane] -= 1
        sim.record()
        if k == n_steps:
            break
        sim.try_lane_changes()
        sim.step()
        sim.remove_exited()
    return sim.points
