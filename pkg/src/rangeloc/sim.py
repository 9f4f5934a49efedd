"""Ground-truth trajectories, anchor layouts, and measurement simulation.

Ranges are produced round-robin: measurement n queries anchor ids[n mod K]
at tick n / f, mimicking a single-channel sensor polling fixed anchors
sequentially. Range noise defaults to a truncated normal (sigma = eta / 3,
hard-clipped to [-eta, eta]) so both the bounded-noise assumption and the
3-sigma variance model hold at once; a uniform model is available.
Scheduled outlier windows add a constant bias on one anchor.

All generation is pure given the seed: identical seeds give identical
streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import liegroup
from .errors import InsufficientGeometryError
from .pipeline import (
    OrientationMeasurement,
    RangeMeasurement,
    max_tetrahedron_volume,
    COPLANARITY_VOLUME_TOL,
)


class AnchorSet:
    """Fixed anchors with known positions, ordered by id."""

    def __init__(self, items, require_noncoplanar: bool = True):
        pairs = sorted((int(i), np.asarray(p, dtype=float)) for i, p in items)
        self.ids = tuple(i for i, _ in pairs)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate anchor id")
        self.positions = np.array([p for _, p in pairs]).reshape(-1, 3)
        if require_noncoplanar:
            if len(self.ids) < 4:
                raise InsufficientGeometryError("3-D localization needs at least 4 anchors")
            if max_tetrahedron_volume(self.positions) <= COPLANARITY_VOLUME_TOL:
                raise InsufficientGeometryError("anchors are coplanar")

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {i: p for i, p in zip(self.ids, self.positions)}

    def position(self, anchor_id: int) -> np.ndarray:
        return self.positions[self.ids.index(anchor_id)]


PRESETS: dict[str, dict] = {
    "paper-indoor": {
        "anchors": [(0, (3.0, 3.0, 1.95)), (1, (3.0, -3.0, 0.53)),
                    (2, (-3.0, 3.0, 0.54)), (3, (-3.0, -3.0, 1.98))],
        "eta": 0.2,
        "f": 32.46,
        "f_imu": 100.3,
    },
    "paper-outdoor": {
        "anchors": [(0, (0.0, 0.0, 0.79)), (1, (6.0, 0.0, 5.0)),
                    (2, (6.0, 8.0, 1.52)), (3, (0.0, 8.0, 5.52))],
        "eta": 0.2,
        "f": 32.46,
        "f_imu": 100.3,
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def preset_anchors(name: str) -> AnchorSet:
    return AnchorSet(preset(name)["anchors"])


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric ground-truth path sampled at ``rate`` Hz.

    Shapes: ``circle`` (radius, center, in the z=center_z plane), ``helix``
    (circle plus linear climb across z_range), ``rectangle`` (axis-aligned,
    sides, constant z), ``waypoints`` (piecewise linear; a single waypoint
    means a static robot). Heading follows the velocity direction (yaw
    only); a static robot keeps the identity orientation.
    """

    shape: str = "circle"
    speed: float = 0.5
    duration: float = 30.0
    rate: float = 100.0
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 2.0
    sides: tuple = (4.0, 4.0)
    z_range: Optional[tuple] = None
    waypoints: Optional[tuple] = None
    v_max: Optional[float] = None

    def __post_init__(self):
        if self.duration < 0.0 or self.rate <= 0.0:
            raise ValueError("need duration >= 0 and rate > 0")
        if self.shape not in ("circle", "helix", "rectangle", "waypoints"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.shape != "waypoints" and self.speed < 0.0:
            raise ValueError("speed must be nonnegative")
        if self.v_max is not None and self.speed > self.v_max:
            raise ValueError("infeasible speed profile: speed exceeds v_max")


@dataclass(frozen=True)
class OutlierWindow:
    anchor_id: int
    start: float
    end: float
    bias: float


@dataclass(frozen=True)
class NoiseSpec:
    eta: float = 0.0
    model: str = "truncated-normal"  # or "uniform"
    sigma_o: float = 0.0
    outliers: tuple = ()

    def __post_init__(self):
        if self.eta < 0.0 or self.sigma_o < 0.0:
            raise ValueError("noise magnitudes must be nonnegative")
        if self.model not in ("truncated-normal", "uniform"):
            raise ValueError(f"unknown noise model {self.model!r}")


class Trajectory:
    """Sampled truth: times (K,), positions (K, 3), rotations (K, 3, 3)."""

    def __init__(self, times: np.ndarray, positions: np.ndarray, rotations: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.rotations = np.asarray(rotations, dtype=float)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def position_at(self, t: float) -> np.ndarray:
        return np.array([
            np.interp(t, self.times, self.positions[:, k]) for k in range(3)
        ])

    def nearest_index(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i <= 0:
            return 0
        if i >= len(self.times):
            return len(self.times) - 1
        return i if self.times[i] - t < t - self.times[i - 1] else i - 1

    def rotation_at(self, t: float) -> np.ndarray:
        return self.rotations[self.nearest_index(t)]


def _yaw_rotation(vx: float, vy: float) -> np.ndarray:
    yaw = math.atan2(vy, vx)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_truth(spec: TrajectorySpec) -> Trajectory:
    """Sample the parametric path; consecutive displacement <= speed * dt."""
    n = int(math.floor(spec.duration * spec.rate))
    times = np.arange(n + 1) / spec.rate if spec.duration > 0.0 else np.zeros(0)
    if len(times) == 0:
        return Trajectory(times, np.zeros((0, 3)), np.zeros((0, 3, 3)))
    if spec.shape in ("circle", "helix"):
        c = np.asarray(spec.center, dtype=float)
        climb = 0.0
        z0 = c[2]
        if spec.shape == "helix":
            z0, z1 = spec.z_range if spec.z_range is not None else (c[2], c[2] + 1.0)
            climb = (z1 - z0) / max(spec.duration, 1e-12)
            if abs(climb) > spec.speed:
                raise ValueError("infeasible speed profile: climb rate exceeds speed")
        # speed is the total speed; the horizontal component drives the turn
        omega = math.sqrt(max(spec.speed**2 - climb**2, 0.0)) / spec.radius
        theta = omega * times
        pos = np.stack(
            [
                c[0] + spec.radius * np.cos(theta),
                c[1] + spec.radius * np.sin(theta),
                z0 + climb * times,
            ],
            axis=1,
        )
        rot = np.array([_yaw_rotation(-math.sin(th), math.cos(th)) for th in theta])
        return Trajectory(times, pos, rot)
    if spec.shape == "rectangle":
        sx, sy = spec.sides
        c = np.asarray(spec.center, dtype=float)
        corners = np.array(
            [
                [c[0] - sx / 2, c[1] - sy / 2, c[2]],
                [c[0] + sx / 2, c[1] - sy / 2, c[2]],
                [c[0] + sx / 2, c[1] + sy / 2, c[2]],
                [c[0] - sx / 2, c[1] + sy / 2, c[2]],
                [c[0] - sx / 2, c[1] - sy / 2, c[2]],
            ]
        )
        return _waypoint_path(times, corners, spec.speed, loop=True)
    waypoints = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
    return _waypoint_path(times, waypoints, spec.speed, loop=False)


def _waypoint_path(times: np.ndarray, pts: np.ndarray, speed: float, loop: bool) -> Trajectory:
    if len(pts) == 1 or speed == 0.0:
        pos = np.tile(pts[0], (len(times), 1))
        rot = np.tile(np.eye(3), (len(times), 1, 1))
        return Trajectory(times, pos, rot)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    pos = np.empty((len(times), 3))
    rot = np.empty((len(times), 3, 3))
    for k, t in enumerate(times):
        s = speed * t
        if loop:
            s = s % total
        else:
            s = min(s, total)
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = (s - cum[i]) / seg_len[i]
        pos[k] = pts[i] + frac * seg[i]
        rot[k] = _yaw_rotation(seg[i][0], seg[i][1])
    return Trajectory(times, pos, rot)


def simulate_ranges(
    truth: Trajectory,
    anchors: AnchorSet,
    f: float,
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
) -> list[RangeMeasurement]:
    """Round-robin range stream at frequency f over the truth duration."""
    rng = np.random.default_rng(seed)
    # ticks n/f strictly inside the truth duration
    n_ticks = int(math.ceil(truth.duration * f)) if len(truth) else 0
    out = []
    for n in range(n_ticks):
        t = n / f
        aid = anchors.ids[n % len(anchors)]
        p = truth.position_at(t)
        d = float(np.linalg.norm(p - anchors.position(aid)))
        if noise.eta > 0.0:
            if noise.model == "uniform":
                d += rng.uniform(-noise.eta, noise.eta)
            else:
                d += float(np.clip(rng.normal(0.0, noise.eta / 3.0), -noise.eta, noise.eta))
        for w in noise.outliers:
            if w.anchor_id == aid and w.start <= t < w.end:
                d += w.bias
        out.append(RangeMeasurement(timestamp=t, anchor_id=aid, d=max(d, 0.0)))
    return out


def simulate_orientation(
    truth: Trajectory,
    f_imu: float,
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
) -> list[OrientationMeasurement]:
    """Orientation stream: truth rotation right-perturbed by exp of a
    Gaussian rotation vector (componentwise sigma_o)."""
    rng = np.random.default_rng(seed)
    n_ticks = int(math.ceil(truth.duration * f_imu)) if len(truth) else 0
    out = []
    for n in range(n_ticks):
        t = n / f_imu
        R = truth.rotation_at(t)
        if noise.sigma_o > 0.0:
            R = R @ liegroup.exp_so3(rng.normal(0.0, noise.sigma_o, size=3))
        out.append(OrientationMeasurement(timestamp=t, R=R))
    return out
